//! Single-forward-pass conditional generation.
//!
//! Three modes share one code path (`generate_one`): the full mode draws a
//! fresh prior-sampled context per image, the point-estimate mode feeds the
//! text embedding verbatim, and the image-guided mode draws the bottleneck
//! code from the encoder posterior of a guidance image. No mode performs any
//! optimization at inference: generator forward calls equal images produced.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::CvaeAdapter;
use crate::embedding::{Embedding, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::generator::GeneratorBackend;
use crate::bank::EmbeddingBank;
use crate::prior::{sample_context, PriorConfig};
use crate::tensor::Tensor;
use crate::toyworld::gaussian;

/// Where the image-guided mode takes its context from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidedContextSource {
    /// Prior-sampled context from the text prompt (default).
    TextPrior,
    /// The text embedding itself.
    TextDirect,
    /// The guidance image's own embedding.
    GuidanceImage,
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceOptions {
    pub prior: PriorConfig,
    pub guided_context: GuidedContextSource,
    /// Optional per-coordinate truncation of the Gaussian code (off by
    /// default); coordinates are redrawn until they fall inside the bound.
    pub truncation: Option<f64>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            prior: PriorConfig::default(),
            guided_context: GuidedContextSource::TextPrior,
            truncation: None,
        }
    }
}

pub struct InferenceEngine {
    adapter: CvaeAdapter,
    generator: Arc<dyn GeneratorBackend>,
    embedder: Arc<dyn EmbeddingBackend>,
    bank: Option<EmbeddingBank>,
    options: InferenceOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    Full,
    Pt,
    Img,
}

impl GenerationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GenerationMode::Full),
            "pt" => Ok(GenerationMode::Pt),
            "img" => Ok(GenerationMode::Img),
            other => Err(Error::input(format!("unknown mode {other:?} (expected full|pt|img)"))),
        }
    }
}

impl InferenceEngine {
    pub fn new(
        adapter: CvaeAdapter,
        generator: Arc<dyn GeneratorBackend>,
        embedder: Arc<dyn EmbeddingBackend>,
        bank: Option<EmbeddingBank>,
        options: InferenceOptions,
    ) -> Result<Self> {
        if adapter.config().generator_latent_len != generator.latent_len() {
            return Err(Error::config(format!(
                "adapter emits {}-dim offsets but the generator expects {}",
                adapter.config().generator_latent_len,
                generator.latent_len()
            )));
        }
        if adapter.config().context_dim != embedder.dim() {
            return Err(Error::config(format!(
                "adapter context dim {} does not match embedder dim {}",
                adapter.config().context_dim,
                embedder.dim()
            )));
        }
        if let Some(b) = &bank {
            if b.dim() != embedder.dim() {
                return Err(Error::config(format!(
                    "bank dim {} does not match embedder dim {}",
                    b.dim(),
                    embedder.dim()
                )));
            }
        }
        Ok(InferenceEngine { adapter, generator, embedder, bank, options })
    }

    pub fn adapter(&self) -> &CvaeAdapter {
        &self.adapter
    }

    pub fn generator(&self) -> &Arc<dyn GeneratorBackend> {
        &self.generator
    }

    pub fn embedder(&self) -> &Arc<dyn EmbeddingBackend> {
        &self.embedder
    }

    pub fn bank(&self) -> Option<&EmbeddingBank> {
        self.bank.as_ref()
    }

    pub fn options(&self) -> &InferenceOptions {
        self.options_ref()
    }

    fn options_ref(&self) -> &InferenceOptions {
        &self.options
    }

    /// One image from an explicit context and code; the shared core of every
    /// mode and the hook tests use to force a code.
    pub fn generate_one(&self, context: &Embedding, code: &[f64]) -> Result<Tensor> {
        let offset = self.adapter.decode(code, context)?;
        let w = self.generator.mean_latent().plus(&offset)?;
        self.generator.generate(&w)
    }

    /// Draw a bottleneck code from the prior: standard normal when the
    /// model is variational, the prior mean (zero) otherwise.
    pub fn draw_code(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.adapter.config().latent_dim;
        if !self.adapter.config().variational {
            return vec![0.0; d];
        }
        match self.options.truncation {
            None => (0..d).map(|_| gaussian(rng)).collect(),
            Some(t) => (0..d)
                .map(|_| loop {
                    let v = gaussian(rng);
                    if v.abs() <= t {
                        break v;
                    }
                })
                .collect(),
        }
    }

    /// Full mode: per image, a fresh prior-sampled context and a fresh code.
    pub fn generate_full(&self, prompt: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        let bank = self
            .bank
            .as_ref()
            .ok_or_else(|| Error::config("full mode requires an embedding bank"))?;
        let text = self.embedder.embed_text(prompt)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let ctx = sample_context(bank, &text, &self.options.prior, rng)?;
            let code = self.draw_code(rng);
            out.push(self.generate_one(&ctx.embedding, &code)?);
        }
        Ok(out)
    }

    /// Point-estimate mode: the text embedding is the context verbatim; only
    /// the code varies across images.
    pub fn generate_pt(&self, prompt: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        let text = self.embedder.embed_text(prompt)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let code = self.draw_code(rng);
            out.push(self.generate_one(&text, &code)?);
        }
        Ok(out)
    }

    /// Image-guided mode: codes come from the encoder posterior of the
    /// guidance image instead of the prior.
    pub fn generate_img_guided(
        &self,
        prompt: &str,
        guidance: &Tensor,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        let text = self.embedder.embed_text(prompt)?;
        let d = self.adapter.config().latent_dim;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let context = match self.options.guided_context {
                GuidedContextSource::TextPrior => {
                    let bank = self.bank.as_ref().ok_or_else(|| {
                        Error::config("image-guided mode with a text prior requires a bank")
                    })?;
                    sample_context(bank, &text, &self.options.prior, rng)?.embedding
                }
                GuidedContextSource::TextDirect => text.clone(),
                GuidedContextSource::GuidanceImage => self.embedder.embed_image(guidance)?,
            };
            let (mu, logvar) = self.adapter.encode(guidance, &context)?;
            let code = if self.adapter.config().variational {
                let noise: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
                self.adapter.reparameterize(&mu, &logvar, &noise)?
            } else {
                mu
            };
            out.push(self.generate_one(&context, &code)?);
        }
        Ok(out)
    }

    pub fn generate(
        &self,
        mode: GenerationMode,
        prompt: &str,
        guidance: Option<&Tensor>,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        match mode {
            GenerationMode::Full => self.generate_full(prompt, n, rng),
            GenerationMode::Pt => self.generate_pt(prompt, n, rng),
            GenerationMode::Img => {
                let g = guidance
                    .ok_or_else(|| Error::input("image-guided mode requires a guidance image"))?;
                self.generate_img_guided(prompt, g, n, rng)
            }
        }
    }

    /// Deterministic child rng for an image index under a batch seed.
    pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::bank::build_bank;
    use crate::embedding::ToyEmbedder;
    use crate::generator::AffineDecoderGenerator;

    fn engine_with_bank(bank_entries: usize) -> (Arc<ToyEmbedder>, Arc<AffineDecoderGenerator>, InferenceEngine) {
        let embedder = Arc::new(ToyEmbedder::with_defaults(11));
        let generator = Arc::new(AffineDecoderGenerator::toy(embedder.world(), 7));
        let config = AdapterConfig {
            init_seed: 2,
            ..AdapterConfig::toy_defaults(embedder.dim(), embedder.image_shape(), generator.latent_len())
        };
        let adapter = CvaeAdapter::new(config).unwrap();
        let bank = if bank_entries > 0 {
            let images: Vec<Tensor> = embedder
                .world()
                .sample_many(bank_entries, 17)
                .into_iter()
                .map(|s| s.image)
                .collect();
            let ids: Vec<String> = (0..bank_entries).map(|i| format!("b{i:04}")).collect();
            Some(build_bank(embedder.as_ref(), &images, &ids).unwrap())
        } else {
            None
        };
        let options = InferenceOptions {
            prior: PriorConfig { k: 10, m: 3, ..Default::default() },
            ..Default::default()
        };
        let engine = InferenceEngine::new(
            adapter,
            generator.clone() as Arc<dyn GeneratorBackend>,
            embedder.clone() as Arc<dyn EmbeddingBackend>,
            bank,
            options,
        )
        .unwrap();
        (embedder, generator, engine)
    }

    #[test]
    fn forward_calls_equal_images_for_every_mode() {
        let (embedder, generator, engine) = engine_with_bank(64);
        let guidance = embedder.world().sample_many(1, 5).remove(0).image;
        for n in [1usize, 8] {
            for mode in [GenerationMode::Full, GenerationMode::Pt, GenerationMode::Img] {
                let before = generator.forward_calls();
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let imgs = engine
                    .generate(mode, "toy:a1=1,a4=-1", Some(&guidance), n, &mut rng)
                    .unwrap();
                assert_eq!(imgs.len(), n);
                assert_eq!(generator.forward_calls(), before + n as u64, "mode {mode:?}");
            }
        }
    }

    #[test]
    fn seeded_batches_are_bitwise_reproducible() {
        let (_, _, engine) = engine_with_bank(64);
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let a = engine.generate_full("toy:a0=1", 4, &mut rng1).unwrap();
        let b = engine.generate_full("toy:a0=1", 4, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pt_with_shared_code_is_deterministic() {
        let (embedder, _, engine) = engine_with_bank(0);
        let text = embedder.embed_text("toy:a2=1").unwrap();
        let code = vec![0.2; 128];
        let a = engine.generate_one(&text, &code).unwrap();
        let b = engine.generate_one(&text, &code).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mode_without_bank_is_a_config_error() {
        let (_, _, engine) = engine_with_bank(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            engine.generate_full("toy:a0=1", 1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_prior_over_the_text_embedding_reduces_full_to_pt() {
        // bank containing exactly the text embedding; k = m = 1
        let embedder = Arc::new(ToyEmbedder::with_defaults(11));
        let generator = Arc::new(AffineDecoderGenerator::toy(embedder.world(), 7));
        let config = AdapterConfig {
            init_seed: 2,
            ..AdapterConfig::toy_defaults(embedder.dim(), embedder.image_shape(), generator.latent_len())
        };
        let adapter = CvaeAdapter::new(config).unwrap();
        let prompt = "toy:a1=1,a5=-1";
        let text = embedder.embed_text(prompt).unwrap();
        let bank = crate::bank::EmbeddingBank::from_entries(
            [("the-prompt".to_string(), text.clone())],
            "test",
        )
        .unwrap();

        let degenerate = PriorConfig { k: 1, m: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampled = crate::prior::sample_context(&bank, &text, &degenerate, &mut rng).unwrap();
        assert!((sampled.neighbors[0].similarity - 1.0).abs() <= 1e-6);
        assert_eq!(sampled.embedding.values(), text.values());

        let engine = InferenceEngine::new(
            adapter,
            generator as Arc<dyn GeneratorBackend>,
            embedder as Arc<dyn EmbeddingBackend>,
            Some(bank),
            InferenceOptions::default(),
        )
        .unwrap();
        let code = vec![0.7; 128];
        let via_prior = engine.generate_one(&sampled.embedding, &code).unwrap();
        let via_pt = engine.generate_one(&text, &code).unwrap();
        assert_eq!(via_prior, via_pt);
    }

    #[test]
    fn truncation_bounds_the_code() {
        let (embedder, generator, _) = engine_with_bank(0);
        let config = AdapterConfig {
            init_seed: 2,
            ..AdapterConfig::toy_defaults(embedder.dim(), embedder.image_shape(), generator.latent_len())
        };
        let adapter = CvaeAdapter::new(config).unwrap();
        let engine = InferenceEngine::new(
            adapter,
            generator as Arc<dyn GeneratorBackend>,
            embedder as Arc<dyn EmbeddingBackend>,
            None,
            InferenceOptions { truncation: Some(0.5), ..Default::default() },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let z = engine.draw_code(&mut rng);
            assert!(z.iter().all(|v| v.abs() <= 0.5));
        }
    }
}
