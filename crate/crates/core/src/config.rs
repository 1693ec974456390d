//! Flat `key = value` pipeline configuration.
//!
//! One file configures backends, adapter architecture, training, the prior,
//! and evaluation. Unknown keys are rejected. Command-line flags override
//! file values through [`PipelineConfig::apply_override`] with the same key
//! names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::adapter::{AdapterConfig, EncoderMode};
use crate::embedding::{
    DifferentiableImageEmbedder, EmbeddingBackend, FileEmbedder, ToyEmbedder, ToyEmbedderConfig,
};
use crate::error::{Error, Result};
use crate::generator::AffineDecoderGenerator;
use crate::infer::{GuidedContextSource, InferenceOptions};
use crate::losses::LossWeights;
use crate::prior::PriorConfig;
use crate::toyworld::ToyWorld;
use crate::train::TrainConfig;

/// Parse `key = value` lines; `#` comments and blank lines are skipped.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    External,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub embedding_backend: BackendKind,
    pub embedding_seed: u64,
    pub embedding_dim: usize,
    pub gap_scale: f64,
    pub leakage: f64,
    pub embedding_weights: Option<PathBuf>,

    pub generator_backend: BackendKind,
    pub generator_seed: u64,
    pub generator_weights: Option<PathBuf>,

    pub latent_dim: usize,
    pub feature_dim: usize,
    pub mlp_hidden: usize,
    pub encoder_mode: EncoderMode,
    pub variational: bool,
    pub init_seed: u64,
    pub leaky_slope: f64,

    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub train_seed: u64,
    pub checkpoint_every: usize,
    pub kl_warmup_iterations: usize,
    pub freeze_conv: bool,
    pub loss_weights: LossWeights,

    pub perceptual_seed: u64,
    pub identity_seed: u64,

    pub prior: PriorConfig,
    pub guided_context: GuidedContextSource,
    pub truncation: Option<f64>,

    pub eval_images_per_caption: usize,
    pub eval_negatives_per_query: usize,
    pub eval_ks: Vec<usize>,
    pub eval_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            embedding_backend: BackendKind::Toy,
            embedding_seed: 11,
            embedding_dim: crate::embedding::DEFAULT_EMBED_DIM,
            gap_scale: crate::embedding::DEFAULT_GAP_SCALE,
            leakage: crate::embedding::DEFAULT_LEAKAGE,
            embedding_weights: None,
            generator_backend: BackendKind::Toy,
            generator_seed: 7,
            generator_weights: None,
            latent_dim: crate::adapter::DEFAULT_LATENT_DIM,
            feature_dim: crate::adapter::DEFAULT_FEATURE_DIM,
            mlp_hidden: crate::adapter::DEFAULT_MLP_HIDDEN,
            encoder_mode: EncoderMode::Full,
            variational: true,
            init_seed: 1,
            leaky_slope: crate::adapter::DEFAULT_LEAKY_SLOPE,
            learning_rate: 2e-4,
            iterations: 2000,
            batch_size: 16,
            train_seed: 0,
            checkpoint_every: 500,
            kl_warmup_iterations: 300,
            freeze_conv: false,
            loss_weights: LossWeights::default(),
            perceptual_seed: 5,
            identity_seed: 3,
            prior: PriorConfig::default(),
            guided_context: GuidedContextSource::TextPrior,
            truncation: None,
            eval_images_per_caption: 10,
            eval_negatives_per_query: 99,
            eval_ks: vec![1, 5, 10, 20],
            eval_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_flat(text)?;
        let mut cfg = PipelineConfig::default();
        for (key, value) in &map {
            cfg.apply_override(key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Set one key; flags funnel through here so they win over file values.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embedding.backend" => self.embedding_backend = parse_backend(value)?,
            "embedding.seed" => self.embedding_seed = parse_num(key, value)?,
            "embedding.dim" => self.embedding_dim = parse_num(key, value)?,
            "embedding.gap_scale" => self.gap_scale = parse_num(key, value)?,
            "embedding.leakage" => self.leakage = parse_num(key, value)?,
            "embedding.weights" => self.embedding_weights = Some(PathBuf::from(value)),
            "generator.backend" => self.generator_backend = parse_backend(value)?,
            "generator.seed" => self.generator_seed = parse_num(key, value)?,
            "generator.weights" => self.generator_weights = Some(PathBuf::from(value)),
            "adapter.latent_dim" => self.latent_dim = parse_num(key, value)?,
            "adapter.feature_dim" => self.feature_dim = parse_num(key, value)?,
            "adapter.mlp_hidden" => self.mlp_hidden = parse_num(key, value)?,
            "adapter.encoder_mode" => self.encoder_mode = EncoderMode::parse(value)?,
            "adapter.variational" => self.variational = parse_bool(key, value)?,
            "adapter.init_seed" => self.init_seed = parse_num(key, value)?,
            "adapter.leaky_slope" => self.leaky_slope = parse_num(key, value)?,
            "train.learning_rate" => self.learning_rate = parse_num(key, value)?,
            "train.iterations" => self.iterations = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.seed" => self.train_seed = parse_num(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "train.kl_warmup" => self.kl_warmup_iterations = parse_num(key, value)?,
            "train.freeze_conv" => self.freeze_conv = parse_bool(key, value)?,
            "train.weight.lpips" => self.loss_weights.perceptual = parse_num(key, value)?,
            "train.weight.clip_cycle" => self.loss_weights.clip_cycle = parse_num(key, value)?,
            "train.weight.w_norm" => self.loss_weights.w_norm = parse_num(key, value)?,
            "train.weight.kl" => self.loss_weights.kl = parse_num(key, value)?,
            "perceptual.seed" => self.perceptual_seed = parse_num(key, value)?,
            "identity.seed" => self.identity_seed = parse_num(key, value)?,
            "prior.k" => self.prior.k = parse_num(key, value)?,
            "prior.m" => self.prior.m = parse_num(key, value)?,
            "prior.alpha" => self.prior.alpha = parse_num(key, value)?,
            "prior.weighted_subset" => self.prior.weighted_subset = parse_bool(key, value)?,
            "infer.guided_context" => {
                self.guided_context = match value {
                    "text_prior" => GuidedContextSource::TextPrior,
                    "text_direct" => GuidedContextSource::TextDirect,
                    "guidance_image" => GuidedContextSource::GuidanceImage,
                    other => {
                        return Err(Error::config(format!(
                            "unknown infer.guided_context {other:?}"
                        )))
                    }
                }
            }
            "infer.truncation" => {
                self.truncation = if value == "none" { None } else { Some(parse_num(key, value)?) }
            }
            "eval.images_per_caption" => self.eval_images_per_caption = parse_num(key, value)?,
            "eval.negatives_per_query" => self.eval_negatives_per_query = parse_num(key, value)?,
            "eval.ks" => {
                let ks: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                self.eval_ks =
                    ks.map_err(|_| Error::config(format!("bad eval.ks list {value:?}")))?;
            }
            "eval.seed" => self.eval_seed = parse_num(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn DifferentiableImageEmbedder>> {
        match self.embedding_backend {
            BackendKind::Toy => {
                let world = Arc::new(ToyWorld::new(self.embedding_seed));
                Ok(Arc::new(ToyEmbedder::new(
                    world,
                    ToyEmbedderConfig {
                        dim: self.embedding_dim,
                        seed: self.embedding_seed,
                        gap_scale: self.gap_scale,
                        leakage: self.leakage,
                    },
                )))
            }
            BackendKind::External => {
                let path = self.embedding_weights.as_ref().ok_or_else(|| {
                    Error::config("embedding.backend = real requires embedding.weights = PATH")
                })?;
                Ok(Arc::new(FileEmbedder::load(path)?))
            }
        }
    }

    pub fn build_generator(&self) -> Result<Arc<AffineDecoderGenerator>> {
        match self.generator_backend {
            BackendKind::Toy => {
                let world = ToyWorld::new(self.embedding_seed);
                Ok(Arc::new(AffineDecoderGenerator::toy(&world, self.generator_seed)))
            }
            BackendKind::External => {
                let path = self.generator_weights.as_ref().ok_or_else(|| {
                    Error::config("generator.backend = external requires generator.weights = PATH")
                })?;
                Ok(Arc::new(AffineDecoderGenerator::load(path)?))
            }
        }
    }

    pub fn adapter_config(&self, embedder: &dyn EmbeddingBackend, generator: &AffineDecoderGenerator) -> AdapterConfig {
        use crate::generator::GeneratorBackend;
        AdapterConfig {
            latent_dim: self.latent_dim,
            feature_dim: self.feature_dim,
            context_dim: embedder.dim(),
            conv_channels: crate::adapter::DEFAULT_CONV_CHANNELS.to_vec(),
            mlp_hidden: self.mlp_hidden,
            mlp_layers: crate::adapter::DEFAULT_MLP_LAYERS,
            leaky_slope: self.leaky_slope,
            encoder_mode: self.encoder_mode,
            variational: self.variational,
            image_shape: embedder.image_shape(),
            generator_latent_len: generator.latent_len(),
            latent_space: generator.latent_space(),
            init_seed: self.init_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weights: self.loss_weights,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.train_seed,
            encoder_mode: self.encoder_mode,
            variational: self.variational,
            checkpoint_every: self.checkpoint_every,
            kl_warmup_iterations: self.kl_warmup_iterations,
            freeze_conv: self.freeze_conv,
        }
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            prior: self.prior,
            guided_context: self.guided_context,
            truncation: self.truncation,
        }
    }

    /// Canonical `key = value` rendering, parseable by [`Self::from_text`].
    pub fn to_text(&self) -> String {
        let backend = |b: &BackendKind| match b {
            BackendKind::Toy => "toy",
            BackendKind::External => "external",
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("embedding.backend", backend(&self.embedding_backend).into());
        kv("embedding.seed", self.embedding_seed.to_string());
        kv("embedding.dim", self.embedding_dim.to_string());
        kv("embedding.gap_scale", self.gap_scale.to_string());
        kv("embedding.leakage", self.leakage.to_string());
        if let Some(p) = &self.embedding_weights {
            kv("embedding.weights", p.display().to_string());
        }
        kv("generator.backend", backend(&self.generator_backend).into());
        kv("generator.seed", self.generator_seed.to_string());
        if let Some(p) = &self.generator_weights {
            kv("generator.weights", p.display().to_string());
        }
        kv("adapter.latent_dim", self.latent_dim.to_string());
        kv("adapter.feature_dim", self.feature_dim.to_string());
        kv("adapter.mlp_hidden", self.mlp_hidden.to_string());
        kv("adapter.encoder_mode", self.encoder_mode.as_str().into());
        kv("adapter.variational", self.variational.to_string());
        kv("adapter.init_seed", self.init_seed.to_string());
        kv("adapter.leaky_slope", self.leaky_slope.to_string());
        kv("train.learning_rate", self.learning_rate.to_string());
        kv("train.iterations", self.iterations.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.train_seed.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("train.kl_warmup", self.kl_warmup_iterations.to_string());
        kv("train.freeze_conv", self.freeze_conv.to_string());
        kv("train.weight.lpips", self.loss_weights.perceptual.to_string());
        kv("train.weight.clip_cycle", self.loss_weights.clip_cycle.to_string());
        kv("train.weight.w_norm", self.loss_weights.w_norm.to_string());
        kv("train.weight.kl", self.loss_weights.kl.to_string());
        kv("perceptual.seed", self.perceptual_seed.to_string());
        kv("identity.seed", self.identity_seed.to_string());
        kv("prior.k", self.prior.k.to_string());
        kv("prior.m", self.prior.m.to_string());
        kv("prior.alpha", self.prior.alpha.to_string());
        kv("prior.weighted_subset", self.prior.weighted_subset.to_string());
        kv(
            "infer.guided_context",
            match self.guided_context {
                GuidedContextSource::TextPrior => "text_prior".into(),
                GuidedContextSource::TextDirect => "text_direct".into(),
                GuidedContextSource::GuidanceImage => "guidance_image".into(),
            },
        );
        kv(
            "infer.truncation",
            self.truncation.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
        );
        kv("eval.images_per_caption", self.eval_images_per_caption.to_string());
        kv("eval.negatives_per_query", self.eval_negatives_per_query.to_string());
        kv(
            "eval.ks",
            self.eval_ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("eval.seed", self.eval_seed.to_string());
        out
    }
}

fn parse_backend(value: &str) -> Result<BackendKind> {
    match value {
        "toy" => Ok(BackendKind::Toy),
        "real" | "external" => Ok(BackendKind::External),
        other => Err(Error::config(format!("unknown backend {other:?} (expected toy|real|external)"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!("bad boolean {other:?} for key {key:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies_keys() {
        let text = "\
# comment
train.learning_rate = 1e-3
train.iterations = 42
adapter.encoder_mode = img_only
adapter.variational = false
prior.k = 9
prior.m = 4
eval.ks = 1, 5
";
        let cfg = PipelineConfig::from_text(text).unwrap();
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.iterations, 42);
        assert_eq!(cfg.encoder_mode, EncoderMode::ImgOnly);
        assert!(!cfg.variational);
        assert_eq!(cfg.prior.k, 9);
        assert_eq!(cfg.prior.m, 4);
        assert_eq!(cfg.eval_ks, vec![1, 5]);
    }

    #[test]
    fn rejects_unknown_and_malformed_input() {
        assert!(PipelineConfig::from_text("no_such.key = 1").is_err());
        assert!(PipelineConfig::from_text("train.iterations 42").is_err());
        assert!(PipelineConfig::from_text("train.iterations = x").is_err());
        assert!(PipelineConfig::from_text("a.b = 1\na.b = 2\n").is_err());
        assert!(PipelineConfig::from_text("adapter.variational = maybe").is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg = PipelineConfig::from_text("train.iterations = 10").unwrap();
        cfg.apply_override("train.iterations", "99").unwrap();
        assert_eq!(cfg.iterations, 99);
    }

    #[test]
    fn builds_toy_backends() {
        use crate::generator::GeneratorBackend;
        let cfg = PipelineConfig::default();
        let e = cfg.build_embedder().unwrap();
        let g = cfg.build_generator().unwrap();
        assert_eq!(e.dim(), 512);
        assert_eq!(g.latent_len(), 64);
        let acfg = cfg.adapter_config(e.as_ref(), g.as_ref());
        acfg.validate().unwrap();
        assert_eq!(acfg.latent_dim, 128);
    }

    #[test]
    fn external_backends_require_paths() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_override("generator.backend", "external").unwrap();
        assert!(cfg.build_generator().is_err());
        cfg.apply_override("embedding.backend", "real").unwrap();
        assert!(cfg.build_embedder().is_err());
    }
}
