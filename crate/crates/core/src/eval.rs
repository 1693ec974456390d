//! Quantitative evaluation: retrieval accuracy against sampled negatives,
//! identity diversity over generated batches, per-image timing, and
//! nearest-neighbor reports against a bank.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::EmbeddingBank;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::infer::{GenerationMode, InferenceEngine};
use crate::prior;
use crate::tensor::{cosine, Tensor};
use crate::toyworld::gaussian;

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub captions: Vec<String>,
    pub images_per_caption: usize,
    pub negatives_per_query: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            captions: Vec::new(),
            images_per_caption: 25,
            negatives_per_query: 99,
            ks: vec![1, 5, 10, 20],
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() {
            return Err(Error::input("evaluation needs at least one caption"));
        }
        if self.images_per_caption < 2 {
            return Err(Error::input("diversity metrics need at least 2 images per caption"));
        }
        let max_k = *self.ks.iter().max().unwrap_or(&0);
        if self.ks.is_empty() || max_k == 0 {
            return Err(Error::input("ks must contain positive cutoffs"));
        }
        if self.negatives_per_query < max_k - 1 {
            return Err(Error::input(format!(
                "negatives_per_query {} is too small for k up to {max_k}",
                self.negatives_per_query
            )));
        }
        Ok(())
    }
}

/// Frozen feature extractor standing in for a face-identity network.
pub trait IdentityBackend: Send + Sync {
    fn features(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// Seeded random projection of pixels to a 64-d identity feature.
pub struct ToyIdentity {
    proj: Vec<f64>,
    feat_dim: usize,
    image_shape: [usize; 3],
}

impl ToyIdentity {
    pub fn new(seed: u64, image_shape: [usize; 3]) -> Self {
        let feat_dim = 64;
        let pixels: usize = image_shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x7f4a_7c15).wrapping_add(23));
        let proj = (0..feat_dim * pixels).map(|_| gaussian(&mut rng)).collect();
        ToyIdentity { proj, feat_dim, image_shape }
    }
}

impl IdentityBackend for ToyIdentity {
    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.shape() != self.image_shape {
            return Err(Error::input(format!(
                "identity backend expects shape {:?}, got {:?}",
                self.image_shape,
                image.shape()
            )));
        }
        let pixels = image.len();
        let mut out = vec![0.0; self.feat_dim];
        for (f, o) in out.iter_mut().enumerate() {
            let row = &self.proj[f * pixels..(f + 1) * pixels];
            let mut acc = 0.0;
            for (p, r) in image.data().iter().zip(row) {
                acc += (p - 0.5) * r;
            }
            *o = acc;
        }
        Ok(out)
    }
}

/// Rank-based accuracy from embeddings. For each generated embedding, rank it
/// against `negatives_per_query` pool embeddings sampled without replacement
/// by cosine similarity to the text embedding; ties count against the
/// candidate. Returns the mean top-k hit rate for each cutoff in `ks`.
pub fn retrieval_accuracy_embeddings(
    generated: &[Embedding],
    text: &Embedding,
    pool: &[Embedding],
    negatives_per_query: usize,
    ks: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, f64)>> {
    if pool.len() < negatives_per_query {
        return Err(Error::input(format!(
            "negative pool has {} entries, need {negatives_per_query}",
            pool.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::input("no generated embeddings to evaluate"));
    }
    let mut hits = vec![0usize; ks.len()];
    for gen in generated {
        let sim_cand = text
            .cosine(gen)
            .ok_or_else(|| Error::numeric("zero-norm embedding in retrieval"))?;
        let negatives = rand::seq::index::sample(rng, pool.len(), negatives_per_query);
        let mut worse_or_equal = 0usize;
        for ni in negatives {
            let sim_neg = text
                .cosine(&pool[ni])
                .ok_or_else(|| Error::numeric("zero-norm negative embedding"))?;
            if sim_neg >= sim_cand {
                worse_or_equal += 1;
            }
        }
        let rank = 1 + worse_or_equal;
        for (slot, &k) in ks.iter().enumerate() {
            if rank <= k {
                hits[slot] += 1;
            }
        }
    }
    let n = generated.len() as f64;
    let accs: Vec<(usize, f64)> = ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect();
    // top-k hit rates are non-decreasing in k by construction
    for w in accs.windows(2) {
        debug_assert!(w[1].1 >= w[0].1 - 1e-12);
    }
    Ok(accs)
}

/// Mean over all unordered image pairs of one minus the cosine similarity of
/// their identity features. Bounded in [0, 2]; needs at least two images.
pub fn id_diversity(images: &[Tensor], identity: &dyn IdentityBackend) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::input("identity diversity needs at least 2 images"));
    }
    let feats: Result<Vec<Vec<f64>>> = images.iter().map(|i| identity.features(i)).collect();
    let feats = feats?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..feats.len() {
        for j in (i + 1)..feats.len() {
            total += 1.0 - cosine(&feats[i], &feats[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub mode: GenerationMode,
    pub images: usize,
    pub seconds_per_image: f64,
}

/// Wall-clock seconds per generated image, excluding engine setup, over at
/// least 20 images.
pub fn timing_report(
    engine: &InferenceEngine,
    mode: GenerationMode,
    prompt: &str,
    guidance: Option<&Tensor>,
    n: usize,
    seed: u64,
) -> Result<TimingReport> {
    let n = n.max(20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // warm-up pass so first-call effects stay out of the measurement
    engine.generate(mode, prompt, guidance, 1, &mut rng)?;
    let started = Instant::now();
    engine.generate(mode, prompt, guidance, n, &mut rng)?;
    let elapsed = started.elapsed().as_secs_f64();
    Ok(TimingReport { mode, images: n, seconds_per_image: elapsed / n as f64 })
}

#[derive(Debug, Clone)]
pub struct NnReportRow {
    pub image_index: usize,
    pub neighbors: Vec<prior::Neighbor>,
}

#[derive(Debug, Clone)]
pub struct NnReport {
    pub rows: Vec<NnReportRow>,
}

impl NnReport {
    pub fn to_table_string(&self) -> String {
        let mut out = String::from("image  rank  id                sim\n");
        for row in &self.rows {
            for (rank, n) in row.neighbors.iter().enumerate() {
                out.push_str(&format!(
                    "{:>5}  {:>4}  {:<16}  {:+.6}\n",
                    row.image_index,
                    rank + 1,
                    n.id,
                    n.similarity
                ));
            }
        }
        out
    }
}

/// Nearest bank neighbors for each generated image, ranked descending.
pub fn nn_report(
    images: &[Tensor],
    bank: &EmbeddingBank,
    embedder: &dyn crate::embedding::EmbeddingBackend,
    top: usize,
) -> Result<NnReport> {
    let rows: Result<Vec<NnReportRow>> = images
        .iter()
        .enumerate()
        .map(|(image_index, img)| {
            let emb = embedder.embed_image(img)?;
            Ok(NnReportRow { image_index, neighbors: prior::top_k(bank, &emb, top)? })
        })
        .collect();
    Ok(NnReport { rows: rows? })
}

/// Aggregated metrics for one model/mode under a protocol.
#[derive(Debug, Clone)]
pub struct ModelEval {
    pub accuracy: Vec<(usize, f64)>,
    pub id_diversity: f64,
    pub seconds_per_image: f64,
}

/// Run the full protocol for one mode: per caption, generate a batch, score
/// retrieval against sampled negatives, and average identity diversity.
pub fn run_protocol(
    engine: &InferenceEngine,
    mode: GenerationMode,
    protocol: &EvalProtocol,
    negative_pool: &[Embedding],
    identity: &dyn IdentityBackend,
    guidance: Option<&Tensor>,
) -> Result<ModelEval> {
    protocol.validate()?;
    let ks = &protocol.ks;
    let mut acc_sums = vec![0.0f64; ks.len()];
    let mut div_sum = 0.0f64;

    for (ci, caption) in protocol.captions.iter().enumerate() {
        let mut gen_rng = ChaCha8Rng::seed_from_u64(
            protocol.seed ^ (ci as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let images = engine.generate(mode, caption, guidance, protocol.images_per_caption, &mut gen_rng)?;
        let embeddings: Result<Vec<Embedding>> =
            images.iter().map(|i| engine.embedder().embed_image(i)).collect();
        let embeddings = embeddings?;
        let text = engine.embedder().embed_text(caption)?;

        let mut neg_rng = ChaCha8Rng::seed_from_u64(
            protocol.seed ^ 0x5bf0_3635 ^ (ci as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
        );
        let accs = retrieval_accuracy_embeddings(
            &embeddings,
            &text,
            negative_pool,
            protocol.negatives_per_query,
            ks,
            &mut neg_rng,
        )?;
        for (slot, (_, a)) in accs.iter().enumerate() {
            acc_sums[slot] += a;
        }
        div_sum += id_diversity(&images, identity)?;
    }

    let nc = protocol.captions.len() as f64;
    let timing = timing_report(engine, mode, &protocol.captions[0], guidance, 20, protocol.seed)?;
    let accuracy: Vec<(usize, f64)> = ks.iter().zip(acc_sums).map(|(&k, s)| (k, s / nc)).collect();
    for w in accuracy.windows(2) {
        assert!(w[1].1 >= w[0].1 - 1e-12, "top-k accuracy must be non-decreasing in k");
    }
    Ok(ModelEval {
        accuracy,
        id_diversity: div_sum / nc,
        seconds_per_image: timing.seconds_per_image,
    })
}

/// Multi-model comparison, renderable as a text table and CSV files.
#[derive(Debug, Clone, Default)]
pub struct ComparisonReport {
    pub rows: Vec<(String, ModelEval)>,
}

impl ComparisonReport {
    pub fn push(&mut self, model: impl Into<String>, eval: ModelEval) {
        self.rows.push((model.into(), eval));
    }

    pub fn to_table_string(&self) -> String {
        let ks: Vec<usize> = self
            .rows
            .first()
            .map(|(_, e)| e.accuracy.iter().map(|(k, _)| *k).collect())
            .unwrap_or_default();
        let mut out = String::from("model");
        for k in &ks {
            out.push_str(&format!("  top-{k}"));
        }
        out.push_str("  id-div  s/img\n");
        for (name, eval) in &self.rows {
            out.push_str(name);
            for (_, a) in &eval.accuracy {
                out.push_str(&format!("  {a:.3}"));
            }
            out.push_str(&format!("  {:.3}  {:.4}\n", eval.id_diversity, eval.seconds_per_image));
        }
        out
    }

    /// Rows of `model,k,accuracy`.
    pub fn retrieval_csv(&self) -> String {
        let mut out = String::from("model,k,accuracy\n");
        for (name, eval) in &self.rows {
            for (k, a) in &eval.accuracy {
                out.push_str(&format!("{name},{k},{a:.6}\n"));
            }
        }
        out
    }

    /// Rows of `model,id_div,sec_per_image`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,id_div,sec_per_image\n");
        for (name, eval) in &self.rows {
            out.push_str(&format!("{name},{:.6},{:.6}\n", eval.id_diversity, eval.seconds_per_image));
        }
        out
    }
}

/// Parse a caption file: UTF-8, one prompt per line, `#` comments and blank
/// lines ignored.
pub fn parse_caption_file(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// The 40-caption toy descriptor set used for desk-scale evaluation: every
/// caption pins two or three attributes at full strength.
pub fn toy_captions() -> Vec<String> {
    let mut captions = Vec::with_capacity(40);
    let mut rng = ChaCha8Rng::seed_from_u64(0x70c5);
    while captions.len() < 40 {
        let n_attrs = 2 + (captions.len() % 2);
        let dims = rand::seq::index::sample(&mut rng, crate::toyworld::ATTR_DIM, n_attrs);
        let parts: Vec<String> = dims
            .iter()
            .map(|d| {
                let sign = if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { -1.0 };
                format!("a{d}={sign}")
            })
            .collect();
        let caption = format!("toy:{}", parts.join(","));
        if !captions.contains(&caption) {
            captions.push(caption);
        }
    }
    captions
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, hot: usize) -> Embedding {
        let mut v = vec![0.0f32; dim];
        v[hot] = 1.0;
        Embedding::unit(v).unwrap()
    }

    #[test]
    fn engineered_perfect_retrieval() {
        // generated embedding equals the prompt embedding; negatives orthogonal
        let text = unit(8, 0);
        let generated = vec![text.clone(), text.clone()];
        let pool: Vec<Embedding> = (1..6).map(|i| unit(8, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let accs =
            retrieval_accuracy_embeddings(&generated, &text, &pool, 4, &[1, 2], &mut rng).unwrap();
        assert_eq!(accs, vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn engineered_total_miss() {
        // generated orthogonal to the prompt; one negative parallel to it
        let text = unit(8, 0);
        let generated = vec![unit(8, 1)];
        let pool = vec![text.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let accs = retrieval_accuracy_embeddings(&generated, &text, &pool, 1, &[1], &mut rng).unwrap();
        assert_eq!(accs, vec![(1, 0.0)]);
    }

    #[test]
    fn ties_count_against_the_candidate() {
        let text = unit(8, 0);
        let generated = vec![text.clone()];
        let pool = vec![text.clone()]; // the one negative ties exactly
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let accs = retrieval_accuracy_embeddings(&generated, &text, &pool, 1, &[1, 2], &mut rng).unwrap();
        assert_eq!(accs, vec![(1, 0.0), (2, 1.0)]);
    }

    #[test]
    fn small_pool_is_rejected() {
        let text = unit(4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(retrieval_accuracy_embeddings(
            &[text.clone()],
            &text,
            &[text.clone()],
            5,
            &[1],
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn retrieval_is_invariant_to_positive_rescaling() {
        let text = unit(8, 0);
        let mut base = vec![0.4f32; 8];
        base[0] = 0.9;
        let gen_raw = Embedding::raw(base.clone());
        let gen_scaled = Embedding::raw(base.iter().map(|v| v * 37.5).collect());
        let pool: Vec<Embedding> = (1..8).map(|i| unit(8, i)).collect();
        let mut rng1 = ChaCha8Rng::seed_from_u64(2);
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let a = retrieval_accuracy_embeddings(&[gen_raw], &text, &pool, 6, &[1, 3], &mut rng1).unwrap();
        let b = retrieval_accuracy_embeddings(&[gen_scaled], &text, &pool, 6, &[1, 3], &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diversity_bounds_and_identities() {
        let identity = ToyIdentity::new(3, [3, 32, 32]);
        let world = crate::toyworld::ToyWorld::new(11);
        let imgs: Vec<Tensor> = world.sample_many(6, 5).into_iter().map(|s| s.image).collect();

        // all images identical
        let same = vec![imgs[0].clone(), imgs[0].clone(), imgs[0].clone()];
        assert!(id_diversity(&same, &identity).unwrap().abs() < 1e-12);

        // bounded and symmetric under reordering
        let d1 = id_diversity(&imgs, &identity).unwrap();
        assert!((0.0..=2.0).contains(&d1));
        let mut rev = imgs.clone();
        rev.reverse();
        let d2 = id_diversity(&rev, &identity).unwrap();
        assert!((d1 - d2).abs() < 1e-12);

        assert!(id_diversity(&imgs[..1], &identity).is_err());
    }

    #[test]
    fn antiparallel_features_give_two() {
        struct Flip;
        impl IdentityBackend for Flip {
            fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
                // first pixel decides the sign of a fixed feature
                let s = if image.data()[0] > 0.5 { 1.0 } else { -1.0 };
                Ok(vec![s, 2.0 * s])
            }
        }
        let a = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]);
        let b = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]);
        let d = id_diversity(&[a, b], &Flip).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn caption_file_parsing_skips_comments() {
        let text = "# header\n\ntoy:a0=1\n  toy:a1=-1  \n# tail\n";
        assert_eq!(parse_caption_file(text), vec!["toy:a0=1", "toy:a1=-1"]);
    }

    #[test]
    fn toy_caption_set_is_forty_distinct_valid_prompts() {
        let caps = toy_captions();
        assert_eq!(caps.len(), 40);
        let set: std::collections::HashSet<&String> = caps.iter().collect();
        assert_eq!(set.len(), 40);
        for c in &caps {
            crate::embedding::ToyDescriptor::parse(c).unwrap();
        }
        assert_eq!(caps, toy_captions(), "caption set must be deterministic");
    }
}
