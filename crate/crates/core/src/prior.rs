//! Non-parametric text-to-image-embedding prior: exact top-K cosine
//! retrieval from a bank, a random M-subset of the neighbors, and a
//! Dirichlet-weighted convex combination.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::bank::EmbeddingBank;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::tensor::f32v;

#[derive(Debug, Clone, Copy)]
pub struct PriorConfig {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Subset size combined per sample; at most k (typically well below it).
    pub m: usize,
    /// Symmetric Dirichlet concentration.
    pub alpha: f64,
    /// Sample the subset proportionally to similarity instead of uniformly.
    pub weighted_subset: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { k: 50, m: 8, alpha: 1.0, weighted_subset: false }
    }
}

impl PriorConfig {
    pub fn validate(&self, bank_len: usize) -> Result<()> {
        if self.m < 1 || self.m > self.k {
            return Err(Error::input(format!(
                "prior requires 1 <= m <= k, got m={} k={}",
                self.m, self.k
            )));
        }
        if self.k > bank_len {
            return Err(Error::input(format!(
                "prior k={} exceeds bank size {bank_len}",
                self.k
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::input(format!("dirichlet alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub id: String,
    pub similarity: f32,
}

/// Exact top-K by cosine similarity, descending; ties break toward the lower
/// bank index. The query need not be normalized (retrieval is scale
/// invariant); it must be nonzero.
pub fn top_k(bank: &EmbeddingBank, query: &Embedding, k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::input("top_k with k = 0"));
    }
    if k > bank.len() {
        return Err(Error::input(format!("k={k} exceeds bank size {}", bank.len())));
    }
    if query.dim() != bank.dim() {
        return Err(Error::input(format!(
            "query dimension {} does not match bank dimension {}",
            query.dim(),
            bank.dim()
        )));
    }
    let q = f32v::normalized(query.values())
        .ok_or_else(|| Error::numeric("zero-norm query embedding"))?;
    // bank rows are unit, so cosine is a dot product
    let mut sims: Vec<(usize, f32)> = (0..bank.len())
        .map(|i| (i, f32v::dot(bank.row(i), &q)))
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(sims
        .into_iter()
        .take(k)
        .map(|(index, similarity)| Neighbor {
            index,
            id: bank.id(index).to_string(),
            similarity,
        })
        .collect())
}

/// A sampled context with its provenance.
#[derive(Debug, Clone)]
pub struct SampledContext {
    /// The convex combination; deliberately not re-normalized.
    pub embedding: Embedding,
    /// The M chosen neighbors, in the order the weights apply.
    pub neighbors: Vec<Neighbor>,
    /// Dirichlet weights; nonnegative, summing to 1.
    pub weights: Vec<f64>,
}

/// Draw a context embedding for a text query: top-K retrieve, pick a random
/// M-subset, combine with Dirichlet weights.
pub fn sample_context(
    bank: &EmbeddingBank,
    text_embedding: &Embedding,
    config: &PriorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampledContext> {
    config.validate(bank.len())?;
    let neighbors = top_k(bank, text_embedding, config.k)?;
    let chosen = if config.weighted_subset {
        weighted_subset(&neighbors, config.m, rng)
    } else {
        uniform_subset(neighbors.len(), config.m, rng)
    };
    let chosen: Vec<Neighbor> = chosen.into_iter().map(|i| neighbors[i].clone()).collect();
    let weights = dirichlet_weights(config.alpha, config.m, rng);
    Ok(combine(bank, chosen, weights))
}

/// Weighted convex combination of bank rows (exposed for forced-weight tests).
pub fn combine(bank: &EmbeddingBank, neighbors: Vec<Neighbor>, weights: Vec<f64>) -> SampledContext {
    assert_eq!(neighbors.len(), weights.len());
    let mut acc = vec![0.0f64; bank.dim()];
    for (n, w) in neighbors.iter().zip(&weights) {
        for (a, v) in acc.iter_mut().zip(bank.row(n.index)) {
            *a += w * *v as f64;
        }
    }
    SampledContext {
        embedding: Embedding::raw(acc.iter().map(|&v| v as f32).collect()),
        neighbors,
        weights,
    }
}

/// Symmetric Dirichlet(alpha) over `m` components via normalized Gamma draws,
/// falling back to a one-hot sample if the draw degenerates at tiny alpha.
pub fn dirichlet_weights(alpha: f64, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum < 1e-300 || !sum.is_finite() {
        let hot = rng.gen_range(0..m);
        let mut w = vec![0.0; m];
        w[hot] = 1.0;
        return w;
    }
    draws.into_iter().map(|d| d / sum).collect()
}

fn uniform_subset(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, n, m).into_vec()
}

/// Sequential without-replacement sampling with probability proportional to
/// the (shifted-positive) similarity.
fn weighted_subset(neighbors: &[Neighbor], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..neighbors.len()).collect();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let weights: Vec<f64> = remaining
            .iter()
            .map(|&i| (neighbors[i].similarity as f64 + 1.0).max(1e-9))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut t = rng.gen_range(0.0..total);
        let mut pick = remaining.len() - 1;
        for (slot, w) in weights.iter().enumerate() {
            if t < *w {
                pick = slot;
                break;
            }
            t -= w;
        }
        out.push(remaining.remove(pick));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_bank(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingBank {
        let entries: Vec<(String, Embedding)> = (0..n)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                (format!("e{i:05}"), Embedding::unit(v).unwrap())
            })
            .collect();
        EmbeddingBank::from_entries(entries, "test").unwrap()
    }

    /// Brute-force oracle: full sort of all similarities.
    fn brute_force_ranking(bank: &EmbeddingBank, query: &Embedding) -> Vec<(usize, f32)> {
        let q = f32v::normalized(query.values()).unwrap();
        let mut all: Vec<(usize, f32)> = (0..bank.len())
            .map(|i| (i, f32v::dot(bank.row(i), &q)))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all
    }

    #[test]
    fn query_in_bank_ranks_first_with_unit_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = random_bank(&mut rng, 100, 32);
        let q = Embedding::unit(bank.row(37).to_vec()).unwrap();
        let top = top_k(&bank, &q, 3).unwrap();
        assert_eq!(top[0].index, 37);
        assert!((top[0].similarity - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn k_equal_bank_size_is_a_full_descending_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = random_bank(&mut rng, 64, 16);
        let q = Embedding::unit((0..16).map(|i| i as f32 - 7.5).collect()).unwrap();
        let top = top_k(&bank, &q, bank.len()).unwrap();
        assert_eq!(top.len(), bank.len());
        for w in top.windows(2) {
            assert!(w[0].similarity >= w[1].similarity);
        }
        let oracle = brute_force_ranking(&bank, &q);
        for (n, (oi, os)) in top.iter().zip(oracle) {
            assert_eq!(n.index, oi);
            assert_eq!(n.similarity, os);
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_random_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let bank = random_bank(&mut rng, 1000, 64);
            let q = Embedding::unit((0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
            let top = top_k(&bank, &q, 50).unwrap();
            let oracle = brute_force_ranking(&bank, &q);
            for (i, n) in top.iter().enumerate() {
                assert_eq!(n.index, oracle[i].0, "trial {trial} rank {i}");
                assert_eq!(n.id, format!("e{:05}", oracle[i].0));
            }
        }
    }

    #[test]
    fn k_larger_than_bank_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = random_bank(&mut rng, 10, 8);
        assert!(top_k(&bank, &Embedding::unit(vec![1.0; 8]).unwrap(), 11).is_err());
        assert!(PriorConfig { k: 11, m: 2, ..Default::default() }.validate(10).is_err());
        assert!(PriorConfig { k: 5, m: 6, ..Default::default() }.validate(10).is_err());
        assert!(PriorConfig { k: 1, m: 1, ..Default::default() }.validate(10).is_ok());
        assert!(PriorConfig { k: 5, m: 2, alpha: 0.0, ..Default::default() }.validate(10).is_err());
    }

    #[test]
    fn retrieval_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = random_bank(&mut rng, 300, 24);
        for _ in 0..20 {
            let v: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let scale: f32 = rng.gen_range(0.01f32..100.0);
            let a = top_k(&bank, &Embedding::raw(v.clone()), 10).unwrap();
            let b = top_k(
                &bank,
                &Embedding::raw(v.iter().map(|x| x * scale).collect()),
                10,
            )
            .unwrap();
            let ids_a: Vec<&str> = a.iter().map(|n| n.id.as_str()).collect();
            let ids_b: Vec<&str> = b.iter().map(|n| n.id.as_str()).collect();
            assert_eq!(ids_a, ids_b);
        }
    }

    #[test]
    fn m_one_returns_a_bank_row_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = random_bank(&mut rng, 50, 16);
        let q = Embedding::unit(vec![0.5; 16]).unwrap();
        let cfg = PriorConfig { k: 5, m: 1, ..Default::default() };
        for _ in 0..10 {
            let s = sample_context(&bank, &q, &cfg, &mut rng).unwrap();
            assert_eq!(s.weights, vec![1.0]);
            let row = bank.row(s.neighbors[0].index);
            assert_eq!(s.embedding.values(), row, "degenerate combination must be exact");
        }
    }

    #[test]
    fn forced_half_weights_give_exact_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = random_bank(&mut rng, 10, 8);
        let neighbors = top_k(&bank, &Embedding::unit(vec![1.0; 8]).unwrap(), 2).unwrap();
        let s = combine(&bank, neighbors.clone(), vec![0.5, 0.5]);
        for (i, v) in s.embedding.values().iter().enumerate() {
            let expect =
                0.5 * bank.row(neighbors[0].index)[i] as f64 + 0.5 * bank.row(neighbors[1].index)[i] as f64;
            assert!((*v as f64 - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn weights_are_a_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &alpha in &[0.05, 0.5, 1.0, 4.0] {
            for _ in 0..200 {
                let w = dirichlet_weights(alpha, 8, &mut rng);
                assert!(w.iter().all(|&x| x >= 0.0));
                let sum: f64 = w.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9, "alpha {alpha}: sum {sum}");
            }
        }
    }

    #[test]
    fn distinct_rng_streams_give_distinct_draws() {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(9);
        let bank = random_bank(&mut seed_rng, 200, 32);
        let q = Embedding::unit(vec![0.3; 32]).unwrap();
        let cfg = PriorConfig { k: 20, m: 4, ..Default::default() };
        let draws: Vec<Vec<f32>> = (0..100)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
                sample_context(&bank, &q, &cfg, &mut rng)
                    .unwrap()
                    .embedding
                    .values()
                    .to_vec()
            })
            .collect();
        for i in 0..draws.len() {
            for j in (i + 1)..draws.len() {
                assert_ne!(draws[i], draws[j], "draws {i} and {j} collided");
            }
        }
    }

    #[test]
    fn weighted_subset_option_runs_and_respects_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bank = random_bank(&mut rng, 100, 16);
        let q = Embedding::unit(vec![0.1; 16]).unwrap();
        let cfg = PriorConfig { k: 10, m: 3, weighted_subset: true, ..Default::default() };
        let s = sample_context(&bank, &q, &cfg, &mut rng).unwrap();
        assert_eq!(s.neighbors.len(), 3);
        let mut idx: Vec<usize> = s.neighbors.iter().map(|n| n.index).collect();
        idx.dedup();
        assert_eq!(idx.len(), 3, "subset must sample without replacement");
    }

    use rand::Rng;
}
