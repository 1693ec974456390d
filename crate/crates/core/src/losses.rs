//! Training losses: perceptual reconstruction, embedding-cycle consistency,
//! offset norm penalty, and the KL term of the variational bound.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::embedding::DifferentiableImageEmbedder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toyworld::gaussian;

/// Perceptual distance between two images; zero iff the images agree under
/// the metric's features.
pub trait PerceptualMetric: Send + Sync {
    fn loss(&self, a: &Tensor, b: &Tensor) -> Result<f64>;

    /// Fixed (non-differentiated) feature stack of an image, usable as the
    /// reference side of the graph loss.
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>>;

    /// Graph loss of `image` against precomputed reference features.
    fn loss_node_vs_features(&self, tape: &mut Tape, reference: &[Tensor], image: NodeId) -> NodeId;
}

/// LPIPS-shaped surrogate: a frozen random conv layer per scale, channel-unit
/// feature normalization at every spatial position, squared differences
/// averaged per scale and summed across a 3-level pyramid.
pub struct RandomFeaturePyramid {
    weights: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    channels: usize,
    eps: f64,
}

pub const PYRAMID_SCALES: usize = 3;
pub const PYRAMID_CHANNELS: usize = 12;

impl RandomFeaturePyramid {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let channels = PYRAMID_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x94d0_49bb).wrapping_add(13));
        let std = (2.0 / (in_channels as f64 * 9.0)).sqrt();
        let weights = (0..PYRAMID_SCALES)
            .map(|_| {
                let n = channels * in_channels * 9;
                let w: Vec<f64> = (0..n).map(|_| gaussian(&mut rng) * std).collect();
                (
                    Arc::new(Tensor::new(vec![channels, in_channels, 3, 3], w)),
                    Arc::new(Tensor::zeros(vec![channels])),
                )
            })
            .collect();
        RandomFeaturePyramid { weights, channels, eps: 1e-8 }
    }

    fn feature_node(&self, tape: &mut Tape, image: NodeId, scale: usize) -> NodeId {
        let (w, b) = &self.weights[scale];
        let wn = tape.frozen(w);
        let bn = tape.frozen(b);
        let f = tape.conv2d(wn, bn, image, 1, 1);
        tape.channel_normalize(f, self.eps)
    }

    /// Graph loss between two in-graph images.
    pub fn loss_node(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
        // center at mid-range so the normalized features track the direction
        // of the image content rather than the shared gray level
        let mut xa = tape.add_scalar(a, -0.5);
        let mut xb = tape.add_scalar(b, -0.5);
        let mut total = None;
        for scale in 0..PYRAMID_SCALES {
            if scale > 0 {
                xa = tape.avg_pool2(xa);
                xb = tape.avg_pool2(xb);
            }
            let fa = self.feature_node(tape, xa, scale);
            let fb = self.feature_node(tape, xb, scale);
            let d = tape.sub(fa, fb);
            let sq = tape.mul(d, d);
            let shape = tape.value(sq).shape().to_vec();
            let s = tape.sum(sq);
            // per-position channel sums, averaged over positions
            let m = tape.scale(s, 1.0 / (shape[1] * shape[2]) as f64);
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m),
            });
        }
        total.expect("at least one scale")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl PerceptualMetric for RandomFeaturePyramid {
    fn loss(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::input(format!(
                "perceptual loss: shape {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut tape = Tape::new();
        let an = tape.constant(a.clone());
        let bn = tape.constant(b.clone());
        let l = self.loss_node(&mut tape, an, bn);
        Ok(tape.value(l).item())
    }

    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let raw = tape.constant(image.clone());
        let mut x = tape.add_scalar(raw, -0.5);
        let mut out = Vec::with_capacity(PYRAMID_SCALES);
        for scale in 0..PYRAMID_SCALES {
            if scale > 0 {
                x = tape.avg_pool2(x);
            }
            let f = self.feature_node(&mut tape, x, scale);
            out.push(tape.value(f).clone());
        }
        Ok(out)
    }

    fn loss_node_vs_features(&self, tape: &mut Tape, reference: &[Tensor], image: NodeId) -> NodeId {
        assert_eq!(reference.len(), PYRAMID_SCALES);
        let mut total = None;
        let mut x = tape.add_scalar(image, -0.5);
        for (scale, rf) in reference.iter().enumerate() {
            if scale > 0 {
                x = tape.avg_pool2(x);
            }
            let f = self.feature_node(tape, x, scale);
            let r = tape.constant(rf.clone());
            let d = tape.sub(f, r);
            let sq = tape.mul(d, d);
            let shape = tape.value(sq).shape().to_vec();
            let s = tape.sum(sq);
            let m = tape.scale(s, 1.0 / (shape[1] * shape[2]) as f64);
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m),
            });
        }
        total.expect("at least one scale")
    }
}

/// `1 - cos(C_I(a), C_I(b))` for a frozen image embedder.
pub fn clip_cycle_loss(
    embedder: &dyn crate::embedding::EmbeddingBackend,
    a: &Tensor,
    b: &Tensor,
) -> Result<f64> {
    let ea = embedder.embed_image(a)?;
    let eb = embedder.embed_image(b)?;
    let cos = ea
        .cosine(&eb)
        .ok_or_else(|| Error::numeric("zero-norm embedding in cycle loss"))?;
    Ok(1.0 - cos as f64)
}

/// Graph cycle loss of an in-graph image against a precomputed unit
/// reference embedding.
pub fn clip_cycle_node(
    tape: &mut Tape,
    embedder: &dyn DifferentiableImageEmbedder,
    reference_unit: &[f64],
    image: NodeId,
) -> NodeId {
    let e = embedder.embed_image_node(tape, image);
    let r = tape.constant(Tensor::vector(reference_unit.to_vec()));
    let cos = tape.dot(e, r);
    let neg = tape.scale(cos, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// Squared L2 norm of the latent offset.
pub fn w_norm_loss(offset: &[f64]) -> f64 {
    offset.iter().map(|v| v * v).sum()
}

pub fn w_norm_node(tape: &mut Tape, offset: NodeId) -> NodeId {
    let sq = tape.mul(offset, offset);
    tape.sum(sq)
}

/// Closed-form KL divergence of N(mu, diag(exp(logvar))) from N(0, I):
/// `0.5 * sum(mu^2 + exp(logvar) - logvar - 1)`.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), logvar.len());
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

pub fn kl_node(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> NodeId {
    let musq = tape.mul(mu, mu);
    let ev = tape.exp(logvar);
    let s = tape.add(musq, ev);
    let s = tape.sub(s, logvar);
    let s = tape.add_scalar(s, -1.0);
    let total = tape.sum(s);
    tape.scale(total, 0.5)
}

/// Weighted combination of the four loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub clip_cycle: f64,
    pub w_norm: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { perceptual: 1.0, clip_cycle: 1.0, w_norm: 2e-4, kl: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("perceptual", self.perceptual),
            ("clip_cycle", self.clip_cycle),
            ("w_norm", self.w_norm),
            ("kl", self.kl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub perceptual: f64,
    pub clip_cycle: f64,
    pub w_norm: f64,
    pub kl: f64,
}

impl LossComponents {
    pub fn zero() -> Self {
        LossComponents { perceptual: 0.0, clip_cycle: 0.0, w_norm: 0.0, kl: 0.0 }
    }
}

/// Exact weighted sum; errors name the first non-finite component.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("perceptual", components.perceptual),
        ("clip_cycle", components.clip_cycle),
        ("w_norm", components.w_norm),
        ("kl", components.kl),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss component {name} is non-finite ({v})")));
        }
    }
    Ok(weights.perceptual * components.perceptual
        + weights.clip_cycle * components.clip_cycle
        + weights.w_norm * components.w_norm
        + weights.kl * components.kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{ToyEmbedder, ToyEmbedderConfig};
    use crate::toyworld::ToyWorld;
    use rand::Rng;

    fn toy_image(seed: u64) -> Tensor {
        let world = ToyWorld::new(11);
        world.sample_many(1, seed).remove(0).image
    }

    #[test]
    fn perceptual_zero_on_identical_and_symmetric() {
        let p = RandomFeaturePyramid::new(5, 3);
        let a = toy_image(1);
        let b = toy_image(2);
        assert_eq!(p.loss(&a, &a).unwrap(), 0.0);
        let ab = p.loss(&a, &b).unwrap();
        let ba = p.loss(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "not symmetric: {ab} vs {ba}");
        assert!(ab > 0.0);
        assert!(p.loss(&a, &Tensor::zeros(vec![3, 16, 16])).is_err());
    }

    #[test]
    fn perceptual_increases_with_noise_amplitude() {
        let p = RandomFeaturePyramid::new(5, 3);
        let x = toy_image(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = 0.0;
        for amp in [0.01, 0.05, 0.1] {
            let noisy = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect(),
            );
            let l = p.loss(&x, &noisy).unwrap();
            assert!(l > prev, "loss {l} did not increase past {prev} at amplitude {amp}");
            prev = l;
        }
    }

    #[test]
    fn perceptual_cached_features_agree_with_direct_loss() {
        let p = RandomFeaturePyramid::new(5, 3);
        let a = toy_image(4);
        let b = toy_image(5);
        let direct = p.loss(&a, &b).unwrap();
        let feats = p.features(&a).unwrap();
        let mut tape = Tape::new();
        let bn = tape.constant(b.clone());
        let l = p.loss_node_vs_features(&mut tape, &feats, bn);
        assert!((tape.value(l).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_identities() {
        let e = ToyEmbedder::with_defaults(11);
        let img = toy_image(6);
        assert!(clip_cycle_loss(&e, &img, &img).unwrap().abs() < 1e-6);
    }

    #[test]
    fn cycle_loss_orthogonal_attributes_give_unit_loss() {
        // gap and leakage off; orthogonal attribute vectors embed to
        // orthogonal unit vectors, so 1 - cos = 1.
        let world = std::sync::Arc::new(ToyWorld::new(11));
        let e = ToyEmbedder::new(
            world.clone(),
            ToyEmbedderConfig { dim: 512, seed: 11, gap_scale: 0.0, leakage: 0.0 },
        );
        let mut a1 = vec![0.0; 8];
        a1[0] = 1.0;
        let mut a2 = vec![0.0; 8];
        a2[3] = 1.0;
        let i1 = world.render(&a1, &[0.0; 4]).unwrap();
        let i2 = world.render(&a2, &[0.0; 4]).unwrap();
        let l = clip_cycle_loss(&e, &i1, &i2).unwrap();
        assert!((l - 1.0).abs() <= 1e-6, "loss {l}");
    }

    #[test]
    fn cycle_loss_antiparallel_embeddings_give_two() {
        let world = std::sync::Arc::new(ToyWorld::new(11));
        let e = ToyEmbedder::new(
            world.clone(),
            ToyEmbedderConfig { dim: 512, seed: 11, gap_scale: 0.0, leakage: 0.0 },
        );
        let mut a = vec![0.0; 8];
        a[2] = 1.0;
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let i1 = world.render(&a, &[0.0; 4]).unwrap();
        let i2 = world.render(&neg, &[0.0; 4]).unwrap();
        let l = clip_cycle_loss(&e, &i1, &i2).unwrap();
        assert!((l - 2.0).abs() <= 1e-6, "loss {l}");
    }

    #[test]
    fn cycle_node_matches_plain_loss() {
        let e = ToyEmbedder::with_defaults(11);
        let a = toy_image(7);
        let b = toy_image(8);
        let plain = clip_cycle_loss(&e, &a, &b).unwrap();
        let ref_emb: Vec<f64> = {
            let mut tape = Tape::new();
            let an = tape.constant(a.clone());
            let node = e.embed_image_node(&mut tape, an);
            tape.value(node).data().to_vec()
        };
        let mut tape = Tape::new();
        let bn = tape.constant(b.clone());
        let l = clip_cycle_node(&mut tape, &e, &ref_emb, bn);
        // plain path rounds embeddings to f32, graph path stays f64
        assert!((tape.value(l).item() - plain).abs() < 1e-5);
    }

    #[test]
    fn w_norm_cases() {
        assert_eq!(w_norm_loss(&[0.0; 10]), 0.0);
        let mut e3 = vec![0.0; 10];
        e3[3] = 1.0;
        assert_eq!(w_norm_loss(&e3), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // elementwise oracle
        let mut expect = 0.0;
        for x in &v {
            expect += x * x;
        }
        assert!((w_norm_loss(&v) - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_known_values_and_nonnegativity() {
        assert_eq!(kl_loss(&[0.0; 8], &[0.0; 8]), 0.0);
        // d=1, mu=1, logvar=0 has KL exactly 0.5
        assert!((kl_loss(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..16).map(|_| rng.gen_range(-4.0..4.0)).collect();
            assert!(kl_loss(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn kl_monte_carlo_scalar_case() {
        // E_q[log q - log p] over 10^6 draws for mu=1, logvar=0 is 0.5
        // within 1e-2.
        let n = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mu, lv) = (1.0f64, 0.0f64);
        let sigma = (0.5 * lv).exp();
        let mut acc = 0.0f64;
        for _ in 0..n {
            let z = mu + sigma * gaussian(&mut rng);
            let log_q = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln();
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
        let mc = acc / n as f64;
        assert!((mc - 0.5).abs() < 1e-2, "mc {mc}");
        assert!((kl_loss(&[mu], &[lv]) - mc).abs() < 1e-2);
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(mu.clone()));
        let l = tape.constant(Tensor::vector(lv.clone()));
        let k = kl_node(&mut tape, m, l);
        assert!((tape.value(k).item() - kl_loss(&mu, &lv)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting_is_exact() {
        let w = LossWeights::default();
        let c = LossComponents { perceptual: 0.0, clip_cycle: 0.0, w_norm: 0.0, kl: 0.0 };
        assert_eq!(total_loss(&c, &w).unwrap(), 0.0);

        let c = LossComponents { perceptual: 0.37, clip_cycle: 1.21, w_norm: 5.5, kl: 2.25 };
        let got = total_loss(&c, &w).unwrap();
        let expect = 0.37 + 1.21 + 2e-4 * 5.5 + 0.2 * 2.25;
        assert!((got - expect).abs() < 1e-12);

        // doubling one weight doubles exactly that term's contribution
        let w2 = LossWeights { kl: 0.4, ..w };
        let got2 = total_loss(&c, &w2).unwrap();
        assert!((got2 - got - 0.2 * 2.25).abs() < 1e-12);

        let bad = LossComponents { perceptual: f64::NAN, ..c };
        let err = total_loss(&bad, &w).unwrap_err().to_string();
        assert!(err.contains("perceptual"), "{err}");
    }

    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
}
