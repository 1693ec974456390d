//! Frozen latent-to-image generator backends.
//!
//! The toy backend is a seeded two-stage affine decoder with a smooth
//! nonlinearity: cheap, differentiable, and frozen for its whole lifetime,
//! with a mean latent estimated once at construction. The external backend is
//! the same architecture with weights (and the exported mean latent) loaded
//! from a file.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::bank::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toyworld::gaussian;

pub const TOY_LATENT_DIM: usize = 64;
pub const TOY_HIDDEN_DIM: usize = 256;
pub const TOY_OUTPUT_SHAPE: [usize; 3] = [3, 32, 32];
const MEAN_LATENT_SAMPLES: usize = 10_000;

/// Which latent space a vector lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSpace {
    Flat,
    /// Per-layer extended space, flattened as `layers` blocks.
    Extended { layers: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLatent {
    pub values: Vec<f64>,
    pub space: LatentSpace,
}

impl GeneratorLatent {
    pub fn flat(values: Vec<f64>) -> Self {
        GeneratorLatent { values, space: LatentSpace::Flat }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Elementwise sum, keeping the space tag.
    pub fn plus(&self, offset: &GeneratorLatent) -> Result<GeneratorLatent> {
        if self.space != offset.space || self.values.len() != offset.values.len() {
            return Err(Error::input("latent space mismatch in addition"));
        }
        Ok(GeneratorLatent {
            values: self.values.iter().zip(&offset.values).map(|(a, b)| a + b).collect(),
            space: self.space,
        })
    }
}

/// A frozen image generator with an observable forward-call counter.
pub trait GeneratorBackend: Send + Sync {
    fn latent_space(&self) -> LatentSpace;

    fn latent_len(&self) -> usize;

    fn output_shape(&self) -> [usize; 3];

    /// The frozen average latent; constant for the backend's lifetime.
    fn mean_latent(&self) -> GeneratorLatent;

    /// Deterministic forward pass; increments the forward-call counter by 1.
    fn generate(&self, latent: &GeneratorLatent) -> Result<Tensor>;

    /// Monotonic count of forward passes performed so far.
    fn forward_calls(&self) -> u64;

    /// Digest over all frozen weights.
    fn param_digest(&self) -> [u8; 32];
}

/// Generators whose forward pass can join a gradient tape.
pub trait DifferentiableGenerator: GeneratorBackend {
    /// Graph forward pass; increments the forward-call counter by 1.
    fn generate_node(&self, tape: &mut Tape, latent: NodeId) -> NodeId;
}

/// Two-stage affine decoder: `x = 0.5 + 0.5 * tanh(W2 * tanh(W1 w + b1) + b2)`.
pub struct AffineDecoderGenerator {
    latent_dim: usize,
    hidden_dim: usize,
    output_shape: [usize; 3],
    w1: Arc<Tensor>,
    b1: Arc<Tensor>,
    w2: Arc<Tensor>,
    b2: Arc<Tensor>,
    mean_latent: Vec<f64>,
    calls: AtomicU64,
    digest: [u8; 32],
    tag: String,
}

impl AffineDecoderGenerator {
    /// Seed-frozen toy generator over a toy world.
    ///
    /// The output layer mixes the world's render basis (this is the frozen
    /// stand-in for a generator pretrained on the domain: its range has to
    /// cover domain images, the way a face generator covers faces) plus a
    /// small random texture component so the range is wider than the world
    /// subspace.
    pub fn toy(world: &crate::toyworld::ToyWorld, seed: u64) -> Self {
        let (d, h) = (TOY_LATENT_DIM, TOY_HIDDEN_DIM);
        let shape = world.image_shape();
        let pixels: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491).wrapping_add(41));
        let s1 = 1.0 / (d as f64).sqrt();
        let w1: Vec<f64> = (0..h * d).map(|_| gaussian(&mut rng) * s1).collect();
        let b1: Vec<f64> = (0..h).map(|_| gaussian(&mut rng) * 0.2).collect();

        // scaled world directions as pixel-space columns
        let mut world_cols: Vec<&[f64]> = Vec::new();
        let mut col_scales: Vec<f64> = Vec::new();
        for row in world.attr_basis() {
            world_cols.push(row);
            col_scales.push(world.attr_scale());
        }
        for row in world.nuis_basis() {
            world_cols.push(row);
            col_scales.push(world.nuis_scale());
        }
        let world_dims = world_cols.len();
        // hidden-to-world mixing, then lift to pixels; the 2x gain undoes the
        // 0.5 * tanh output squash in its near-linear regime
        let ga = 1.2 / (h as f64).sqrt();
        let mix: Vec<f64> = (0..world_dims * h).map(|_| gaussian(&mut rng) * ga).collect();
        let eps = 0.03 / (h as f64).sqrt();
        let mut w2 = vec![0.0f64; pixels * h];
        for i in 0..pixels {
            let row = &mut w2[i * h..(i + 1) * h];
            for (dcol, col) in world_cols.iter().enumerate() {
                let coeff = 2.0 * col_scales[dcol] * col[i];
                if coeff != 0.0 {
                    crate::tensor::axpy(coeff, &mix[dcol * h..(dcol + 1) * h], row);
                }
            }
            for v in row.iter_mut() {
                *v += gaussian(&mut rng) * eps;
            }
        }
        let b2: Vec<f64> = vec![0.0; pixels];

        // w-bar: mean of 10k seeded draws from the N(0, I) latent prior.
        let mut prior_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(7));
        let mut mean = vec![0.0f64; d];
        for _ in 0..MEAN_LATENT_SAMPLES {
            for m in mean.iter_mut() {
                *m += gaussian(&mut prior_rng);
            }
        }
        for m in mean.iter_mut() {
            *m /= MEAN_LATENT_SAMPLES as f64;
        }

        Self::from_weights(d, h, shape, w1, b1, w2, b2, mean, format!("toy:{seed}"))
    }

    #[allow(clippy::too_many_arguments)]
    fn from_weights(
        latent_dim: usize,
        hidden_dim: usize,
        output_shape: [usize; 3],
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
        mean_latent: Vec<f64>,
        tag: String,
    ) -> Self {
        let pixels: usize = output_shape.iter().product();
        assert_eq!(w1.len(), hidden_dim * latent_dim);
        assert_eq!(w2.len(), pixels * hidden_dim);
        let mut h = Sha256::new();
        h.update(b"affine-decoder-v1");
        for arr in [&w1, &b1, &w2, &b2, &mean_latent] {
            for v in arr {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize().into();
        AffineDecoderGenerator {
            latent_dim,
            hidden_dim,
            output_shape,
            w1: Arc::new(Tensor::new(vec![hidden_dim, latent_dim], w1)),
            b1: Arc::new(Tensor::new(vec![hidden_dim], b1)),
            w2: Arc::new(Tensor::new(vec![pixels, hidden_dim], w2)),
            b2: Arc::new(Tensor::new(vec![pixels], b2)),
            mean_latent,
            calls: AtomicU64::new(0),
            digest,
            tag,
        }
    }

    /// Export weights and mean latent for the `external` backend.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(GENERATOR_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u32).to_le_bytes());
        for d in self.output_shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for arr in [
            self.w1.data(),
            self.b1.data(),
            self.w2.data(),
            self.b2.data(),
            &self.mean_latent,
        ] {
            for v in arr {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load an external generator from an exported weights file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        let magic = r.take(4)?;
        if magic != GENERATOR_MAGIC {
            return Err(Error::format(0, "bad magic for generator weights"));
        }
        let at = r.offset();
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::format(at, format!("unsupported generator version {version}")));
        }
        let at = r.offset();
        let latent_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let pixels: usize = shape.iter().product();
        if latent_dim == 0 || hidden_dim == 0 || pixels == 0 {
            return Err(Error::format(at, "zero dimension in generator header"));
        }
        let w1 = r.f64_vec(hidden_dim * latent_dim)?;
        let b1 = r.f64_vec(hidden_dim)?;
        let w2 = r.f64_vec(pixels * hidden_dim)?;
        let b2 = r.f64_vec(pixels)?;
        let mean = r.f64_vec(latent_dim)?;
        r.expect_eof()?;
        if [&w1, &b1, &w2, &b2, &mean].iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::format(at, "non-finite generator weights"));
        }
        Ok(Self::from_weights(
            latent_dim,
            hidden_dim,
            shape,
            w1,
            b1,
            w2,
            b2,
            mean,
            format!("external:{}", path.display()),
        ))
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }
}

const GENERATOR_MAGIC: &[u8; 4] = b"AGEN";

impl GeneratorBackend for AffineDecoderGenerator {
    fn latent_space(&self) -> LatentSpace {
        LatentSpace::Flat
    }

    fn latent_len(&self) -> usize {
        self.latent_dim
    }

    fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    fn mean_latent(&self) -> GeneratorLatent {
        GeneratorLatent::flat(self.mean_latent.clone())
    }

    fn generate(&self, latent: &GeneratorLatent) -> Result<Tensor> {
        if latent.values.len() != self.latent_dim {
            return Err(Error::input(format!(
                "latent has {} dims, generator expects {}",
                latent.values.len(),
                self.latent_dim
            )));
        }
        if latent.space != LatentSpace::Flat {
            return Err(Error::input("this generator uses the flat latent space"));
        }
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(latent.values.clone()));
        let out = self.generate_node(&mut tape, w);
        Ok(tape.value(out).clone())
    }

    fn forward_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn param_digest(&self) -> [u8; 32] {
        self.digest
    }
}

impl DifferentiableGenerator for AffineDecoderGenerator {
    fn generate_node(&self, tape: &mut Tape, latent: NodeId) -> NodeId {
        assert_eq!(tape.value(latent).len(), self.latent_dim, "latent dim mismatch");
        self.calls.fetch_add(1, Ordering::SeqCst);
        let w1 = tape.frozen(&self.w1);
        let b1 = tape.frozen(&self.b1);
        let pre1 = tape.affine(w1, Some(b1), latent);
        let h = tape.tanh(pre1);
        let w2 = tape.frozen(&self.w2);
        let b2 = tape.frozen(&self.b2);
        let pre2 = tape.affine(w2, Some(b2), h);
        let t = tape.tanh(pre2);
        let half = tape.scale(t, 0.5);
        let img = tape.add_scalar(half, 0.5);
        tape.reshape(img, self.output_shape.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::ToyWorld;

    fn toy_gen(seed: u64) -> AffineDecoderGenerator {
        AffineDecoderGenerator::toy(&ToyWorld::new(seed), seed)
    }

    #[test]
    fn mean_latent_is_constant_and_reproducible() {
        let g1 = toy_gen(7);
        let a = g1.mean_latent();
        let b = g1.mean_latent();
        assert_eq!(a, b);
        // fresh construction from the same seed reproduces it exactly
        let g2 = toy_gen(7);
        assert_eq!(a, g2.mean_latent());
    }

    #[test]
    fn mean_latent_close_to_prior_mean() {
        // Standard-error bound: each coordinate of a 10k-sample mean of
        // N(0, 1) lies within 3/sqrt(10000) = 0.03 of zero.
        let g = toy_gen(7);
        for (i, v) in g.mean_latent().values.iter().enumerate() {
            assert!(v.abs() <= 0.03, "mean latent coord {i} = {v}");
        }
    }

    #[test]
    fn generate_is_deterministic_and_counts_calls() {
        let g = toy_gen(7);
        let w = g.mean_latent();
        let before = g.forward_calls();
        let a = g.generate(&w).unwrap();
        let b = g.generate(&w).unwrap();
        assert_eq!(a, b, "same latent must produce bitwise-identical images");
        assert_eq!(g.forward_calls(), before + 2);
        assert_eq!(a.shape(), &TOY_OUTPUT_SHAPE);
        assert!(a.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zero_offset_equals_mean_output() {
        let g = toy_gen(7);
        let mean = g.mean_latent();
        let zero = GeneratorLatent::flat(vec![0.0; g.latent_len()]);
        let shifted = mean.plus(&zero).unwrap();
        assert_eq!(g.generate(&shifted).unwrap(), g.generate(&mean).unwrap());
    }

    #[test]
    fn latent_shape_mismatch_rejected() {
        let g = toy_gen(7);
        let bad = GeneratorLatent::flat(vec![0.0; 3]);
        assert!(matches!(g.generate(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn generate_gradient_matches_finite_differences() {
        let g = toy_gen(7);
        let w0 = g.mean_latent().values;

        let f = |v: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let w = tape.constant(Tensor::vector(v.to_vec()));
            let img = g.generate_node(&mut tape, w);
            let s = tape.sum(img);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(w0.clone()));
        let img = g.generate_node(&mut tape, w);
        let s = tape.sum(img);
        let grads = tape.backward(s, None);
        let analytic = grads.get(w).unwrap().data().to_vec();

        let h = 1e-4;
        for i in 0..w0.len() {
            let mut wp = w0.clone();
            wp[i] += h;
            let fp = f(&wp);
            wp[i] = w0[i] - h;
            let fm = f(&wp);
            let numeric = (fp - fm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-10);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(rel < 1e-4, "coord {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn distinct_latents_give_distinct_images() {
        let g = toy_gen(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = g.generate(&g.mean_latent()).unwrap();
        for _ in 0..5 {
            let w = GeneratorLatent::flat(
                (0..g.latent_len()).map(|_| gaussian(&mut rng)).collect(),
            );
            let img = g.generate(&w).unwrap();
            let dist: f64 = img
                .data()
                .iter()
                .zip(base.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / img.len() as f64;
            assert!(dist > 1e-3, "generator output barely depends on the latent");
        }
    }

    #[test]
    fn weights_round_trip_through_external_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.agen");
        let g = toy_gen(9);
        g.save_weights(&path).unwrap();
        let loaded = AffineDecoderGenerator::load(&path).unwrap();
        assert_eq!(loaded.param_digest(), g.param_digest());
        assert_eq!(loaded.mean_latent(), g.mean_latent());
        let w = g.mean_latent();
        assert_eq!(loaded.generate(&w).unwrap(), g.generate(&w).unwrap());

        // corrupt the magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            AffineDecoderGenerator::load(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn param_digest_is_stable_and_seed_sensitive() {
        let a = toy_gen(7);
        let b = toy_gen(7);
        let c = toy_gen(8);
        assert_eq!(a.param_digest(), b.param_digest());
        assert_ne!(a.param_digest(), c.param_digest());
    }
}
