//! Synthetic image domain for desk-scale training and evaluation.
//!
//! A sample is a low-dimensional latent pair: `attributes` carry the semantic
//! content a text prompt can talk about, `nuisance` carries pose/background
//! style that prompts do not mention. Rendering embeds both linearly into an
//! orthonormal pixel subspace around mid-gray, so the attribute/nuisance
//! content of any rendered image can be read back exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ATTR_DIM: usize = 8;
pub const NUISANCE_DIM: usize = 4;
pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];

/// Pixel-space budget for each latent group; together they keep rendered
/// pixels strictly inside (0, 1) for attributes and nuisance in [-1, 1].
/// Nuisance gets as much pixel weight as the semantic content: pose and
/// background dominate real photographs the same way.
const ATTR_PIXEL_BUDGET: f64 = 0.24;
const NUISANCE_PIXEL_BUDGET: f64 = 0.24;

#[derive(Debug, Clone)]
pub struct ToyWorldSample {
    pub attributes: Vec<f64>,
    pub nuisance: Vec<f64>,
    pub image: Tensor,
}

/// Frozen rendering basis shared by the renderer and the toy embedder.
#[derive(Debug)]
pub struct ToyWorld {
    seed: u64,
    /// Orthonormal rows, one per attribute dimension, in flattened pixel space.
    attr_basis: Vec<Vec<f64>>,
    /// Orthonormal rows for nuisance dimensions, orthogonal to `attr_basis`.
    nuis_basis: Vec<Vec<f64>>,
    attr_scale: f64,
    nuis_scale: f64,
}

impl ToyWorld {
    pub fn new(seed: u64) -> Self {
        let pixels: usize = IMAGE_SHAPE.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
        let rows = orthonormal_rows(&mut rng, ATTR_DIM + NUISANCE_DIM, pixels);
        let attr_basis: Vec<Vec<f64>> = rows[..ATTR_DIM].to_vec();
        let nuis_basis: Vec<Vec<f64>> = rows[ATTR_DIM..].to_vec();

        // Worst-case per-pixel magnitude of a +-1 latent is the column L1 norm.
        let attr_scale = ATTR_PIXEL_BUDGET / max_column_l1(&attr_basis);
        let nuis_scale = NUISANCE_PIXEL_BUDGET / max_column_l1(&nuis_basis);
        ToyWorld { seed, attr_basis, nuis_basis, attr_scale, nuis_scale }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_shape(&self) -> [usize; 3] {
        IMAGE_SHAPE
    }

    pub fn attr_scale(&self) -> f64 {
        self.attr_scale
    }

    pub fn nuis_scale(&self) -> f64 {
        self.nuis_scale
    }

    pub fn attr_basis(&self) -> &[Vec<f64>] {
        &self.attr_basis
    }

    pub fn nuis_basis(&self) -> &[Vec<f64>] {
        &self.nuis_basis
    }

    /// Deterministic rendering of a latent pair into a `[3, 32, 32]` image.
    pub fn render(&self, attributes: &[f64], nuisance: &[f64]) -> Result<Tensor> {
        if attributes.len() != ATTR_DIM {
            return Err(Error::input(format!(
                "toy render: expected {ATTR_DIM} attributes, got {}",
                attributes.len()
            )));
        }
        if nuisance.len() != NUISANCE_DIM {
            return Err(Error::input(format!(
                "toy render: expected {NUISANCE_DIM} nuisance dims, got {}",
                nuisance.len()
            )));
        }
        if attributes.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::input("toy render: attributes must lie in [-1, 1]"));
        }
        let pixels: usize = IMAGE_SHAPE.iter().product();
        let mut img = vec![0.5; pixels];
        for (j, row) in self.attr_basis.iter().enumerate() {
            let c = self.attr_scale * attributes[j];
            if c != 0.0 {
                for (p, b) in img.iter_mut().zip(row) {
                    *p += c * b;
                }
            }
        }
        for (j, row) in self.nuis_basis.iter().enumerate() {
            let c = self.nuis_scale * nuisance[j];
            if c != 0.0 {
                for (p, b) in img.iter_mut().zip(row) {
                    *p += c * b;
                }
            }
        }
        Ok(Tensor::new(IMAGE_SHAPE.to_vec(), img))
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> ToyWorldSample {
        // Redraw near-empty semantic content: a sample must be about
        // something, or paired text/image comparisons degenerate.
        let attributes: Vec<f64> = loop {
            let a: Vec<f64> = (0..ATTR_DIM).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            if a.iter().map(|v| v * v).sum::<f64>() >= 1.0 {
                break a;
            }
        };
        let nuisance: Vec<f64> = (0..NUISANCE_DIM).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let image = self.render(&attributes, &nuisance).expect("in-range latents");
        ToyWorldSample { attributes, nuisance, image }
    }

    /// Seeded batch of samples; the canonical way to build toy datasets.
    pub fn sample_many(&self, count: usize, seed: u64) -> Vec<ToyWorldSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }

    /// Exact attribute readout for any image (linear functional of pixels).
    pub fn read_attributes(&self, image: &Tensor) -> Vec<f64> {
        self.read_rows(image, &self.attr_basis, self.attr_scale)
    }

    /// Exact nuisance readout for any image.
    pub fn read_nuisance(&self, image: &Tensor) -> Vec<f64> {
        self.read_rows(image, &self.nuis_basis, self.nuis_scale)
    }

    fn read_rows(&self, image: &Tensor, basis: &[Vec<f64>], scale: f64) -> Vec<f64> {
        basis
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                for (p, b) in image.data().iter().zip(row) {
                    acc += (p - 0.5) * b;
                }
                acc / scale
            })
            .collect()
    }
}

/// Gram-Schmidt over freshly drawn Gaussian rows.
pub(crate) fn orthonormal_rows(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    assert!(count <= dim);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, b) in v.iter_mut().zip(r) {
                *x -= d * b;
            }
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue; // numerically degenerate draw, retry
        }
        for x in &mut v {
            *x /= n;
        }
        rows.push(v);
    }
    rows
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let v: f64 = StandardNormal.sample(rng);
    v
}

fn max_column_l1(rows: &[Vec<f64>]) -> f64 {
    let dim = rows[0].len();
    let mut best: f64 = 0.0;
    for i in 0..dim {
        let s: f64 = rows.iter().map(|r| r[i].abs()).sum();
        best = best.max(s);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let world = ToyWorld::new(11);
        let a = vec![0.3, -1.0, 0.5, 0.0, 1.0, -0.2, 0.7, -0.9];
        let n = vec![0.4, -0.4, 1.0, -1.0];
        let img1 = world.render(&a, &n).unwrap();
        let img2 = world.render(&a, &n).unwrap();
        assert_eq!(img1, img2, "identical latents must render bitwise-identically");
        assert!(img1.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn readout_recovers_latents() {
        let world = ToyWorld::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let s = world.sample(&mut rng);
            let a = world.read_attributes(&s.image);
            let n = world.read_nuisance(&s.image);
            for (x, y) in a.iter().zip(&s.attributes) {
                assert!((x - y).abs() < 1e-9, "attribute readout {x} vs {y}");
            }
            for (x, y) in n.iter().zip(&s.nuisance) {
                assert!((x - y).abs() < 1e-9, "nuisance readout {x} vs {y}");
            }
        }
    }

    #[test]
    fn out_of_range_attributes_rejected() {
        let world = ToyWorld::new(3);
        let a = vec![1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(world.render(&a, &[0.0; 4]).is_err());
        assert!(world.render(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn sample_many_is_seed_reproducible() {
        let world = ToyWorld::new(5);
        let a = world.sample_many(4, 42);
        let b = world.sample_many(4, 42);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
        }
    }
}
