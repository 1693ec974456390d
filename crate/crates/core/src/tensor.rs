//! Dense row-major f64 tensors. All differentiable math in this crate runs in
//! f64; persisted artifacts downcast to f32 at the file boundary.

use crate::error::{Error, Result};

/// Row-major dense tensor. Shapes are small (vectors, matrices, CHW images),
/// so a plain `Vec<usize>` shape is fine.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data len {}", shape, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite values in {what}")))
        }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Euclidean norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product with a fixed 8-lane accumulator split so the reduction
/// vectorizes; the summation order is deterministic.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n8 = (a.len() / 8) * 8;
    let mut acc = [0.0f64; 8];
    for (ca, cb) in a[..n8].chunks_exact(8).zip(b[..n8].chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in a[n8..].iter().zip(&b[n8..]) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`, elementwise.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity in f64. Errors on zero-norm inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine of zero-norm vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// f32 helpers used on the retrieval path, where banks and embeddings live.
pub mod f32v {
    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn l2_norm(v: &[f32]) -> f32 {
        dot(v, v).sqrt()
    }

    /// Returns None for zero-norm input.
    pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
        let n = l2_norm(v);
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(v.iter().map(|x| x / n).collect())
    }

    pub fn cosine(a: &[f32], b: &[f32]) -> Option<f32> {
        let na = l2_norm(a);
        let nb = l2_norm(b);
        if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
            return None;
        }
        Some(dot(a, b) / (na * nb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn item_and_shape() {
        let t = Tensor::scalar(3.5);
        assert_eq!(t.item(), 3.5);
        assert_eq!(t.shape(), &[1]);
    }

    #[test]
    fn f32_normalize_unit() {
        let v = vec![3.0f32, 4.0];
        let n = f32v::normalized(&v).unwrap();
        assert!((f32v::l2_norm(&n) - 1.0).abs() < 1e-6);
        assert!(f32v::normalized(&[0.0, 0.0]).is_none());
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
