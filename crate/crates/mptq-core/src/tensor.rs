//! Dense row-major f32 tensor and the neural operators used by the encoder:
//! matmul, linear, LayerNorm, Softmax, GeLU.
//!
//! All operators are pure functions; tensors are immutable after
//! construction, so values can be shared across threads freely.

use crate::error::{Error, Result};

/// Dense tensor: a shape plus a flat row-major `f32` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape must have at least one nonzero dimension, got {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension (the channel axis for activations).
    pub fn last_dim(&self) -> usize {
        *self
            .shape
            .last()
            .expect("tensor has at least one dimension")
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Largest absolute element, 0 for the degenerate all-zero tensor.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise sum with another tensor of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// View the tensor as a stack of rows of length `last_dim`.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.last_dim())
    }
}

/// Exact-erf GeLU, `x * Phi(x)`. The global minimum is about -0.1700 near
/// x = -0.7518, which the post-GeLU quantizer's lower bound relies on.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

/// Elementwise GeLU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// LayerNorm over the last dimension: normalize each row to zero mean and
/// unit variance (population variance, eps inside the square root), then
/// apply the per-channel affine `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let dim = x.last_dim();
    if gamma.len() != dim || beta.len() != dim {
        return Err(Error::Dimension(format!(
            "layer_norm: last dim {} vs gamma {} / beta {}",
            dim,
            gamma.len(),
            beta.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Input(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / dim as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, &v) in row.iter().enumerate() {
            let norm = (v as f64 - mean) * inv;
            out.push((norm as f32) * gamma[j] + beta[j]);
        }
    }
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data: out,
    })
}

/// Row-wise softmax over the last dimension, stabilized by max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let dim = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut exps = Vec::with_capacity(dim);
        let mut sum = 0.0f64;
        for &v in row {
            let e = ((v - max) as f64).exp();
            exps.push(e);
            sum += e;
        }
        for e in exps {
            out.push((e / sum) as f32);
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

/// Batched matmul over the trailing two dimensions: `(..., m, k) x (..., k, n)`.
/// Leading dimensions must match exactly. Products accumulate in f64.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Dimension("matmul requires rank >= 2".into()));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, ka) = (a.shape[ar - 2], a.shape[ar - 1]);
    let (kb, n) = (b.shape[br - 2], b.shape[br - 1]);
    if ka != kb || a.shape[..ar - 2] != b.shape[..br - 2] {
        return Err(Error::Dimension(format!(
            "matmul: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let batch: usize = a.shape[..ar - 2].iter().product();
    let mut out = vec![0.0f32; batch * m * n];
    for t in 0..batch {
        let a_off = t * m * ka;
        let b_off = t * ka * n;
        let o_off = t * m * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..ka {
                    acc += a.data[a_off + i * ka + k] as f64 * b.data[b_off + k * n + j] as f64;
                }
                out[o_off + i * n + j] = acc as f32;
            }
        }
    }
    let mut shape = a.shape[..ar - 2].to_vec();
    shape.push(m);
    shape.push(n);
    Ok(Tensor { shape, data: out })
}

/// Swap the trailing two dimensions.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::Dimension(
            "transpose_last2 requires rank >= 2".into(),
        ));
    }
    let r = x.rank();
    let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
    let batch: usize = x.shape[..r - 2].iter().product();
    let mut out = vec![0.0f32; x.numel()];
    for t in 0..batch {
        let off = t * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = x.data[off + i * n + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor { shape, data: out })
}

/// Linear layer `x . W^T + b` with `W` of shape `(out, in)` applied to the
/// last dimension of `x`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    if weight.rank() != 2 {
        return Err(Error::Dimension("linear weight must be rank 2".into()));
    }
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    if x.last_dim() != in_dim || bias.len() != out_dim {
        return Err(Error::Dimension(format!(
            "linear: x {:?} vs weight {:?} / bias {}",
            x.shape,
            weight.shape,
            bias.len()
        )));
    }
    let rows = x.numel() / in_dim;
    let mut out = Vec::with_capacity(rows * out_dim);
    for row in x.rows() {
        for (o, &b) in bias.iter().enumerate() {
            let w_row = &weight.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = b as f64;
            for (xv, wv) in row.iter().zip(w_row) {
                acc += *xv as f64 * *wv as f64;
            }
            out.push(acc as f32);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor { shape, data: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vals: &[f32]) -> Tensor {
        Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        // rank-0 carriers are not allowed; scalars live in 1-element rank 1
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = row(&[4.0, 4.0, 4.0]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-6).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population variance 1 -> [-1, 1] as eps -> 0
        let x = row(&[1.0, 3.0]);
        let y = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_affine() {
        let x = row(&[1.0, 3.0]);
        let y = layer_norm(&x, &[2.0, 2.0], &[5.0, 5.0], 1e-12).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-4);
        assert!((y.data()[1] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_shape_mismatch() {
        let x = row(&[1.0, 3.0]);
        assert!(matches!(
            layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-6),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::new(
            vec![3, 8],
            (0..24).map(|i| (i as f32).sin() * 3.0).collect(),
        )
        .unwrap();
        let y = layer_norm(&x, &[1.0; 8], &[0.0; 8], 1e-6).unwrap();
        for r in y.rows() {
            let mean: f64 = r.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var: f64 = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // numeric minimum of x * Phi(x)
        assert!((gelu_scalar(-0.7518) + 0.1700).abs() < 1e-4);
    }

    #[test]
    fn gelu_minimum_is_global() {
        let min = (-4000..4000)
            .map(|i| gelu_scalar(i as f32 * 1e-3))
            .fold(f32::INFINITY, f32::min);
        assert!((min + 0.1700).abs() < 1e-4, "min {min}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![4, 5], (0..20).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap();
        let y = softmax(&x);
        for r in y.rows() {
            let sum: f32 = r.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let x = row(&[1000.0, 1000.0, 999.0]);
        let y = softmax(&x);
        assert!(y.is_all_finite());
        let sum: f32 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_2x2() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_batched() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 6.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn linear_matches_matmul_transpose() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let y = linear(&x, &w, &[1.0, -1.0]).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!((y.data()[0] - (1.0 - 3.0 + 1.0)).abs() < 1e-6);
        assert!((y.data()[1] - (0.5 + 1.0 + 1.5 - 1.0)).abs() < 1e-6);
    }
}
