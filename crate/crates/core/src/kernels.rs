//! Dense f32 kernels shared by the forward pass and the analyses.
//!
//! Every reduction runs in a fixed order, so repeated calls on the same
//! machine are bit-identical. Parallel kernels split work by output row,
//! never by reduction axis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major f32 array with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::from_rows",
                    expected: vec![cols],
                    got: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Length of the innermost axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

fn check_finite_slice(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Dot product with eight fixed-order partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out += scale * x`
#[inline]
pub(crate) fn axpy(out: &mut [f32], scale: f32, x: &[f32]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

/// Row-major `a (m×k) · b (k×n)` on raw slices; rows are computed in parallel.
pub(crate) fn matmul_slices(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy(row, av, &b[kk * n..(kk + 1) * n]);
            }
        }
    });
    debug_assert_eq!(out.len(), m * n);
    out
}

/// Matrix product `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    Tensor::new(vec![m, n], matmul_slices(&a.data, m, k, &b.data, n))?.check_finite("matmul")
}

/// `a (m×k) · bᵀ` where `b` is stored as `n×k`. Used for the tied unembedding.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "matmul_transposed",
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        out[i * n..(i + 1) * n]
            .par_chunks_mut(1024)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (j, o) in chunk.iter_mut().enumerate() {
                    let col = c * 1024 + j;
                    *o = dot(a_row, &b.data[col * k..(col + 1) * k]);
                }
            });
    }
    Tensor::new(vec![m, n], out)?.check_finite("matmul_transposed")
}

/// Numerically stable softmax. `mask[i] == true` excludes entry `i`, which is
/// then exactly zero in the output.
pub fn softmax_row(x: &[f32], mask: Option<&[bool]>) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::EmptyInput { op: "softmax_row" });
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_row",
                expected: vec![x.len()],
                got: vec![m.len()],
            });
        }
    }
    let masked = |i: usize| mask.is_some_and(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| !masked(i))
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let exps: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if masked(i) { 0.0 } else { ((v - max) as f64).exp() })
        .collect();
    let sum: f64 = exps.iter().sum();
    let out: Vec<f32> = exps.iter().map(|&e| (e / sum) as f32).collect();
    check_finite_slice(&out, "softmax_row")?;
    Ok(out)
}

pub fn log_softmax_row(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::EmptyInput {
            op: "log_softmax_row",
        });
    }
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = x.iter().map(|&v| ((v - max) as f64).exp()).sum();
    let lse = max as f64 + sum.ln();
    let out: Vec<f32> = x.iter().map(|&v| (v as f64 - lse) as f32).collect();
    check_finite_slice(&out, "log_softmax_row")?;
    Ok(out)
}

/// `(x − mean) / sqrt(var + eps) · gain + bias` with population variance.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gain, bias, eps, &mut out)?;
    Ok(out)
}

pub(crate) fn layer_norm_into(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    eps: f32,
    out: &mut [f32],
) -> Result<()> {
    let n = x.len();
    if n == 0 {
        return Err(Error::EmptyInput { op: "layer_norm" });
    }
    if gain.len() != n || bias.len() != n || out.len() != n {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            expected: vec![n],
            got: vec![gain.len(), bias.len()],
        });
    }
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var + eps as f64).sqrt();
    for i in 0..n {
        out[i] = (((x[i] as f64 - mean) * inv) as f32) * gain[i] + bias[i];
    }
    check_finite_slice(out, "layer_norm")
}

/// GELU, tanh approximation (the GPT-2 variant).
pub fn gelu(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::EmptyInput { op: "gelu" });
    }
    let mut out = x.to_vec();
    gelu_in_place(&mut out);
    check_finite_slice(&out, "gelu")?;
    Ok(out)
}

pub(crate) fn gelu_in_place(x: &mut [f32]) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    for v in x.iter_mut() {
        let u = *v;
        *v = 0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh());
    }
}

/// Index of the largest element; the first one wins on ties.
pub fn argmax(x: &[f32]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::EmptyInput { op: "argmax" });
    }
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_and_projector() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&p, &m).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_transposed_matches_matmul() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let bt = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1.0, -1.0, 2.0, 0.5, 3.0, 2.0]).unwrap();
        assert_eq!(
            matmul_transposed(&a, &bt).unwrap().data(),
            matmul(&a, &b).unwrap().data()
        );
    }

    #[test]
    fn softmax_basic_cases() {
        assert_eq!(softmax_row(&[0.0, 0.0], None).unwrap(), vec![0.5, 0.5]);
        let s = softmax_row(&[1000.0, 0.0], None).unwrap();
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-30);
    }

    #[test]
    fn softmax_mask() {
        let s = softmax_row(&[3.0, 1.0, 2.0], Some(&[false, true, false])).unwrap();
        assert_eq!(s[1], 0.0);
        assert!((s[0] + s[2] - 1.0).abs() < 1e-6);
        assert!(matches!(
            softmax_row(&[1.0, 2.0], Some(&[true, true])),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let out = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let bias = [0.5, -1.0, 2.0];
        let out = layer_norm(&[1.0, 5.0, -2.0], &[0.0; 3], &bias, 1e-5).unwrap();
        assert_eq!(out, bias.to_vec());
    }

    #[test]
    fn small_helpers() {
        assert_eq!(gelu(&[0.0]).unwrap(), vec![0.0]);
        assert_eq!(argmax(&[1.0, 3.0, 2.0]).unwrap(), 1);
        let l = log_softmax_row(&[0.0, 0.0]).unwrap();
        for v in l {
            assert!((v + std::f32::consts::LN_2).abs() < 1e-7);
        }
        assert!(gelu(&[]).is_err());
        assert!(argmax(&[]).is_err());
        assert!(log_softmax_row(&[]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        assert!(matches!(
            softmax_row(&[f32::NAN, 1.0], None),
            Err(Error::NonFinite { .. })
        ));
        let a = Tensor::new(vec![1, 1], vec![f32::INFINITY]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn deleting_a_key_raises_every_other_weight() {
        let scores = [0.4f32, -1.3, 2.2, 0.0, 0.9];
        let full = softmax_row(&scores, None).unwrap();
        for drop in 0..scores.len() {
            let mut mask = [false; 5];
            mask[drop] = true;
            let reduced = softmax_row(&scores, Some(&mask)).unwrap();
            for i in (0..5).filter(|&i| i != drop) {
                assert!(reduced[i] > full[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(x in proptest::collection::vec(-1e4f32..1e4, 1..64)) {
            let s = softmax_row(&x, None).unwrap();
            let total: f64 = s.iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            prop_assert!(s.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn log_softmax_is_shift_invariant(
            x in proptest::collection::vec(-20f32..20.0, 1..32),
            c in -10f32..10.0,
        ) {
            let a = log_softmax_row(&x).unwrap();
            let shifted: Vec<f32> = x.iter().map(|v| v + c).collect();
            let b = log_softmax_row(&shifted).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }

        #[test]
        fn log_softmax_matches_log_of_softmax(x in proptest::collection::vec(-20f32..20.0, 1..32)) {
            let l = log_softmax_row(&x).unwrap();
            let s = softmax_row(&x, None).unwrap();
            for (a, b) in l.iter().zip(&s) {
                if *b > 1e-30 {
                    prop_assert!((a - b.ln()).abs() < 1e-6 * (1.0 + a.abs()));
                }
            }
        }

        #[test]
        fn matmul_is_bit_deterministic(vals in proptest::collection::vec(-3f32..3.0, 12 * 7)) {
            let a = Tensor::new(vec![12, 4], vals[..48].to_vec()).unwrap();
            let b = Tensor::new(vec![4, 9], vals[48..84].to_vec()).unwrap();
            let first = matmul(&a, &b).unwrap();
            for _ in 0..3 {
                prop_assert_eq!(matmul(&a, &b).unwrap(), first.clone());
            }
        }
    }
}
