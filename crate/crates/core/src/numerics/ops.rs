//! Tensor-level forward operations.
//!
//! These compute in `f64` and round the result to the precision of the
//! primary input.

use super::kernels::{self, AttnDims};
use super::tensor::{DType, Tensor};
use crate::error::{config_err, shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MAX_PERIOD: f64 = 10_000.0;

fn widest(ts: &[&Tensor]) -> DType {
    if ts.iter().any(|t| t.dtype() == DType::F64) {
        DType::F64
    } else {
        DType::F32
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is n×d, `k` is m×d, `v` is m×dv. Each head sees a contiguous slice of
/// the feature axis and uses scale `1/√(d/heads)`; head outputs are
/// concatenated.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if dk != d || mv != m {
        return Err(shape_err!(
            "attention: q {:?}, k {:?}, v {:?} are incompatible",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(config_err!("attention: {heads} heads do not divide d={d}, dv={dv}"));
    }
    let dims = AttnDims {
        batches: 1,
        nq: n,
        nk: m,
        d,
        dv,
        heads,
        kv_shared: true,
    };
    let (out, _) = kernels::attention_forward(q.data(), k.data(), v.data(), dims);
    Tensor::with_dtype(widest(&[q, k, v]), [n, dv], out)
}

/// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if c == 0 {
        return Err(shape_err!("layer_norm over an empty axis"));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "layer_norm: gamma/beta widths {}/{} differ from {c}",
            gamma.len(),
            beta.len()
        ));
    }
    if !(eps > 0.0) {
        return Err(config_err!("layer_norm eps must be positive"));
    }
    let (mut y, _) = kernels::layer_norm_forward(x.data(), c, eps);
    for row in y.chunks_exact_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::with_dtype(x.dtype(), x.shape().to_vec(), y)
}

/// Sinusoidal embedding of an integer timestep: `dim/2` sines followed by
/// `dim/2` cosines at frequencies `MAX_PERIOD^(-i/(dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(config_err!("timestep embedding dim must be even and positive, got {dim}"));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new([dim], out)
}

/// Row-wise `x · w + b` with `w` stored `in × out`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, cin) = x.rows_cols();
    let (win, wout) = w.dims2()?;
    if win != cin {
        return Err(shape_err!("linear: input width {cin} vs weight {:?}", w.shape()));
    }
    let mut y = kernels::matmul(x.data(), w.data(), rows, cin, wout);
    if let Some(b) = b {
        if b.len() != wout {
            return Err(shape_err!("linear: bias width {} vs {wout}", b.len()));
        }
        for row in y.chunks_exact_mut(wout) {
            row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = wout;
    Tensor::with_dtype(x.dtype(), shape, y)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(kernels::silu)
}

/// Arithmetic mean over the leading axis.
pub fn mean_axis0(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(shape_err!("mean_axis0 needs rank ≥ 2"));
    }
    let n = x.shape()[0];
    let inner = x.len() / n;
    let mut acc = vec![0.0; inner];
    for chunk in x.data().chunks_exact(inner) {
        acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Tensor::with_dtype(x.dtype(), x.shape()[1..].to_vec(), acc)
}

/// Scalar SiLU; handy for gate arithmetic.
pub fn silu_scalar(x: f64) -> f64 {
    kernels::silu(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::Rng;

    /// Straight-line oracle: per head, explicit loops for logits, softmax and
    /// the weighted sum.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
        let (n, d) = q.dims2().unwrap();
        let (m, dv) = v.dims2().unwrap();
        let (dh, dvh) = (d / heads, dv / heads);
        let mut out = vec![0.0; n * dv];
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..m)
                    .map(|j| {
                        (0..dh)
                            .map(|p| q.at(&[i, h * dh + p]) * k.at(&[j, h * dh + p]))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for p in 0..dvh {
                    out[i * dv + h * dvh + p] =
                        (0..m).map(|j| e[j] / z * v.at(&[j, h * dvh + p])).sum();
                }
            }
        }
        Tensor::new([n, dv], out).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = Rng::new(1);
        let q = rng.normal_tensor([5, 4]);
        let k = rng.normal_tensor([1, 4]);
        let v = Tensor::new([1, 2], vec![0.25, -7.0]).unwrap();
        let out = attention(&q, &k, &v, 2).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Tensor::new([1, 1], vec![0.0]).unwrap();
        let k = Tensor::new([2, 1], vec![0.0, 0.0]).unwrap();
        let v = Tensor::new([2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(attention(&q, &k, &v, 1).unwrap().data(), &[2.0]);
    }

    #[test]
    fn attention_matches_oracle() {
        let mut rng = Rng::new(42);
        let q = rng.normal_tensor([4, 8]);
        let k = rng.normal_tensor([4, 8]);
        let v = rng.normal_tensor([4, 8]);
        let got = attention(&q, &k, &v, 2).unwrap();
        assert!(got.max_abs_diff(&attention_oracle(&q, &k, &v, 2)) < 1e-6);
    }

    #[test]
    fn attention_validates_dims() {
        let q = Tensor::zeros([2, 6]);
        let k = Tensor::zeros([3, 6]);
        assert!(matches!(attention(&q, &k, &Tensor::zeros([3, 6]), 4), Err(Error::Config(_))));
        assert!(matches!(attention(&q, &Tensor::zeros([3, 5]), &k, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(9);
        let dims = AttnDims { batches: 3, nq: 5, nk: 7, d: 8, dv: 4, heads: 2, kv_shared: false };
        let q = rng.normal_tensor([15, 8]);
        let k = rng.normal_tensor([21, 8]).map(|x| 4.0 * x);
        let v = rng.normal_tensor([21, 4]);
        let (_, p) = kernels::attention_forward(q.data(), k.data(), v.data(), dims);
        for row in p.chunks_exact(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let ones = Tensor::full([4], 1.0);
        let zeros = Tensor::zeros([4]);
        let x = Tensor::new([1, 4], vec![3.0; 4]).unwrap();
        assert!(layer_norm(&x, &ones, &zeros, LAYER_NORM_EPS)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let x = Tensor::new([1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor([3, 8]);
        let g = rng.normal_tensor([8]);
        let b = rng.normal_tensor([8]);
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * g.data()[c] + b.data()[c];
                assert!((y.at(&[r, c]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis_widths() {
        let x = Tensor::zeros([2, 3]);
        assert!(layer_norm(&x, &Tensor::zeros([2]), &Tensor::zeros([3]), 1e-5).is_err());
    }

    #[test]
    fn timestep_embedding_properties() {
        let e = timestep_embedding(0, 8).unwrap();
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
        for t in [0, 3, 999] {
            assert_eq!(timestep_embedding(t, 6).unwrap().len(), 6);
        }
        assert!(matches!(timestep_embedding(1, 7), Err(Error::Config(_))));

        let e = timestep_embedding(1, 8).unwrap();
        for i in 0..4 {
            let f = 10_000f64.powf(-(i as f64) / 4.0);
            assert!((e.data()[i] - f.sin()).abs() < 1e-9);
            assert!((e.data()[4 + i] - f.cos()).abs() < 1e-9);
        }
    }
}
