//! Raw slice kernels shared by the tensor API and the gradient tape.
//!
//! All kernels are single-threaded with a fixed reduction order, so equal
//! inputs give bitwise-equal outputs.

/// Strided matrix view: element (i, j) lives at `off + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(off: usize, ld: usize) -> Self {
        View { off, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major block with leading dimension `ld`.
    pub fn t(off: usize, ld: usize) -> Self {
        View { off, rs: 1, cs: ld }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: View, r: usize, cc: usize| v.off + (r - 1) * v.rs + (cc - 1) * v.cs;
    assert!(k == 0 || last(av, m, k) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || last(bv, k, n) < b.len(), "gemm: b out of bounds");
    assert!(last(cv, m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: the three asserts above bound every element the views address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Row-major `(r×k) · (k×n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * n];
    gemm(r, k, n, 1.0, a, View::rows(0, k), b, View::rows(0, n), 0.0, &mut out, View::rows(0, n));
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place numerically stable softmax over one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are `batches × nq` rows of width `d`; keys and values are
/// `kv_batches × nk` rows of widths `d` and `dv`, with `kv_batches` either 1
/// (shared by every query batch) or `batches`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batches: usize,
    pub nq: usize,
    pub nk: usize,
    pub d: usize,
    pub dv: usize,
    pub heads: usize,
    pub kv_shared: bool,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn head_dim_v(&self) -> usize {
        self.dv / self.heads
    }

    fn kv_row0(&self, b: usize) -> usize {
        if self.kv_shared {
            0
        } else {
            b * self.nk
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    fn probs_len(&self) -> usize {
        self.batches * self.heads * self.nq * self.nk
    }
}

/// Forward attention. Returns the output rows and the softmax probabilities
/// laid out `[batch][head][query][key]`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], g: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let (dh, dvh) = (g.head_dim(), g.head_dim_v());
    let mut out = vec![0.0; g.batches * g.nq * g.dv];
    let mut probs = vec![0.0; g.probs_len()];
    let plane = g.nq * g.nk;
    for b in 0..g.batches {
        let q0 = b * g.nq;
        let k0 = g.kv_row0(b);
        for h in 0..g.heads {
            let p_off = (b * g.heads + h) * plane;
            let p = &mut probs[p_off..p_off + plane];
            gemm(
                g.nq,
                dh,
                g.nk,
                g.scale(),
                q,
                View::rows(q0 * g.d + h * dh, g.d),
                k,
                View::t(k0 * g.d + h * dh, g.d),
                0.0,
                p,
                View::rows(0, g.nk),
            );
            p.chunks_exact_mut(g.nk).for_each(softmax_row);
            gemm(
                g.nq,
                g.nk,
                dvh,
                1.0,
                p,
                View::rows(0, g.nk),
                v,
                View::rows(k0 * g.dv + h * dvh, g.dv),
                0.0,
                &mut out,
                View::rows(q0 * g.dv + h * dvh, g.dv),
            );
        }
    }
    (out, probs)
}

/// Backward attention; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    g: AttnDims,
    dq: &mut [f64],
    dk: &mut [f64],
    dvv: &mut [f64],
) {
    let (dh, dvh) = (g.head_dim(), g.head_dim_v());
    let plane = g.nq * g.nk;
    let mut ds = vec![0.0; plane];
    for b in 0..g.batches {
        let q0 = b * g.nq;
        let k0 = g.kv_row0(b);
        for h in 0..g.heads {
            let p = &probs[(b * g.heads + h) * plane..][..plane];
            // dV += Pᵀ dO
            gemm(
                g.nk,
                g.nq,
                dvh,
                1.0,
                p,
                View::t(0, g.nk),
                dout,
                View::rows(q0 * g.dv + h * dvh, g.dv),
                1.0,
                dvv,
                View::rows(k0 * g.dv + h * dvh, g.dv),
            );
            // dP = dO Vᵀ
            gemm(
                g.nq,
                dvh,
                g.nk,
                1.0,
                dout,
                View::rows(q0 * g.dv + h * dvh, g.dv),
                v,
                View::t(k0 * g.dv + h * dvh, g.dv),
                0.0,
                &mut ds,
                View::rows(0, g.nk),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (ds_row, p_row) in ds.chunks_exact_mut(g.nk).zip(p.chunks_exact(g.nk)) {
                let dot: f64 = ds_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                for (x, &pp) in ds_row.iter_mut().zip(p_row) {
                    *x = pp * (*x - dot);
                }
            }
            gemm(
                g.nq,
                g.nk,
                dh,
                g.scale(),
                &ds,
                View::rows(0, g.nk),
                k,
                View::rows(k0 * g.d + h * dh, g.d),
                1.0,
                dq,
                View::rows(q0 * g.d + h * dh, g.d),
            );
            gemm(
                g.nk,
                g.nq,
                dh,
                g.scale(),
                &ds,
                View::t(0, g.nk),
                q,
                View::rows(q0 * g.d + h * dh, g.d),
                1.0,
                dk,
                View::rows(k0 * g.d + h * dh, g.d),
            );
        }
    }
}

/// Normalizes each row of width `c` to zero mean and unit variance.
/// Returns the normalized values and each row's `1/√(var+eps)`.
pub(crate) fn layer_norm_forward(x: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[r] = is;
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

/// Gradient of [`layer_norm_forward`] given its normalized output.
pub(crate) fn layer_norm_backward(xhat: &[f64], inv: &[f64], dout: &[f64], c: usize, dx: &mut [f64]) {
    for (r, &is) in inv.iter().enumerate() {
        let xh = &xhat[r * c..(r + 1) * c];
        let g = &dout[r * c..(r + 1) * c];
        let mg = g.iter().sum::<f64>() / c as f64;
        let mgx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for ((d, &gi), &xi) in dx[r * c..(r + 1) * c].iter_mut().zip(g).zip(xh) {
            *d += is * (gi - mg - xi * mgx);
        }
    }
}
