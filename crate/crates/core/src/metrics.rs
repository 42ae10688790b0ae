//! Evaluation metrics over images and pluggable feature sets.
//!
//! [`frechet_distance`] is the squared 2-Wasserstein distance between two
//! Gaussians, the quantity behind FID and FVD; the feature extractor is up
//! to the caller. [`sync_confidence`] scores audio/visual embedding streams
//! by how sharply their distance curve dips over temporal offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{lltf, Tensor};

const SYMMETRY_TOL: f64 = 1e-8;
const PSD_TOL: f64 = 1e-8;

/// Mean structural similarity over every fully contained `window × window`
/// patch, with population statistics per patch.
///
/// A luminance or contrast factor whose denominator is exactly zero is taken
/// as 1, so identical images score 1 even with `c1 = c2 = 0`.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, c1: f64, c2: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = a.dims2().map_err(|_| Error::Input(format!("ssim expects H×W images, got {:?}", a.shape())))?;
    if window % 2 == 0 || window > h.min(w) {
        return Err(config_err!("ssim window must be odd and at most {}, got {window}", h.min(w)));
    }
    if !(c1 >= 0.0 && c2 >= 0.0 && c1.is_finite() && c2.is_finite()) {
        return Err(config_err!("ssim constants must be finite and nonnegative"));
    }
    let (ad, bd) = (a.data(), b.data());
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - window {
        for x0 in 0..=w - window {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    sa += ad[y * w + x];
                    sb += bd[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let (da, db) = (ad[y * w + x] - ma, bd[y * w + x] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            let lum_d = ma * ma + mb * mb + c1;
            let cs_d = va + vb + c2;
            let lum = if lum_d == 0.0 { 1.0 } else { (2.0 * ma * mb + c1) / lum_d };
            let cs = if cs_d == 0.0 { 1.0 } else { (2.0 * cov + c2) / cs_d };
            total += lum * cs;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// [`ssim`] averaged over the trailing `H × W` planes of equally shaped
/// tensors of rank ≥ 2.
pub fn ssim_planes(a: &Tensor, b: &Tensor, window: usize, c1: f64, c2: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() < 2 {
        return Err(Error::Input(format!(
            "ssim inputs must share a shape of rank ≥ 2: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let r = a.rank();
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    let planes = a.len() / (h * w);
    let mut sum = 0.0;
    for p in 0..planes {
        let range = p * h * w..(p + 1) * h * w;
        let pa = Tensor::new([h, w], a.data()[range.clone()].to_vec())?;
        let pb = Tensor::new([h, w], b.data()[range].to_vec())?;
        sum += ssim(&pa, &pb, window, c1, c2)?;
    }
    Ok(sum / planes as f64)
}

/// Mean and covariance of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    mean: Vec<f64>,
    /// Row-major `d × d`.
    cov: Vec<f64>,
}

impl GaussianMoments {
    /// Checks that `cov` is `d × d`, symmetric and positive semidefinite up to
    /// a relative `1e-8`.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(shape_err!("covariance must be {d}×{d} for a mean of length {d}"));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::Input("moments contain non-finite values".into()));
        }
        let scale = cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in i + 1..d {
                if (cov[i * d + j] - cov[j * d + i]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::Input(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        let (vals, _) = symmetric_eigen(&symmetrize(&cov, d), d);
        if vals.iter().any(|&l| l < -PSD_TOL * scale) {
            return Err(Error::Input("covariance is not positive semidefinite".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }
}

/// Sample mean and unbiased covariance of the rows of `features` (`N × d`).
pub fn fit_moments(features: &Tensor) -> Result<GaussianMoments> {
    let (n, d) = features
        .dims2()
        .map_err(|_| Error::Input(format!("features must be N×d, got {:?}", features.shape())))?;
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 feature rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = features.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    GaussianMoments::new(mean, cov)
}

fn symmetrize(m: &[f64], d: usize) -> Vec<f64> {
    let mut out = m.to_vec();
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (m[i * d + j] + m[j * d + i]);
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the row-major eigenvector matrix (eigenvectors in
/// columns).
pub fn symmetric_eigen(m: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clipped
/// to zero.
pub fn sqrt_psd(m: &[f64], d: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(&symmetrize(m, d), d);
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| vecs[i * d + k] * roots[k] * vecs[j * d + k]).sum();
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Sum of singular values of a row-major `d × d` matrix, by one-sided
/// Jacobi rotations on its columns.
fn nuclear_norm(m: &[f64], d: usize) -> f64 {
    let mut u = m.to_vec();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..d {
                    let (up, uq) = (u[k * d + p], u[k * d + q]);
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..d {
                    let (up, uq) = (u[k * d + p], u[k * d + q]);
                    u[k * d + p] = c * up - s * uq;
                    u[k * d + q] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (0..d)
        .map(|j| (0..d).map(|k| u[k * d + j] * u[k * d + j]).sum::<f64>().sqrt())
        .sum()
}

/// Squared Fréchet distance
/// `|μA − μB|² + Tr(ΣA + ΣB − 2 (ΣA^½ ΣB ΣA^½)^½)`, clamped at 0.
///
/// The trace of the cross term equals the sum of singular values of
/// `ΣB^½ ΣA^½`, which is what gets computed.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Input(format!("moment dimensions differ: {d} vs {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let cross = matmul(&sqrt_psd(&b.cov, d), &sqrt_psd(&a.cov, d), d);
    let tr_cross = nuclear_norm(&cross, d);
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_cross).max(0.0))
}

/// Per-frame embeddings of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStream {
    /// `T × d`.
    pub values: Tensor,
    pub frame_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSidecar {
    pub frame_rate: f64,
}

impl EmbeddingStream {
    pub fn new(values: Tensor, frame_rate: f64) -> Result<Self> {
        if values.rank() != 2 {
            return Err(shape_err!("embedding stream must be T×d, got {:?}", values.shape()));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(config_err!("frame_rate must be positive, got {frame_rate}"));
        }
        Ok(Self { values, frame_rate })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    /// Reads `path` (rank-2 LLTF) and its `.json` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let values = lltf::read_rank(path, 2)?;
        let side = path.with_extension("json");
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: StreamSidecar = serde_json::from_str(&text)?;
        Self::new(values, sidecar.frame_rate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        lltf::write(path, &self.values)?;
        let side = path.with_extension("json");
        let body = crate::json::to_pretty_sorted(&StreamSidecar {
            frame_rate: self.frame_rate,
        })?;
        fs::write(&side, body).map_err(|e| Error::io(&side, e))
    }
}

pub const DEFAULT_MAX_OFFSET: usize = 15;

/// Distance curve over offsets and its summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    /// Audio frame `i + best_offset` best matches video frame `i`.
    pub best_offset: i64,
    /// `median(D) − min(D)`.
    pub confidence: f64,
    /// `(offset, D(offset))` for every offset with a nonempty overlap.
    pub curve: Vec<(i64, f64)>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// For each offset `o` in `−max_offset..=max_offset`, `D(o)` is the mean of
/// `1 − cos(video[i], audio[i + o])` over overlapping frames. Ties in the
/// argmin go to the offset of smallest magnitude, then the negative one.
pub fn sync_confidence(video: &EmbeddingStream, audio: &EmbeddingStream, max_offset: usize) -> Result<SyncResult> {
    if (video.frame_rate - audio.frame_rate).abs() > 1e-9 * video.frame_rate.max(audio.frame_rate) {
        return Err(Error::Input(format!(
            "frame rates differ: {} vs {}",
            video.frame_rate, audio.frame_rate
        )));
    }
    if video.values.shape()[1] != audio.values.shape()[1] {
        return Err(Error::Input(format!(
            "embedding widths differ: {} vs {}",
            video.values.shape()[1],
            audio.values.shape()[1]
        )));
    }
    let (tv, ta) = (video.frames() as i64, audio.frames() as i64);
    let m = max_offset as i64;
    let mut curve = Vec::new();
    for o in -m..=m {
        let lo = 0.max(-o);
        let hi = tv.min(ta - o);
        if hi <= lo {
            continue;
        }
        let sum: f64 = (lo..hi)
            .map(|i| 1.0 - cosine(video.values.row(i as usize), audio.values.row((i + o) as usize)))
            .sum();
        curve.push((o, sum / (hi - lo) as f64));
    }
    if curve.is_empty() {
        return Err(Error::Input("streams do not overlap at any tested offset".into()));
    }
    let &(best_offset, min_d) = curve
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.abs().cmp(&b.0.abs())).then(a.0.cmp(&b.0)))
        .expect("nonempty");
    let mut sorted: Vec<f64> = curve.iter().map(|c| c.1).collect();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    Ok(SyncResult {
        best_offset,
        confidence: (median - min_d).max(0.0),
        curve,
    })
}
