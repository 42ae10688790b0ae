use serde::Serialize;

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::Tensor;

/// Noise levels of the forward process.
///
/// `alpha_bar[t] = Π_{s ≤ t} (1 − beta[s])` for `t` in `0..T`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

const BASE_STEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

impl DiffusionSchedule {
    /// The latent-diffusion "scaled linear" schedule (betas linear in square
    /// root between 0.00085 and 0.012 over 1000 steps), subsampled with
    /// leading spacing to `timesteps` levels when fewer than 1000 are asked
    /// for. Level `t` uses the cumulative product of base step
    /// `⌊t · 1000 / T⌋`.
    pub fn scaled_linear(timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(config_err!("schedule needs at least one timestep"));
        }
        let base = BASE_STEPS.max(timesteps);
        let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut cumulative = Vec::with_capacity(base);
        let mut acc = 1.0;
        for i in 0..base {
            let frac = if base == 1 { 0.0 } else { i as f64 / (base - 1) as f64 };
            let b = (s0 + frac * (s1 - s0)).powi(2);
            acc *= 1.0 - b;
            cumulative.push(acc);
        }
        let alpha_bars = (0..timesteps).map(|t| cumulative[t * base / timesteps]).collect();
        Self::from_alpha_bars(alpha_bars)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(config_err!("empty beta sequence"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(config_err!("beta {b} outside (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Schedule from a strictly decreasing cumulative sequence in `(0, 1)`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(config_err!("empty alpha_bar sequence"));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &a in &alpha_bars {
            if !(a > 0.0 && a < prev) {
                return Err(config_err!("alpha_bar must decrease strictly within (0, 1)"));
            }
            betas.push(1.0 - a / prev);
            prev = a;
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::Domain(format!(
                "timestep {t} outside 0..{}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ · x0 + √(1 − ᾱ) · noise` for an explicit `alpha_bar`.
pub fn forward_noise(x0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(shape_err!(
            "noise shape {:?} differs from latent {:?}",
            noise.shape(),
            x0.shape()
        ));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Domain(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let out = x0.zip_with(noise, |x, n| a * x + s * n)?;
    Ok(out.to_dtype(x0.dtype()))
}

/// Forward diffusion to level `t`.
pub fn add_noise(x0: &Tensor, t: usize, schedule: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    forward_noise(x0, schedule.alpha_bar(t), noise)
}

/// Clean-sample estimate `(x_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_pred: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    if x_t.shape() != eps_pred.shape() {
        return Err(shape_err!("eps shape {:?} differs from x_t {:?}", eps_pred.shape(), x_t.shape()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_with(eps_pred, |x, e| (x - s * e) / a)?.to_dtype(x_t.dtype()))
}

/// One deterministic DDIM update from level `t` to `t − 1`. At `t = 0` the
/// clean estimate is returned. Only `eta = 0` is supported.
pub fn denoise_step(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    schedule: &DiffusionSchedule,
    eta: f64,
) -> Result<Tensor> {
    if eta != 0.0 {
        return Err(config_err!("only the deterministic sampler (eta = 0) is supported"));
    }
    schedule.check(t)?;
    if x_t.shape() != eps_pred.shape() {
        return Err(shape_err!("eps shape {:?} differs from x_t {:?}", eps_pred.shape(), x_t.shape()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    if t == 0 {
        return Ok(x_t.zip_with(eps_pred, |x, e| (x - s * e) / a)?.to_dtype(x_t.dtype()));
    }
    let abp = schedule.alpha_bar(t - 1);
    let (ap, sp) = (abp.sqrt(), (1.0 - abp).sqrt());
    let out = x_t.zip_with(eps_pred, |x, e| {
        let x0 = (x - s * e) / a;
        ap * x0 + sp * e
    })?;
    Ok(out.to_dtype(x_t.dtype()))
}
