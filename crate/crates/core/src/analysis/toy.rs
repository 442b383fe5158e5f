//! Scalar weighted least squares: `f* = argmin_f 1/2 sum_i s_i (f - fhat_i)^2`
//! under the outer loss `|f_gt - f*|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn toy_wls_solve(fhat: &[f64], sigma: &[f64]) -> Result<f64> {
    let s: f64 = sigma.iter().sum();
    if !(s > 0.0) {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    Ok(fhat.iter().zip(sigma).map(|(f, w)| f * w).sum::<f64>() / s)
}

/// `d|f_gt - f*| / d s_i = -sign(f* - f_gt) (f* - fhat_i) / sum(s)`, or zeros
/// when `f* = f_gt`.
pub fn toy_weight_grad(fhat: &[f64], sigma: &[f64], f_gt: f64) -> Result<Vec<f64>> {
    let fs = toy_wls_solve(fhat, sigma)?;
    let s: f64 = sigma.iter().sum();
    if fs == f_gt {
        return Ok(vec![0.0; fhat.len()]);
    }
    let sign = (fs - f_gt).signum();
    Ok(fhat.iter().map(|f| -sign * (fs - f) / s).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBiasConfig {
    pub n_points: usize,
    pub outlier_frac: f64,
    pub sigma_in: f64,
    pub sigma_out: f64,
    pub init_logit: f64,
    pub lr: f64,
    pub steps: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for ToyBiasConfig {
    fn default() -> Self {
        Self {
            n_points: 20,
            outlier_frac: 0.2,
            sigma_in: 1.0,
            sigma_out: 20.0,
            init_logit: 2.0,
            lr: 1.0,
            steps: 400,
            gamma_min: -0.01,
            gamma_max: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBiasRun {
    /// Mean weight after each step, starting with the initial value.
    pub mean_weight: Vec<f64>,
}

impl ToyBiasRun {
    pub fn final_mean(&self) -> f64 {
        *self.mean_weight.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBiasSummary {
    pub seed: u64,
    pub unclipped: ToyBiasRun,
    pub clipped: ToyBiasRun,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradient descent on per-slot sigmoid logits. Every step redraws the
/// observations (each slot an outlier with probability `outlier_frac`) around
/// `f_gt = 0` and applies the weight gradient, clamped to `[lo, hi]`.
pub fn toy_bias_run(cfg: &ToyBiasConfig, lo: f64, hi: f64, seed: u64) -> Result<ToyBiasRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = vec![cfg.init_logit; cfg.n_points];
    let mean = |l: &[f64]| l.iter().map(|x| sigmoid(*x)).sum::<f64>() / l.len() as f64;
    let mut out = vec![mean(&logits)];
    let mut fhat = vec![0.0; cfg.n_points];
    for _ in 0..cfg.steps {
        for f in fhat.iter_mut() {
            let outlier = rng.random::<f64>() < cfg.outlier_frac;
            let z: f64 = rng.sample(StandardNormal);
            *f = z * if outlier { cfg.sigma_out } else { cfg.sigma_in };
        }
        let w: Vec<f64> = logits.iter().map(|x| sigmoid(*x)).collect();
        let g = toy_weight_grad(&fhat, &w, 0.0)?;
        for ((l, gi), wi) in logits.iter_mut().zip(&g).zip(&w) {
            *l -= cfg.lr * gi.clamp(lo, hi) * wi * (1.0 - wi);
        }
        out.push(mean(&logits));
    }
    Ok(ToyBiasRun { mean_weight: out })
}

/// Both arms share each seed's observation stream.
pub fn toy_bias_experiment(cfg: &ToyBiasConfig, seeds: &[u64]) -> Result<Vec<ToyBiasSummary>> {
    seeds
        .iter()
        .map(|&seed| {
            Ok(ToyBiasSummary {
                seed,
                unclipped: toy_bias_run(cfg, f64::NEG_INFINITY, f64::INFINITY, seed)?,
                clipped: toy_bias_run(cfg, cfg.gamma_min, cfg.gamma_max, seed)?,
            })
        })
        .collect()
}
