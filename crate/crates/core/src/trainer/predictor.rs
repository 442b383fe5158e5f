//! Per-edge flow-revision and confidence predictor: one shared tanh hidden
//! layer, an affine revision head scaled to pixels, and a sigmoid weight head.
//!
//! Parameter layout: `W1` (hidden x 7, row-major), `Wd` (2 x hidden), `bd`,
//! `Ws` (2 x hidden), `bs`.

use std::ops::Range;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `[r / s, prev_delta / s, prev_sigma, 1]`.
pub const N_FEATURES: usize = 7;
pub type Features = [f64; N_FEATURES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub hidden: usize,
    /// Pixel scale shared by the residual features and the revision head.
    pub scale: f64,
    pub theta: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    hidden: Vec<f64>,
    sigma: Vec<Vector2<f64>>,
}

pub fn features(residual: &Vector2<f64>, prev_delta: &Vector2<f64>, prev_sigma: &Vector2<f64>, scale: f64) -> Features {
    [
        residual.x / scale,
        residual.y / scale,
        prev_delta.x / scale,
        prev_delta.y / scale,
        prev_sigma.x,
        prev_sigma.y,
        1.0,
    ]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Predictor {
    pub fn n_params(hidden: usize) -> usize {
        hidden * N_FEATURES + 4 * hidden + 4
    }

    pub fn zeros(hidden: usize, scale: f64) -> Self {
        Self {
            hidden,
            scale,
            theta: vec![0.0; Self::n_params(hidden)],
        }
    }

    /// Gaussian initialization: unit-variance pre-activations for the hidden
    /// layer and heads scaled by `head_std`.
    pub fn random(hidden: usize, scale: f64, head_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(hidden, scale);
        let w1 = (1.0 / N_FEATURES as f64).sqrt();
        let hs = head_std / (hidden as f64).sqrt();
        for (n, t) in p.theta.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *t = if n < hidden * N_FEATURES {
                w1 * z
            } else if p_is_bias(n, hidden) {
                0.0
            } else {
                hs * z
            };
        }
        p
    }

    fn w1(&self) -> Range<usize> {
        0..self.hidden * N_FEATURES
    }

    /// Parameters of the revision head (`Wd`, `bd`).
    pub fn delta_head(&self) -> Range<usize> {
        let o = self.hidden * N_FEATURES;
        o..o + 2 * self.hidden + 2
    }

    /// Parameters of the weight head (`Ws`, `bs`).
    pub fn sigma_head(&self) -> Range<usize> {
        let o = self.hidden * N_FEATURES + 2 * self.hidden + 2;
        o..o + 2 * self.hidden + 2
    }

    /// Revisions (pixels) and weights in `(0, 1)` for every edge.
    pub fn forward(&self, feats: &[Features]) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>, ForwardCache) {
        let h = self.hidden;
        let w1 = &self.theta[self.w1()];
        let dh = &self.theta[self.delta_head()];
        let sh = &self.theta[self.sigma_head()];
        let mut cache = ForwardCache {
            hidden: Vec::with_capacity(h * feats.len()),
            sigma: Vec::with_capacity(feats.len()),
        };
        let mut delta = Vec::with_capacity(feats.len());
        let mut sigma = Vec::with_capacity(feats.len());
        for f in feats {
            let start = cache.hidden.len();
            for r in 0..h {
                let row = &w1[r * N_FEATURES..(r + 1) * N_FEATURES];
                let a: f64 = row.iter().zip(f).map(|(w, x)| w * x).sum();
                cache.hidden.push(a.tanh());
            }
            let hv = &cache.hidden[start..];
            let head = |p: &[f64], o: usize| -> f64 {
                p[o * h..(o + 1) * h].iter().zip(hv).map(|(w, x)| w * x).sum::<f64>() + p[2 * h + o]
            };
            delta.push(Vector2::new(head(dh, 0), head(dh, 1)) * self.scale);
            let s = Vector2::new(sigmoid(head(sh, 0)), sigmoid(head(sh, 1)));
            cache.sigma.push(s);
            sigma.push(s);
        }
        (delta, sigma, cache)
    }

    /// Accumulate `d(g_delta . delta + g_sigma . sigma)/d theta` into `grad`
    /// and return the gradient with respect to every feature vector.
    pub fn backward(
        &self,
        feats: &[Features],
        cache: &ForwardCache,
        g_delta: &[Vector2<f64>],
        g_sigma: &[Vector2<f64>],
        grad: &mut [f64],
    ) -> Vec<Features> {
        let h = self.hidden;
        let (rw1, rd, rs) = (self.w1(), self.delta_head(), self.sigma_head());
        let mut g_feats = Vec::with_capacity(feats.len());
        let mut g_hidden = vec![0.0; h];
        for (n, f) in feats.iter().enumerate() {
            let hv = &cache.hidden[n * h..(n + 1) * h];
            let gd = g_delta[n] * self.scale;
            let s = cache.sigma[n];
            let gs = Vector2::new(
                g_sigma[n].x * s.x * (1.0 - s.x),
                g_sigma[n].y * s.y * (1.0 - s.y),
            );
            g_hidden.iter_mut().for_each(|x| *x = 0.0);
            for (range, g) in [(&rd, &gd), (&rs, &gs)] {
                let p = &self.theta[range.clone()];
                for o in 0..2 {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        grad[range.start + o * h + r] += go * hv[r];
                        g_hidden[r] += go * p[o * h + r];
                    }
                    grad[range.start + 2 * h + o] += go;
                }
            }
            let mut gf = [0.0; N_FEATURES];
            let w1 = &self.theta[rw1.clone()];
            for r in 0..h {
                let ga = g_hidden[r] * (1.0 - hv[r] * hv[r]);
                if ga == 0.0 {
                    continue;
                }
                for c in 0..N_FEATURES {
                    grad[rw1.start + r * N_FEATURES + c] += ga * f[c];
                    gf[c] += ga * w1[r * N_FEATURES + c];
                }
            }
            g_feats.push(gf);
        }
        g_feats
    }
}

fn p_is_bias(n: usize, hidden: usize) -> bool {
    let o = hidden * N_FEATURES;
    n == o + 2 * hidden || n == o + 2 * hidden + 1 || n == o + 4 * hidden + 2 || n == o + 4 * hidden + 3
}

/// Convenience wrapper over [`Predictor::forward`].
pub fn predictor_forward(p: &Predictor, feats: &[Features]) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
    let (d, s, _) = p.forward(feats);
    (d, s)
}

/// Gradient of `g_delta . delta + g_sigma . sigma` with respect to theta.
pub fn predictor_backward(
    p: &Predictor,
    feats: &[Features],
    g_delta: &[Vector2<f64>],
    g_sigma: &[Vector2<f64>],
) -> Vec<f64> {
    let (_, _, cache) = p.forward(feats);
    let mut g = vec![0.0; p.theta.len()];
    p.backward(feats, &cache, g_delta, g_sigma, &mut g);
    g
}
