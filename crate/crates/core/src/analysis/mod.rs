//! Gradient-noise analysis: finite-difference oracle, SNR metrics, the
//! noise-injection sweeps, and the scalar weighted-least-squares model.

mod experiments;
mod oracle;
mod toy;

pub use experiments::*;
pub use oracle::*;
pub use toy::*;

use crate::error::{Error, Result};

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = xp[i];
        xp[i] = x0 + h;
        let fp = f(&xp);
        xp[i] = x0 - h;
        let fm = f(&xp);
        xp[i] = x0;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::OracleDomain { index: i });
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `|a - b| / max(|b|, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    diff_norm(a, b) / norm(b).max(floor)
}

/// Signal-to-noise ratio of a perturbed gradient against the clean one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Snr {
    Finite(f64),
    /// Noise magnitude was zero.
    Infinite,
}

impl Snr {
    pub fn value(&self) -> Option<f64> {
        match self {
            Snr::Finite(v) => Some(*v),
            Snr::Infinite => None,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        matches!(self, Snr::Infinite)
    }
}

/// `10 log10(|clean| / |noisy - clean|)`.
pub fn snr_db(clean: &[f64], noisy: &[f64]) -> Snr {
    let noise = diff_norm(noisy, clean);
    if noise == 0.0 {
        return Snr::Infinite;
    }
    Snr::Finite(10.0 * (norm(clean) / noise).log10())
}

/// `|mean| / mean_i |g_i - mean|` over a batch of gradients.
pub fn batch_snr(grads: &[Vec<f64>]) -> Result<Snr> {
    if grads.len() < 2 {
        return Err(Error::InvalidInput("batch SNR needs at least two gradients".into()));
    }
    let n = grads[0].len();
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::InvalidInput("gradients differ in length".into()));
    }
    let mut mean = vec![0.0; n];
    for g in grads {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x;
        }
    }
    let m = grads.len() as f64;
    mean.iter_mut().for_each(|x| *x /= m);
    let noise = grads.iter().map(|g| diff_norm(g, &mean)).sum::<f64>() / m;
    if noise == 0.0 {
        return Ok(Snr::Infinite);
    }
    Ok(Snr::Finite(norm(&mean) / noise))
}

/// Median of the finite values; `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Number of adjacent pairs breaking the requested monotone order.
pub fn monotone_violations(values: &[f64], increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if increasing { w[1] <= w[0] } else { w[1] >= w[0] })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_quadratic_and_linear() {
        let x = [0.3, -1.2, 2.0];
        let g = fd_gradient(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
        let g = fd_gradient(|v| 3.0 * v[0] - 0.5 * v[1] + 2.0, &[1.0, 1.0], 0.5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-14 && (g[1] + 0.5).abs() < 1e-14);
        let e = fd_gradient(|v| if v[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-3);
        assert_eq!(e.unwrap_err(), Error::OracleDomain { index: 0 });
    }

    #[test]
    fn snr_examples() {
        let c = [3.0, 4.0];
        assert!((snr_db(&c, &[6.0, 8.0]).value().unwrap()).abs() < 1e-12);
        assert!((snr_db(&c, &[3.3, 4.4]).value().unwrap() - 10.0).abs() < 1e-9);
        assert!(snr_db(&c, &c).is_sentinel());
        for eps in [1e-2, 1e-4, 1e-8] {
            let v = snr_db(&c, &[3.0 + eps, 4.0]).value().unwrap();
            assert!(v > 10.0 * (5.0 / eps).log10() - 1e-6);
        }
    }

    #[test]
    fn batch_snr_examples() {
        let g = vec![1.0, 2.0];
        assert!(batch_snr(&[g.clone(), g.clone(), g.clone()]).unwrap().is_sentinel());
        let ng: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_eq!(batch_snr(&[g.clone(), ng]).unwrap().value(), Some(0.0));
        assert!(batch_snr(&[g]).is_err());
    }

    #[test]
    fn median_and_violations() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
        assert_eq!(monotone_violations(&[1.0, 2.0, 1.5, 3.0], true), 1);
        assert_eq!(monotone_violations(&[3.0, 2.0, 1.0], false), 0);
    }
}
