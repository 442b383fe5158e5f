//! Finite-difference checks of the BA input gradients through full re-solves.

use nalgebra::{SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ba::{ba_solve, BAConfig, BASolution};
use crate::backward::{ba_backward, InputGrads, UpstreamGrads};
use crate::error::{Error, Result};
use crate::lie::Twist;
use crate::scene::PatchGraph;
use crate::synth::{generate_scene, SynthConfig};

use super::{fd_gradient, rel_error};

/// Random upstream gradients on the free variables of `sol`.
pub fn random_upstream(sol: &BASolution, seed: u64) -> UpstreamGrads {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut up = UpstreamGrads::zeros(sol.poses.len(), sol.depths.len());
    for g in up.grad_pose.iter_mut().skip(sol.n_fixed) {
        *g = Twist::from_fn(|_, _| rng.sample(StandardNormal));
    }
    for d in &mut up.grad_depth {
        *d = rng.sample(StandardNormal);
    }
    up
}

/// Linear functional of a solution around `base` whose gradient with respect
/// to the outputs is exactly `up`: pose terms read the left-perturbation
/// twist `Log(T T_base^-1)`, depth terms the depth offset.
pub fn linear_readout(base: &BASolution, up: &UpstreamGrads, sol: &BASolution) -> Result<f64> {
    let mut v = 0.0;
    for f in base.n_fixed..base.poses.len() {
        let xi = sol.poses[f].compose(&base.poses[f].inverse()).log()?;
        v += up.grad_pose[f].dot(&xi);
    }
    for (k, g) in up.grad_depth.iter().enumerate() {
        v += g * (sol.depths[k] - base.depths[k]);
    }
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub analytic: InputGrads,
    pub fd_delta: Vec<f64>,
    pub fd_sigma: Vec<f64>,
    pub rel_err_delta: f64,
    pub rel_err_sigma: f64,
    pub condition: f64,
}

/// Condition number of the damped reduced pose system.
pub fn reduced_condition(sol: &BASolution) -> Option<f64> {
    let cache = sol.cache.as_ref()?;
    let ch = cache.fact.s_chol.as_ref()?;
    let l = ch.l();
    let s = &l * l.transpose();
    let ev = SymmetricEigen::new(s).eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(0.0, f64::max);
    Some(hi / lo)
}

/// Compare `ba_backward` against central differences of `linear_readout`
/// through re-solves started from the converged solution.
pub fn ba_input_oracle(
    graph: &PatchGraph,
    cfg: &BAConfig,
    upstream_seed: u64,
    h_delta: f64,
    h_sigma: f64,
) -> Result<OracleResult> {
    let base = ba_solve(graph, cfg)?;
    if base.last_step_norm >= cfg.tol.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidInput(format!(
            "base solve did not converge (step {:e})",
            base.last_step_norm
        )));
    }
    let start = base.apply_to(graph);
    let up = random_upstream(&base, upstream_seed);
    let analytic = ba_backward(&base, &up)?;

    let eval = |g: &PatchGraph| -> f64 {
        match ba_solve(g, cfg) {
            Ok(s) => linear_readout(&base, &up, &s).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        }
    };

    let targets: Vec<f64> = start.edges.iter().flat_map(|e| [e.target.x, e.target.y]).collect();
    let fd_delta = fd_gradient(
        |x| {
            let mut g = start.clone();
            for (n, e) in g.edges.iter_mut().enumerate() {
                e.target = Vector2::new(x[2 * n], x[2 * n + 1]);
            }
            eval(&g)
        },
        &targets,
        h_delta,
    )?;
    let weights: Vec<f64> = start.edges.iter().flat_map(|e| [e.weight.x, e.weight.y]).collect();
    let fd_sigma = fd_gradient(
        |x| {
            let mut g = start.clone();
            for (n, e) in g.edges.iter_mut().enumerate() {
                e.weight = Vector2::new(x[2 * n], x[2 * n + 1]);
            }
            eval(&g)
        },
        &weights,
        h_sigma,
    )?;
    let rel_err_delta = rel_error(&analytic.flat_delta(), &fd_delta, 1e-12);
    let rel_err_sigma = rel_error(&analytic.flat_sigma(), &fd_sigma, 1e-12);
    Ok(OracleResult {
        analytic,
        fd_delta,
        fd_sigma,
        rel_err_delta,
        rel_err_sigma,
        condition: reduced_condition(&base).unwrap_or(1.0),
    })
}

/// A small, well-conditioned problem: two anchored poses fix the monocular
/// scale, inlier noise is small so the Gauss-Newton Hessian is close to the
/// exact one, and the weights are random in `[0.2, 1]`.
pub fn oracle_problem(seed: u64) -> Result<(PatchGraph, BAConfig)> {
    let scfg = SynthConfig {
        n_frames: 4,
        patches_per_frame: 4,
        radius: 3,
        sigma_in: 0.001,
        outlier_frac: 0.0,
        seed,
        ..Default::default()
    };
    let (mut g, _) = generate_scene(&scfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for e in &mut g.edges {
        e.weight = Vector2::new(rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
    }
    let cfg = BAConfig {
        n_fixed_poses: 2,
        lambda: 1e-9,
        ..BAConfig::converged()
    };
    Ok((g, cfg))
}
