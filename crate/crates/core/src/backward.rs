//! Implicit-function-theorem gradients of the BA solution with respect to the
//! revised targets and the confidence weights.
//!
//! At a stationary point `J^T W (p_bar - p_hat(x)) = 0`. Differentiating with
//! the Gauss-Newton Hessian `H = J^T W J` (damped as in the forward solve)
//! gives, for upstream gradients `g` on the free variables and `v = H^-1 g`,
//!
//! `dL/dp_bar_e = diag(sigma_e) J_e v` and `dL/dsigma_e = diag(r_e) J_e v`,
//!
//! where `J` is the Jacobian of `p_hat` (hence the positive sign).

use nalgebra::{DVector, Vector2};

use crate::ba::BASolution;
use crate::error::{Error, Result};
use crate::lie::Twist;

pub const DEFAULT_GAMMA_MIN: f64 = -0.01;
pub const DEFAULT_GAMMA_MAX: f64 = 0.01;

/// Gradients of a loss with respect to the BA outputs. Poses are indexed by
/// frame; entries for fixed frames are ignored by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct UpstreamGrads {
    pub grad_pose: Vec<Twist>,
    pub grad_depth: Vec<f64>,
}

impl UpstreamGrads {
    pub fn zeros(n_frames: usize, n_patches: usize) -> Self {
        Self {
            grad_pose: vec![Twist::zeros(); n_frames],
            grad_depth: vec![0.0; n_patches],
        }
    }

    pub fn add_scaled(&mut self, other: &UpstreamGrads, s: f64) {
        for (a, b) in self.grad_pose.iter_mut().zip(&other.grad_pose) {
            *a += b * s;
        }
        for (a, b) in self.grad_depth.iter_mut().zip(&other.grad_depth) {
            *a += b * s;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = Self::zeros(self.grad_pose.len(), self.grad_depth.len());
        out.add_scaled(self, s);
        out
    }

    pub fn zero_fixed(&mut self, n_fixed: usize) {
        for g in self.grad_pose.iter_mut().take(n_fixed) {
            *g = Twist::zeros();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grad_pose.iter().all(|g| g.iter().all(|x| *x == 0.0))
            && self.grad_depth.iter().all(|x| *x == 0.0)
    }

    /// Poses (6 per frame) followed by depths.
    pub fn flatten(&self) -> Vec<f64> {
        self.grad_pose
            .iter()
            .flat_map(|g| g.iter().copied())
            .chain(self.grad_depth.iter().copied())
            .collect()
    }
}

/// Gradients with respect to the BA inputs, one 2-vector per edge.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGrads {
    pub grad_delta: Vec<Vector2<f64>>,
    pub grad_sigma: Vec<Vector2<f64>>,
}

impl InputGrads {
    pub fn zeros(n_edges: usize) -> Self {
        Self {
            grad_delta: vec![Vector2::zeros(); n_edges],
            grad_sigma: vec![Vector2::zeros(); n_edges],
        }
    }

    pub fn flat_delta(&self) -> Vec<f64> {
        self.grad_delta.iter().flat_map(|g| [g.x, g.y]).collect()
    }

    pub fn flat_sigma(&self) -> Vec<f64> {
        self.grad_sigma.iter().flat_map(|g| [g.x, g.y]).collect()
    }
}

/// How the pose and depth blocks of the damped Hessian are inverted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardMode {
    /// Full inverse through the Schur complement.
    #[default]
    Joint,
    /// Pose and depth blocks inverted independently, without the coupling.
    Separated,
}

/// `v = H_damped^-1 g` restricted to the free variables.
pub fn solve_adjoint(
    sol: &BASolution,
    up: &UpstreamGrads,
    mode: BackwardMode,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let cache = sol.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
    if up.grad_pose.len() != sol.poses.len() || up.grad_depth.len() != sol.depths.len() {
        return Err(Error::InvalidInput("upstream gradient shape mismatch".into()));
    }
    let nf = sol.n_free_poses();
    let g_t = DVector::from_iterator(
        6 * nf,
        up.grad_pose[sol.n_fixed..].iter().flat_map(|g| g.iter().copied()),
    );
    let g_d = DVector::from_column_slice(&up.grad_depth);
    match mode {
        BackwardMode::Joint => Ok(cache.fact.solve(&g_t, &g_d)),
        BackwardMode::Separated => cache.fact.solve_separated(&g_t, &g_d),
    }
}

/// `J_e v` for every edge.
pub fn edge_tangents(sol: &BASolution, v_t: &DVector<f64>, v_d: &DVector<f64>) -> Vec<Vector2<f64>> {
    let cache = sol.cache.as_ref().expect("solution without cache");
    let nfix = sol.n_fixed;
    cache
        .edges
        .iter()
        .zip(&sol.linearization)
        .map(|(e, jc)| {
            let mut t = jc.j_depth * v_d[e.k];
            if e.j >= nfix {
                t += jc.j_target * v_t.fixed_rows::<6>(6 * (e.j - nfix));
            }
            if e.i >= nfix {
                t += jc.j_source * v_t.fixed_rows::<6>(6 * (e.i - nfix));
            }
            t
        })
        .collect()
}

/// Componentwise `diag_e * tangent_e`. Both input gradients are this
/// contraction: with the weights for the targets and with the residuals for
/// the weights.
pub fn contract(diag: &[Vector2<f64>], tangents: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    diag.iter().zip(tangents).map(|(d, t)| d.component_mul(t)).collect()
}

pub fn ba_backward(sol: &BASolution, up: &UpstreamGrads) -> Result<InputGrads> {
    ba_backward_with(sol, up, BackwardMode::Joint)
}

pub fn ba_backward_with(sol: &BASolution, up: &UpstreamGrads, mode: BackwardMode) -> Result<InputGrads> {
    let (v_t, v_d) = solve_adjoint(sol, up, mode)?;
    let cache = sol.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
    let tangents = edge_tangents(sol, &v_t, &v_d);
    Ok(InputGrads {
        grad_delta: contract(&cache.weights, &tangents),
        grad_sigma: contract(&sol.residuals, &tangents),
    })
}

/// Clamp the weight gradients componentwise; target gradients pass through.
pub fn clip_weight_grad(g: &InputGrads, gamma_min: f64, gamma_max: f64) -> InputGrads {
    debug_assert!(gamma_min <= gamma_max);
    InputGrads {
        grad_delta: g.grad_delta.clone(),
        grad_sigma: g
            .grad_sigma
            .iter()
            .map(|s| s.map(|x| x.clamp(gamma_min, gamma_max)))
            .collect(),
    }
}
