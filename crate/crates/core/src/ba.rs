//! Weighted bundle adjustment: damped Gauss-Newton over free poses and patch
//! depths with the depths eliminated by a Schur complement.
//!
//! Unknowns are left-perturbation twists of the poses with index
//! `>= n_fixed_poses`, followed by one scalar per patch depth. The residual
//! of an edge is `r = p_bar - p_hat` and the objective is
//! `sum_e r_e^T diag(sigma_e) r_e`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{Pose, Twist};
use crate::projective::{reproject_with_jacobians, Intrinsics, ProjJacobians, DEFAULT_Z_MIN};
use crate::scene::{PatchGraph, DEFAULT_D_MAX, DEFAULT_D_MIN};

/// Absolute damping added to every constrained depth block. With zero
/// baseline the depth Hessian is numerically tiny but not zero, and the
/// multiplicative damping alone cannot regularize it.
pub const DEPTH_DAMPING_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BAConfig {
    pub n_iters: usize,
    /// Multiplicative damping on the Hessian diagonal.
    pub lambda: f64,
    pub n_fixed_poses: usize,
    pub z_min: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Stop early once the step norm drops below this value (0 disables).
    pub tol: f64,
}

impl Default for BAConfig {
    fn default() -> Self {
        Self {
            n_iters: 2,
            lambda: 1e-4,
            n_fixed_poses: 1,
            z_min: DEFAULT_Z_MIN,
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
            tol: 0.0,
        }
    }
}

impl BAConfig {
    /// Settings for solving to a fixed point.
    pub fn converged() -> Self {
        Self {
            n_iters: 50,
            tol: 1e-10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::InvalidInput("n_iters must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("damping must be >= 0, got {}", self.lambda)));
        }
        if self.n_fixed_poses == 0 {
            return Err(Error::InvalidInput("at least one pose must be fixed".into()));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::InvalidInput(format!(
                "bad depth bounds [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

/// Edge topology copied out of the graph: patch, source frame, target frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeIndex {
    pub k: usize,
    pub i: usize,
    pub j: usize,
}

/// Damped normal equations with the depth block eliminated.
#[derive(Clone, Debug)]
pub(crate) struct Factorization {
    pub n_free: usize,
    pub b_damped: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// `1 / C'` per depth, zero for unconstrained depths.
    pub c_inv: DVector<f64>,
    pub s_chol: Option<Cholesky<f64, Dyn>>,
}

impl Factorization {
    fn new(sys: &NormalSystem, lambda: f64) -> Result<Self> {
        let n_free = sys.b.nrows();
        let mut b_damped = sys.b.clone();
        for d in 0..n_free {
            b_damped[(d, d)] *= 1.0 + lambda;
        }
        let c_inv = sys.c.map(|c| {
            if c > 0.0 {
                1.0 / (c * (1.0 + lambda) + DEPTH_DAMPING_FLOOR)
            } else {
                0.0
            }
        });
        let s_chol = if n_free > 0 {
            let mut e_scaled = sys.e.clone();
            for (mut col, ci) in e_scaled.column_iter_mut().zip(c_inv.iter()) {
                col *= *ci;
            }
            let s = &b_damped - e_scaled * sys.e.transpose();
            Some(Cholesky::new(s).ok_or(Error::IllPosedWindow)?)
        } else {
            None
        };
        Ok(Self {
            n_free,
            b_damped,
            e: sys.e.clone(),
            c_inv,
            s_chol,
        })
    }

    /// Solve `(H + lambda diag(H)) [x_t; x_d] = [g_t; g_d]`.
    pub fn solve(&self, g_t: &DVector<f64>, g_d: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let x_t = match &self.s_chol {
            Some(ch) => {
                let rhs = g_t - &self.e * g_d.component_mul(&self.c_inv);
                ch.solve(&rhs)
            }
            None => DVector::zeros(0),
        };
        let x_d = (g_d - self.e.transpose() * &x_t).component_mul(&self.c_inv);
        (x_t, x_d)
    }

    /// Solve the pose and depth blocks independently, dropping the coupling.
    pub fn solve_separated(
        &self,
        g_t: &DVector<f64>,
        g_d: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let x_t = if self.n_free > 0 {
            Cholesky::new(self.b_damped.clone())
                .ok_or(Error::IllPosedWindow)?
                .solve(g_t)
        } else {
            DVector::zeros(0)
        };
        Ok((x_t, g_d.component_mul(&self.c_inv)))
    }
}

/// Everything the backward pass needs from the forward solve.
#[derive(Clone, Debug)]
pub(crate) struct SolveCache {
    pub edges: Vec<EdgeIndex>,
    /// Confidence weights with invalid edges zeroed.
    pub weights: Vec<Vector2<f64>>,
    pub centers: Vec<Vector2<f64>>,
    pub intrinsics: Intrinsics,
    pub cfg: BAConfig,
    pub fact: Factorization,
}

#[derive(Clone, Debug)]
pub struct BASolution {
    pub poses: Vec<Pose>,
    pub depths: Vec<f64>,
    pub n_fixed: usize,
    /// `p_hat` per edge at the final iterate.
    pub reprojections: Vec<Vector2<f64>>,
    /// `p_bar - p_hat` per edge at the final iterate.
    pub residuals: Vec<Vector2<f64>>,
    /// False where the final iterate violates cheirality.
    pub valid: Vec<bool>,
    pub linearization: Vec<ProjJacobians>,
    pub iterations: usize,
    pub last_step_norm: f64,
    pub(crate) cache: Option<SolveCache>,
}

impl BASolution {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn n_free_poses(&self) -> usize {
        self.poses.len().saturating_sub(self.n_fixed)
    }

    pub fn is_free(&self, frame: usize) -> bool {
        frame >= self.n_fixed
    }

    /// Weights used inside the solve (zero on invalid edges).
    pub fn weights(&self) -> Option<&[Vector2<f64>]> {
        self.cache.as_ref().map(|c| c.weights.as_slice())
    }

    pub fn edges(&self) -> Option<&[EdgeIndex]> {
        self.cache.as_ref().map(|c| c.edges.as_slice())
    }

    /// Weighted objective at the final iterate.
    pub fn objective(&self) -> f64 {
        match &self.cache {
            Some(c) => self
                .residuals
                .iter()
                .zip(&c.weights)
                .map(|(r, w)| weighted_sq(r, w))
                .sum(),
            None => f64::NAN,
        }
    }

    /// `J^T W r` over the free variables at the final iterate (free pose
    /// twists first, then depths). Zero at a stationary point.
    pub fn objective_gradient(&self) -> Option<Vec<f64>> {
        let c = self.cache.as_ref()?;
        let sys = assemble(
            &c.edges,
            &self.linearization,
            &c.weights,
            &self.residuals,
            self.n_fixed,
            self.poses.len(),
            self.depths.len(),
        );
        Some(sys.g_t.iter().chain(sys.g_d.iter()).copied().collect())
    }

    /// Copy of the graph with this solution's poses and depths as estimates.
    pub fn apply_to(&self, graph: &PatchGraph) -> PatchGraph {
        graph.with_estimates(&self.poses, &self.depths)
    }
}

#[inline]
fn weighted_sq(r: &Vector2<f64>, w: &Vector2<f64>) -> f64 {
    w.x * r.x * r.x + w.y * r.y * r.y
}

pub fn edge_index(graph: &PatchGraph) -> Vec<EdgeIndex> {
    graph
        .edges
        .iter()
        .map(|e| EdgeIndex {
            k: e.k,
            i: graph.patches[e.k].i,
            j: e.j,
        })
        .collect()
}

/// Sum over edges of `r^T diag(sigma) r` at the graph's current estimates.
/// Edges failing cheirality contribute zero.
pub fn ba_objective(graph: &PatchGraph) -> f64 {
    objective_at(graph, &graph.poses(), &graph.depths(), DEFAULT_Z_MIN)
}

pub fn objective_at(graph: &PatchGraph, poses: &[Pose], depths: &[f64], z_min: f64) -> f64 {
    let mut total = 0.0;
    for e in &graph.edges {
        let p = &graph.patches[e.k];
        if let Ok((ph, _)) = reproject_with_jacobians(
            &p.center,
            depths[e.k],
            &poses[p.i],
            &poses[e.j],
            &graph.intrinsics,
            z_min,
        ) {
            total += weighted_sq(&(e.target - ph), &e.weight);
        }
    }
    total
}

struct Linearized {
    reproj: Vec<Vector2<f64>>,
    valid: Vec<bool>,
    jac: Vec<ProjJacobians>,
}

fn linearize(
    graph_centers: &[Vector2<f64>],
    edges: &[EdgeIndex],
    k: &Intrinsics,
    poses: &[Pose],
    depths: &[f64],
    z_min: f64,
) -> Linearized {
    let n = edges.len();
    let mut out = Linearized {
        reproj: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
        jac: Vec::with_capacity(n),
    };
    for e in edges {
        match reproject_with_jacobians(
            &graph_centers[e.k],
            depths[e.k],
            &poses[e.i],
            &poses[e.j],
            k,
            z_min,
        ) {
            Ok((ph, j)) => {
                out.reproj.push(ph);
                out.valid.push(true);
                out.jac.push(j);
            }
            Err(_) => {
                out.reproj.push(Vector2::zeros());
                out.valid.push(false);
                out.jac.push(ProjJacobians {
                    j_target: Default::default(),
                    j_source: Default::default(),
                    j_depth: Vector2::zeros(),
                });
            }
        }
    }
    out
}

/// Undamped normal equations `H = J^T W J`, `g = J^T W r`.
struct NormalSystem {
    b: DMatrix<f64>,
    e: DMatrix<f64>,
    c: DVector<f64>,
    g_t: DVector<f64>,
    g_d: DVector<f64>,
}

fn assemble(
    edges: &[EdgeIndex],
    jac: &[ProjJacobians],
    weights: &[Vector2<f64>],
    residuals: &[Vector2<f64>],
    n_fixed: usize,
    n_frames: usize,
    n_depths: usize,
) -> NormalSystem {
    let nt = 6 * n_frames.saturating_sub(n_fixed);
    let mut sys = NormalSystem {
        b: DMatrix::zeros(nt, nt),
        e: DMatrix::zeros(nt, n_depths),
        c: DVector::zeros(n_depths),
        g_t: DVector::zeros(nt),
        g_d: DVector::zeros(n_depths),
    };
    for (n, ed) in edges.iter().enumerate() {
        let w = &weights[n];
        if w.x == 0.0 && w.y == 0.0 {
            continue;
        }
        let jc = &jac[n];
        let r = &residuals[n];
        let wr = w.component_mul(r);
        let wjd = w.component_mul(&jc.j_depth);
        sys.c[ed.k] += jc.j_depth.dot(&wjd);
        sys.g_d[ed.k] += jc.j_depth.dot(&wr);

        let blocks = [(ed.j, &jc.j_target), (ed.i, &jc.j_source)];
        for (fa, ja) in blocks {
            if fa < n_fixed {
                continue;
            }
            let oa = 6 * (fa - n_fixed);
            let wja = {
                let mut m = *ja;
                m.row_mut(0).scale_mut(w.x);
                m.row_mut(1).scale_mut(w.y);
                m
            };
            let mut gt = sys.g_t.fixed_rows_mut::<6>(oa);
            gt += ja.transpose() * r.component_mul(w);
            let mut ecol = sys.e.fixed_view_mut::<6, 1>(oa, ed.k);
            ecol += wja.transpose() * jc.j_depth;
            for (fb, jb) in blocks {
                if fb < n_fixed {
                    continue;
                }
                let ob = 6 * (fb - n_fixed);
                let mut blk = sys.b.fixed_view_mut::<6, 6>(oa, ob);
                blk += wja.transpose() * jb;
            }
        }
    }
    sys
}

/// Per-edge weights with invalid edges masked out.
fn effective_weights(graph: &PatchGraph, valid: &[bool]) -> Vec<Vector2<f64>> {
    graph
        .edges
        .iter()
        .zip(valid)
        .map(|(e, &v)| if v { e.weight } else { Vector2::zeros() })
        .collect()
}

fn residuals_of(graph: &PatchGraph, lin: &Linearized) -> Vec<Vector2<f64>> {
    graph
        .edges
        .iter()
        .zip(lin.reproj.iter().zip(&lin.valid))
        .map(|(e, (ph, &v))| if v { e.target - ph } else { Vector2::zeros() })
        .collect()
}

/// Increments produced by one damped Gauss-Newton step.
#[derive(Clone, Debug, PartialEq)]
pub struct GnStep {
    /// One twist per free frame, in frame order.
    pub twists: Vec<Twist>,
    pub depths: Vec<f64>,
}

impl GnStep {
    pub fn norm(&self) -> f64 {
        let t: f64 = self.twists.iter().map(|x| x.norm_squared()).sum();
        let d: f64 = self.depths.iter().map(|x| x * x).sum();
        (t + d).sqrt()
    }
}

fn step_from(
    graph: &PatchGraph,
    edges: &[EdgeIndex],
    centers: &[Vector2<f64>],
    poses: &[Pose],
    depths: &[f64],
    cfg: &BAConfig,
) -> Result<GnStep> {
    let lin = linearize(centers, edges, &graph.intrinsics, poses, depths, cfg.z_min);
    let w = effective_weights(graph, &lin.valid);
    let r = residuals_of(graph, &lin);
    let sys = assemble(edges, &lin.jac, &w, &r, cfg.n_fixed_poses, poses.len(), depths.len());
    let fact = Factorization::new(&sys, cfg.lambda)?;
    let (x_t, x_d) = fact.solve(&sys.g_t, &sys.g_d);
    Ok(GnStep {
        twists: (0..x_t.len() / 6)
            .map(|f| Twist::from_iterator(x_t.rows(6 * f, 6).iter().copied()))
            .collect(),
        depths: x_d.iter().copied().collect(),
    })
}

/// One damped Gauss-Newton step from the graph's current estimates.
pub fn gn_step(graph: &PatchGraph, cfg: &BAConfig) -> Result<GnStep> {
    cfg.validate()?;
    let edges = edge_index(graph);
    let centers: Vec<_> = graph.patches.iter().map(|p| p.center).collect();
    step_from(graph, &edges, &centers, &graph.poses(), &graph.depths(), cfg)
}

/// Retract poses by `exp(xi) * T` and clamp the updated depths.
pub fn apply_step(poses: &mut [Pose], depths: &mut [f64], step: &GnStep, cfg: &BAConfig) {
    for (n, xi) in step.twists.iter().enumerate() {
        let f = cfg.n_fixed_poses + n;
        poses[f] = poses[f].retract(xi);
    }
    for (d, dd) in depths.iter_mut().zip(&step.depths) {
        *d = (*d + dd).clamp(cfg.d_min, cfg.d_max);
    }
}

/// Run up to `n_iters` Gauss-Newton steps from the graph's estimates while
/// keeping the revised targets fixed, then cache the linearization at the
/// final iterate.
pub fn ba_solve(graph: &PatchGraph, cfg: &BAConfig) -> Result<BASolution> {
    cfg.validate()?;
    let edges = edge_index(graph);
    let centers: Vec<_> = graph.patches.iter().map(|p| p.center).collect();
    let mut poses = graph.poses();
    let mut depths: Vec<f64> = graph
        .depths()
        .iter()
        .map(|d| d.clamp(cfg.d_min, cfg.d_max))
        .collect();
    let mut iterations = 0;
    let mut last = f64::INFINITY;
    for _ in 0..cfg.n_iters {
        let step = step_from(graph, &edges, &centers, &poses, &depths, cfg)?;
        apply_step(&mut poses, &mut depths, &step, cfg);
        iterations += 1;
        last = step.norm();
        if last < cfg.tol {
            break;
        }
    }
    finish(graph, edges, centers, poses, depths, cfg, iterations, last)
}

/// Linearize at the graph's current estimates without taking a step.
pub fn evaluate_at(graph: &PatchGraph, cfg: &BAConfig) -> Result<BASolution> {
    cfg.validate()?;
    let edges = edge_index(graph);
    let centers: Vec<_> = graph.patches.iter().map(|p| p.center).collect();
    finish(graph, edges, centers, graph.poses(), graph.depths(), cfg, 0, 0.0)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    graph: &PatchGraph,
    edges: Vec<EdgeIndex>,
    centers: Vec<Vector2<f64>>,
    poses: Vec<Pose>,
    depths: Vec<f64>,
    cfg: &BAConfig,
    iterations: usize,
    last_step_norm: f64,
) -> Result<BASolution> {
    let lin = linearize(&centers, &edges, &graph.intrinsics, &poses, &depths, cfg.z_min);
    let weights = effective_weights(graph, &lin.valid);
    let residuals = residuals_of(graph, &lin);
    let sys = assemble(&edges, &lin.jac, &weights, &residuals, cfg.n_fixed_poses, poses.len(), depths.len());
    let fact = Factorization::new(&sys, cfg.lambda)?;
    Ok(BASolution {
        n_fixed: cfg.n_fixed_poses.min(poses.len()),
        poses,
        depths,
        reprojections: lin.reproj,
        residuals,
        valid: lin.valid,
        linearization: lin.jac,
        iterations,
        last_step_norm,
        cache: Some(SolveCache {
            edges,
            weights,
            centers,
            intrinsics: graph.intrinsics,
            cfg: *cfg,
            fact,
        }),
    })
}

/// Recompute Jacobians and factorization at overridden depths. Poses,
/// depths, and residuals of the solution are left as they were.
pub fn linearize_at(sol: &BASolution, depth_override: &[f64]) -> Result<BASolution> {
    let cache = sol.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
    if depth_override.len() != sol.depths.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} depths, got {}",
            sol.depths.len(),
            depth_override.len()
        )));
    }
    if let Some(d) = depth_override.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::InvalidDepth(*d));
    }
    let lin = linearize(
        &cache.centers,
        &cache.edges,
        &cache.intrinsics,
        &sol.poses,
        depth_override,
        cache.cfg.z_min,
    );
    let weights: Vec<_> = cache
        .weights
        .iter()
        .zip(&lin.valid)
        .map(|(w, &v)| if v { *w } else { Vector2::zeros() })
        .collect();
    let sys = assemble(
        &cache.edges,
        &lin.jac,
        &weights,
        &sol.residuals,
        cache.cfg.n_fixed_poses,
        sol.poses.len(),
        sol.depths.len(),
    );
    let fact = Factorization::new(&sys, cache.cfg.lambda)?;
    Ok(BASolution {
        linearization: lin.jac,
        cache: Some(SolveCache {
            weights,
            fact,
            ..cache.clone()
        }),
        ..sol.clone()
    })
}
