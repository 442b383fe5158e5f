//! Outer training losses on the BA outputs and their gradients with respect
//! to the output poses (left-perturbation twists) and depths.

use nalgebra::Vector2;

use crate::ba::BASolution;
use crate::backward::UpstreamGrads;
use crate::error::{Error, Result};
use crate::lie::{se3_left_jacobian_inv, se3_right_jacobian_inv, Pose};
use crate::scene::PatchGraph;

/// Norms below this count as zero and get a zero subgradient.
pub const NORM_EPS: f64 = 1e-12;
pub const FLOW_COEF: f64 = 10.0;
pub const POSE_COEF: f64 = 0.1;
pub const DEFAULT_K_SKIP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub flow: f64,
    pub pose: f64,
    pub total: f64,
    pub beta: f64,
    pub grads: UpstreamGrads,
}

/// Per-edge weighted norms `sqrt(r^T diag(w) r)` with `r = p* - p_hat`, and
/// the derivative of their sum with respect to each `p_hat`.
/// Invalid edges and edges without a ground-truth target contribute nothing.
pub fn flow_terms(
    graph: &PatchGraph,
    sol: &BASolution,
    weights: Option<&[Vector2<f64>]>,
) -> (f64, Vec<Vector2<f64>>) {
    let mut total = 0.0;
    let mut d_phat = vec![Vector2::zeros(); graph.edges.len()];
    let one = Vector2::new(1.0, 1.0);
    for (n, e) in graph.edges.iter().enumerate() {
        let Some(gt) = e.gt_target else { continue };
        if !sol.valid[n] {
            continue;
        }
        let w = weights.map_or(one, |w| w[n]);
        let r = gt - sol.reprojections[n];
        let wr = w.component_mul(&r);
        let norm = r.dot(&wr).sqrt();
        total += norm;
        if norm > NORM_EPS {
            d_phat[n] = -wr / norm;
        }
    }
    (total, d_phat)
}

/// Chain per-edge gradients on `p_hat` into the poses and depths of the
/// solution. Fixed poses receive zero.
pub fn chain_to_outputs(graph: &PatchGraph, sol: &BASolution, d_phat: &[Vector2<f64>]) -> UpstreamGrads {
    let mut g = UpstreamGrads::zeros(sol.poses.len(), sol.depths.len());
    for (n, e) in graph.edges.iter().enumerate() {
        let d = &d_phat[n];
        if d.x == 0.0 && d.y == 0.0 {
            continue;
        }
        let jc = &sol.linearization[n];
        let i = graph.patches[e.k].i;
        g.grad_depth[e.k] += jc.j_depth.dot(d);
        g.grad_pose[e.j] += jc.j_target.transpose() * d;
        g.grad_pose[i] += jc.j_source.transpose() * d;
    }
    g.zero_fixed(sol.n_fixed);
    g
}

/// Sum over edges of `|p* - p_hat|`.
pub fn flow_loss(graph: &PatchGraph, sol: &BASolution) -> (f64, UpstreamGrads) {
    let (v, d) = flow_terms(graph, sol, None);
    (v, chain_to_outputs(graph, sol, &d))
}

/// Sum over edges of `sqrt(r^T diag(sigma) r)`. The weights are constants
/// here: nothing is returned for them.
pub fn weighted_flow_loss(graph: &PatchGraph, sol: &BASolution, sigma: &[Vector2<f64>]) -> (f64, UpstreamGrads) {
    let (v, d) = flow_terms(graph, sol, Some(sigma));
    (v, chain_to_outputs(graph, sol, &d))
}

/// Sum over unordered frame pairs of `|Log[(G_i G_j^-1)^-1 (T_i T_j^-1)]|`
/// with gradients for every frame.
pub fn pose_loss_raw(gt: &[Pose], est: &[Pose]) -> Result<(f64, Vec<nalgebra::Vector6<f64>>)> {
    let n = est.len();
    if n < 2 || gt.len() != n {
        return Err(Error::InvalidInput("pose loss needs at least two matching frames".into()));
    }
    let mut total = 0.0;
    let mut grads = vec![nalgebra::Vector6::zeros(); n];
    for i in 0..n {
        for j in i + 1..n {
            let g_ij = gt[i].compose(&gt[j].inverse());
            let t_ij = est[i].compose(&est[j].inverse());
            let err = g_ij.inverse().compose(&t_ij);
            let e = err.log()?;
            let norm = e.norm();
            total += norm;
            if norm <= NORM_EPS {
                continue;
            }
            let u = e / norm;
            let d_i = se3_left_jacobian_inv(&e) * g_ij.inverse().adjoint();
            let d_j = -se3_right_jacobian_inv(&e);
            grads[i] += d_i.transpose() * u;
            grads[j] += d_j.transpose() * u;
        }
    }
    Ok((total, grads))
}

pub fn pose_loss(graph: &PatchGraph, sol: &BASolution) -> Result<(f64, UpstreamGrads)> {
    let (v, gp) = pose_loss_raw(&graph.gt_poses(), &sol.poses)?;
    let mut g = UpstreamGrads::zeros(sol.poses.len(), sol.depths.len());
    g.grad_pose = gp;
    g.zero_fixed(sol.n_fixed);
    Ok((v, g))
}

pub fn total_loss_fixed(flow: f64, pose: f64) -> f64 {
    FLOW_COEF * flow + POSE_COEF * pose
}

/// `|grad L_pose| / |grad L_flow|` over parameter-space gradients.
pub fn balance_beta(grad_pose: &[f64], grad_flow: &[f64]) -> Result<f64> {
    let nf = crate::analysis::norm(grad_flow);
    if !(nf > 0.0) {
        return Err(Error::DegenerateBalance);
    }
    Ok(crate::analysis::norm(grad_pose) / nf)
}

/// Whether the pose loss is applied at this inner iteration.
pub fn pose_loss_mask(inner_iter: usize, k_skip: usize) -> bool {
    inner_iter >= k_skip
}

/// `w = 1 / (4 e / m + 1)` per edge, with `e = |p* - p_hat|` and `m` the
/// median of those norms; both coordinates share the edge's weight.
pub fn heuristic_weights(gt_targets: &[Vector2<f64>], estimates: &[Vector2<f64>]) -> Result<Vec<Vector2<f64>>> {
    if gt_targets.is_empty() || gt_targets.len() != estimates.len() {
        return Err(Error::InvalidInput("heuristic weights need matching, non-empty inputs".into()));
    }
    let errs: Vec<f64> = gt_targets.iter().zip(estimates).map(|(a, b)| (a - b).norm()).collect();
    let m = crate::analysis::median(&errs).unwrap_or(0.0);
    Ok(errs
        .iter()
        .map(|e| {
            let w = if m > 0.0 { (1.0 / (4.0 * e / m + 1.0)).clamp(0.0, 1.0) } else { 1.0 };
            Vector2::new(w, w)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_total_examples() {
        assert_eq!(total_loss_fixed(0.0, 0.0), 0.0);
        assert!((total_loss_fixed(1.0, 1.0) - 10.1).abs() < 1e-12);
        assert!((total_loss_fixed(0.5, 2.0) - 5.2).abs() < 1e-12);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(balance_beta(&[3.0, 4.0], &[0.0, 5.0]).unwrap(), 1.0);
        assert_eq!(balance_beta(&[2.0], &[0.5]).unwrap(), 4.0);
        assert_eq!(balance_beta(&[1.0], &[0.0]).unwrap_err(), Error::DegenerateBalance);
        let gp = [0.3, -1.7, 2.2];
        let gf = [0.01, 0.4, -0.9];
        let b = balance_beta(&gp, &gf).unwrap();
        let scaled: Vec<f64> = gf.iter().map(|x| b * x).collect();
        let np = crate::analysis::norm(&gp);
        assert!((crate::analysis::norm(&scaled) - np).abs() <= 1e-12 * np);
    }

    #[test]
    fn mask_examples() {
        assert!(!pose_loss_mask(0, 2));
        assert!(pose_loss_mask(2, 2));
        assert!(pose_loss_mask(5, 0));
    }

    #[test]
    fn heuristic_examples() {
        let gt = vec![Vector2::zeros(); 3];
        let est = vec![Vector2::new(3.0, 4.0), Vector2::new(0.0, 5.0), Vector2::new(5.0, 0.0)];
        let w = heuristic_weights(&gt, &est).unwrap();
        assert!(w.iter().all(|w| (w.x - 0.2).abs() < 1e-15 && w.x == w.y));
        let est = vec![Vector2::zeros(), Vector2::new(1.0, 0.0), Vector2::new(2.0, 0.0)];
        let w = heuristic_weights(&gt, &est).unwrap();
        assert_eq!(w[0].x, 1.0);
        assert!((w[1].x - 0.2).abs() < 1e-15);
        assert!(w[2].x < w[1].x);
        let w = heuristic_weights(&gt, &[Vector2::zeros(); 3]).unwrap();
        assert!(w.iter().all(|w| w.x == 1.0));
        assert!(heuristic_weights(&[], &[]).is_err());
    }

    #[test]
    fn pose_loss_identity_is_zero() {
        let p = vec![Pose::identity(); 3];
        let (v, g) = pose_loss_raw(&p, &p).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| x.norm() == 0.0));
    }
}
