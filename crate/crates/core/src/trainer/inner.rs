//! Alternating predict / solve inner loop, recorded on a tape, and the reverse
//! pass through it.
//!
//! State lives in the index space of the full scene: estimates per frame and
//! patch, and per edge the current target, the previous revision and the
//! previous weight. Each inner iteration works on a prefix window of frames.

use std::collections::HashMap;

use nalgebra::Vector2;

use super::config::{Strategy, TrainConfig};
use super::predictor::{features, Features, ForwardCache, Predictor};
use crate::ba::{ba_solve, BAConfig, BASolution};
use crate::backward::{ba_backward, clip_weight_grad, InputGrads, UpstreamGrads};
use crate::error::{Error, Result};
use crate::lie::ate;
use crate::losses::{chain_to_outputs, flow_terms, heuristic_weights, pose_loss, pose_loss_mask};
use crate::projective::reproject;
use crate::scene::{PatchGraph, WindowMap};

/// Source of revisions and weights inside the inner loop.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Net(&'a Predictor),
    /// Revisions that move every target onto its ground truth, unit weights.
    Oracle,
}

/// Everything the inner loop and its reverse pass need.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerOptions {
    /// Frames in the window of each inner iteration, capped at the scene length.
    pub schedule: Vec<usize>,
    pub ba: BAConfig,
    pub strategy: Strategy,
    /// Interpolation toward ground truth (gt-interp only).
    pub alpha: f64,
    pub k_skip: usize,
    pub flow_final_only: bool,
    pub init_sigma: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Fixed BA weights per scene edge replacing the predicted ones.
    pub sigma_override: Option<Vec<Vector2<f64>>>,
    /// Drop the weight-gradient component along the weights themselves.
    pub project_weight_scale: bool,
}

impl InnerOptions {
    pub fn from_config(cfg: &TrainConfig, alpha: f64) -> Self {
        Self {
            schedule: cfg.schedule(),
            ba: cfg.ba,
            strategy: cfg.strategy,
            alpha,
            k_skip: cfg.k_skip,
            flow_final_only: cfg.flow_final_only,
            init_sigma: cfg.init_sigma,
            gamma_min: cfg.gamma_min,
            gamma_max: cfg.gamma_max,
            sigma_override: None,
            project_weight_scale: cfg.project_weight_scale,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InnerStep {
    /// Index into [`Tape::windows`].
    pub window: usize,
    pub delta: Vec<Vector2<f64>>,
    pub sigma: Vec<Vector2<f64>>,
    /// Targets handed to the solver.
    pub targets: Vec<Vector2<f64>>,
    pub sol: BASolution,
    /// Per-edge mean flow loss of this iterate (weighted per strategy).
    pub flow: f64,
    /// Per-pair mean pose loss, zero when masked.
    pub pose: f64,
    /// Unweighted mean `|p* - p_hat|` over scored edges.
    pub flow_error: f64,
    feats: Vec<Features>,
    cache: ForwardCache,
    /// Index of each edge in the previous iterate when its residual feature came from there.
    chained: Vec<Option<usize>>,
    /// Loss gradients on this iterate's outputs, already scaled by their share of the scene loss.
    flow_up: UpstreamGrads,
    pose_up: UpstreamGrads,
}

#[derive(Clone, Debug)]
pub struct Tape {
    pub windows: Vec<(PatchGraph, WindowMap)>,
    pub steps: Vec<InnerStep>,
    n_frames: usize,
    n_patches: usize,
    n_edges: usize,
    flow_final_only: bool,
}

/// Scene-level losses and metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SceneLoss {
    pub flow: f64,
    pub pose: f64,
    /// Flow error of the last iterate.
    pub final_flow_error: f64,
    /// Aligned trajectory error of the last iterate, when defined.
    pub ate: Option<f64>,
}

impl Tape {
    pub fn last(&self) -> &InnerStep {
        self.steps.last().expect("tape has at least one step")
    }

    pub fn loss(&self) -> SceneLoss {
        let n = self.steps.len() as f64;
        let flow = if self.flow_final_only {
            self.last().flow
        } else {
            self.steps.iter().map(|s| s.flow).sum::<f64>() / n
        };
        let pose = self.steps.iter().map(|s| s.pose).sum::<f64>() / n;
        let last = self.last();
        let (wg, _) = &self.windows[last.window];
        SceneLoss {
            flow,
            pose,
            final_flow_error: last.flow_error,
            ate: ate(&last.sol.poses, &wg.gt_poses()).ok(),
        }
    }

    /// Unweighted flow error of every iterate.
    pub fn flow_errors(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.flow_error).collect()
    }
}

fn window_index(
    windows: &mut Vec<(PatchGraph, WindowMap)>,
    lookup: &mut HashMap<usize, usize>,
    scene: &PatchGraph,
    count: usize,
) -> Result<usize> {
    if let Some(&w) = lookup.get(&count) {
        return Ok(w);
    }
    windows.push(scene.window_with_map(0, count)?);
    lookup.insert(count, windows.len() - 1);
    Ok(windows.len() - 1)
}

/// Remove from `g` its projection onto `w`.
///
/// Scaling every weight by the same factor leaves the solver's output
/// unchanged, so the exact weight gradient is orthogonal to the weights. The
/// fixed-point gradient only satisfies this at a stationary iterate; away from
/// one the extra component is `v . J^T Sigma r`, which pushes all weights up or
/// down together.
pub fn remove_scale_component(g: &mut [Vector2<f64>], w: &[Vector2<f64>]) {
    let ww: f64 = w.iter().map(|x| x.norm_squared()).sum();
    if ww == 0.0 {
        return;
    }
    let c = g.iter().zip(w).map(|(a, b)| a.dot(b)).sum::<f64>() / ww;
    for (a, b) in g.iter_mut().zip(w) {
        *a -= b * c;
    }
}

/// Run the inner loop on `scene`, whose estimates are the initial state and
/// whose edge targets are the observations.
pub fn inner_loop(scene: &PatchGraph, policy: Policy, opts: &InnerOptions) -> Result<Tape> {
    if opts.schedule.is_empty() {
        return Err(Error::InvalidInput("empty inner schedule".into()));
    }
    if let Some(s) = &opts.sigma_override {
        if s.len() != scene.edges.len() {
            return Err(Error::InvalidInput("weight override must cover every edge".into()));
        }
    }
    let n_steps = opts.schedule.len();
    let ne = scene.edges.len();
    let mut windows = Vec::new();
    let mut lookup = HashMap::new();
    let mut poses = scene.poses();
    let mut depths = scene.depths();
    let mut pbar: Vec<Vector2<f64>> = scene.edges.iter().map(|e| e.target).collect();
    let mut prev_delta = vec![Vector2::zeros(); ne];
    let mut prev_sigma = vec![Vector2::repeat(opts.init_sigma); ne];
    let mut steps: Vec<InnerStep> = Vec::with_capacity(n_steps);
    let mut active = 0;

    for (t, &count) in opts.schedule.iter().enumerate() {
        let count = count.min(scene.frames.len());
        let w = window_index(&mut windows, &mut lookup, scene, count)?;
        if active > 0 {
            // new frames start at the latest estimate of their predecessor
            for f in active..count {
                poses[f] = poses[f - 1];
            }
        }
        active = active.max(count);
        let (wg, map) = &windows[w];
        let mut g = wg.clone();
        for (wi, &fi) in map.frames.iter().enumerate() {
            g.frames[wi].pose = poses[fi];
        }
        for (wk, &fk) in map.patches.iter().enumerate() {
            g.patches[wk].depth = depths[fk];
        }

        let mut prev_slot = vec![usize::MAX; ne];
        if let Some(prev) = steps.last() {
            for (pe, &fe) in windows[prev.window].1.edges.iter().enumerate() {
                prev_slot[fe] = pe;
            }
        }
        let scale = match policy {
            Policy::Net(p) => p.scale,
            Policy::Oracle => 1.0,
        };
        let mut feats = Vec::with_capacity(g.edges.len());
        let mut chained = Vec::with_capacity(g.edges.len());
        for (e, &fe) in map.edges.iter().enumerate() {
            let pe = prev_slot[fe];
            let (r, c) = match steps.last() {
                Some(prev) if pe != usize::MAX && prev.sol.valid[pe] => (prev.sol.residuals[pe], Some(pe)),
                _ => {
                    let edge = &g.edges[e];
                    let p = &g.patches[edge.k];
                    let ph = reproject(
                        &p.center,
                        p.depth,
                        &g.frames[p.i].pose,
                        &g.frames[edge.j].pose,
                        &g.intrinsics,
                        opts.ba.z_min,
                    );
                    (ph.map_or(Vector2::zeros(), |ph| pbar[fe] - ph), None)
                }
            };
            feats.push(features(&r, &prev_delta[fe], &prev_sigma[fe], scale));
            chained.push(c);
        }

        let (delta, mut sigma, cache) = match policy {
            Policy::Net(p) => p.forward(&feats),
            Policy::Oracle => (
                map.edges
                    .iter()
                    .enumerate()
                    .map(|(e, &fe)| g.edges[e].gt_target.map_or(Vector2::zeros(), |gt| gt - pbar[fe]))
                    .collect(),
                vec![Vector2::new(1.0, 1.0); g.edges.len()],
                ForwardCache::default(),
            ),
        };
        if let Some(s) = &opts.sigma_override {
            sigma = map.edges.iter().map(|&fe| s[fe]).collect();
        }
        let mut targets = Vec::with_capacity(g.edges.len());
        for (e, &fe) in map.edges.iter().enumerate() {
            let mut q = pbar[fe] + delta[e];
            if opts.strategy == Strategy::GtInterp {
                if let Some(gt) = g.edges[e].gt_target {
                    q = gt * opts.alpha + q * (1.0 - opts.alpha);
                }
            }
            g.edges[e].target = q;
            g.edges[e].weight = sigma[e];
            targets.push(q);
        }

        let sol = ba_solve(&g, &opts.ba)?;
        for (wi, &fi) in map.frames.iter().enumerate() {
            poses[fi] = sol.poses[wi];
        }
        for (wk, &fk) in map.patches.iter().enumerate() {
            depths[fk] = sol.depths[wk];
        }
        for (e, &fe) in map.edges.iter().enumerate() {
            pbar[fe] = targets[e];
            prev_delta[fe] = delta[e];
            prev_sigma[fe] = sigma[e];
        }

        let scored = g
            .edges
            .iter()
            .zip(&sol.valid)
            .filter(|(e, v)| e.gt_target.is_some() && **v)
            .count()
            .max(1) as f64;
        let loss_weights = match opts.strategy {
            Strategy::Weighted => Some(sigma.clone()),
            Strategy::Heuristic => Some(heuristic_for(&g, &sol)?),
            _ => None,
        };
        let (err_sum, _) = flow_terms(&g, &sol, None);
        let flow_error = err_sum / scored;
        let (flow_sum, d_phat) = flow_terms(&g, &sol, loss_weights.as_deref());
        let flow = flow_sum / scored;
        let flow_share = if opts.flow_final_only {
            if t + 1 == n_steps {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 / n_steps as f64
        };
        let flow_up = if flow_share > 0.0 {
            chain_to_outputs(&g, &sol, &d_phat).scaled(flow_share / scored)
        } else {
            UpstreamGrads::zeros(sol.poses.len(), sol.depths.len())
        };
        let (pose, pose_up) = if pose_loss_mask(t, opts.k_skip) {
            let nf = g.frames.len() as f64;
            let pairs = nf * (nf - 1.0) / 2.0;
            let (v, up) = pose_loss(&g, &sol)?;
            (v / pairs, up.scaled(1.0 / (pairs * n_steps as f64)))
        } else {
            (0.0, UpstreamGrads::zeros(sol.poses.len(), sol.depths.len()))
        };

        steps.push(InnerStep {
            window: w,
            delta,
            sigma,
            targets,
            sol,
            flow: if flow_share > 0.0 { flow } else { 0.0 },
            pose,
            flow_error,
            feats,
            cache,
            chained,
            flow_up,
            pose_up,
        });
    }
    Ok(Tape {
        windows,
        steps,
        n_frames: scene.frames.len(),
        n_patches: scene.patches.len(),
        n_edges: ne,
        flow_final_only: opts.flow_final_only,
    })
}

/// Heuristic weights over scored edges; the rest get zero.
fn heuristic_for(g: &PatchGraph, sol: &BASolution) -> Result<Vec<Vector2<f64>>> {
    let idx: Vec<usize> = (0..g.edges.len())
        .filter(|&n| g.edges[n].gt_target.is_some() && sol.valid[n])
        .collect();
    let mut w = vec![Vector2::zeros(); g.edges.len()];
    if idx.is_empty() {
        return Ok(w);
    }
    let gt: Vec<_> = idx.iter().map(|&n| g.edges[n].gt_target.unwrap()).collect();
    let est: Vec<_> = idx.iter().map(|&n| sol.reprojections[n]).collect();
    for (n, h) in idx.into_iter().zip(heuristic_weights(&gt, &est)?) {
        w[n] = h;
    }
    Ok(w)
}

/// Zero every component of a target gradient whose sign disagrees with the
/// gradient of `|target - gt|`.
pub fn correct_target_grad(g: &Vector2<f64>, target: &Vector2<f64>, gt: &Vector2<f64>) -> Vector2<f64> {
    let d = target - gt;
    Vector2::new(
        if g.x * d.x < 0.0 { 0.0 } else { g.x },
        if g.y * d.y < 0.0 { 0.0 } else { g.y },
    )
}

/// Gradient of `coef_flow * L_flow + coef_pose * L_pose` with respect to the
/// predictor parameters, by reverse accumulation through every iterate.
pub fn tape_backward(
    tape: &Tape,
    predictor: &Predictor,
    opts: &InnerOptions,
    coef_flow: f64,
    coef_pose: f64,
) -> Result<Vec<f64>> {
    let ne = tape.n_edges;
    let s = predictor.scale;
    let mut g_pbar = vec![Vector2::zeros(); ne];
    let mut g_pd = vec![Vector2::zeros(); ne];
    let mut g_ps = vec![Vector2::zeros(); ne];
    let mut g_x = UpstreamGrads::zeros(tape.n_frames, tape.n_patches);
    let mut grad = vec![0.0; predictor.theta.len()];

    for t in (0..tape.steps.len()).rev() {
        let st = &tape.steps[t];
        let (wg, map) = &tape.windows[st.window];
        let sol = &st.sol;
        let mut up = UpstreamGrads::zeros(wg.frames.len(), wg.patches.len());
        for (wi, &fi) in map.frames.iter().enumerate() {
            if wi >= sol.n_fixed {
                up.grad_pose[wi] = g_x.grad_pose[fi];
                g_x.grad_pose[fi] = Default::default();
            }
        }
        for (wk, &fk) in map.patches.iter().enumerate() {
            up.grad_depth[wk] = g_x.grad_depth[fk];
            g_x.grad_depth[fk] = 0.0;
        }
        up.add_scaled(&st.flow_up, coef_flow);
        up.add_scaled(&st.pose_up, coef_pose);
        up.zero_fixed(sol.n_fixed);
        let ig = if up.is_zero() {
            InputGrads::zeros(wg.edges.len())
        } else {
            let mut ig = ba_backward(sol, &up)?;
            if opts.project_weight_scale {
                remove_scale_component(&mut ig.grad_sigma, &st.sigma);
            }
            clip_weight_grad(&ig, opts.gamma_min, opts.gamma_max)
        };

        let n = wg.edges.len();
        let mut g_q = Vec::with_capacity(n);
        let mut g_delta = Vec::with_capacity(n);
        let mut g_sigma = Vec::with_capacity(n);
        for (e, &fe) in map.edges.iter().enumerate() {
            let mut qb = g_pbar[fe] + ig.grad_delta[e];
            let gt = wg.edges[e].gt_target;
            if let (Strategy::GradCorrect, Some(gt)) = (opts.strategy, gt) {
                qb = correct_target_grad(&qb, &st.targets[e], &gt);
            }
            if let (Strategy::GtInterp, Some(_)) = (opts.strategy, gt) {
                qb *= 1.0 - opts.alpha;
            }
            g_q.push(qb);
            g_delta.push(qb + g_pd[fe]);
            g_sigma.push(if opts.sigma_override.is_some() {
                Vector2::zeros()
            } else {
                ig.grad_sigma[e] + g_ps[fe]
            });
        }
        let gf = predictor.backward(&st.feats, &st.cache, &g_delta, &g_sigma, &mut grad);

        let mut d_prev = t.checked_sub(1).map(|p| vec![Vector2::zeros(); tape.steps[p].sol.residuals.len()]);
        for (e, &fe) in map.edges.iter().enumerate() {
            let rbar = Vector2::new(gf[e][0], gf[e][1]) / s;
            g_pbar[fe] = g_q[e] + rbar;
            g_pd[fe] = Vector2::new(gf[e][2], gf[e][3]) / s;
            g_ps[fe] = Vector2::new(gf[e][4], gf[e][5]);
            if let (Some(pe), Some(d)) = (st.chained[e], d_prev.as_mut()) {
                d[pe] -= rbar;
            }
        }
        if let Some(d) = d_prev {
            let prev = &tape.steps[t - 1];
            let (pg, pmap) = &tape.windows[prev.window];
            let c = chain_to_outputs(pg, &prev.sol, &d);
            for (wi, &fi) in pmap.frames.iter().enumerate() {
                g_x.grad_pose[fi] += c.grad_pose[wi];
            }
            for (wk, &fk) in pmap.patches.iter().enumerate() {
                g_x.grad_depth[fk] += c.grad_depth[wk];
            }
        }
    }
    Ok(grad)
}
