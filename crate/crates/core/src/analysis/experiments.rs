//! Noise-injection sweeps and the weighted-loss SNR study. Every sweep is a
//! list of independent `(sigma, seed)` cells evaluated in parallel and
//! collected in cell order, so the output does not depend on the thread count.

use std::fmt;
use std::io::Write;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_snr, snr_db, toy_bias_experiment, Snr, ToyBiasConfig};
use crate::ba::{ba_solve, evaluate_at, linearize_at, BAConfig, BASolution};
use crate::backward::{ba_backward, UpstreamGrads};
use crate::error::{Error, Result};
use crate::losses::{flow_loss, pose_loss};
use crate::scene::PatchGraph;
use crate::synth::{
    generate_scene, init_estimates, patches_of_frame, perturb_depth_values, perturb_pose_value, OutlierMode, SynthConfig,
};
use crate::trainer::{initial_predictor, inner_loop, tape_backward, InnerOptions, Policy, Predictor, Strategy, TrainConfig};

pub const CSV_HEADER: &str = "experiment,sigma_or_iter,loss_tag,seed,value,sentinel_flag";

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub experiment: &'static str,
    pub sigma_or_iter: f64,
    pub loss_tag: &'static str,
    pub seed: u64,
    pub value: Value,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value {
    Finite(f64),
    /// Zero noise magnitude.
    Infinite,
    /// The replicate failed.
    Missing,
}

impl Value {
    pub fn finite(&self) -> Option<f64> {
        match self {
            Value::Finite(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<Snr> for Value {
    fn from(s: Snr) -> Self {
        match s {
            Snr::Finite(v) => Value::Finite(v),
            Snr::Infinite => Value::Infinite,
        }
    }
}

impl fmt::Display for ExperimentRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (v, flag) = match self.value {
            Value::Finite(v) => (format!("{v:e}"), "finite"),
            Value::Infinite => (String::new(), "infinite"),
            Value::Missing => (String::new(), "missing"),
        };
        write!(
            f,
            "{},{:e},{},{},{},{}",
            self.experiment, self.sigma_or_iter, self.loss_tag, self.seed, v, flag
        )
    }
}

pub fn write_csv<W: Write>(records: &[ExperimentRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

pub fn csv_string(records: &[ExperimentRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTag {
    Flow,
    Pose,
    WeightedFlow,
}

impl LossTag {
    pub fn name(self) -> &'static str {
        match self {
            LossTag::Flow => "flow",
            LossTag::Pose => "pose",
            LossTag::WeightedFlow => "weighted-flow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrPoint {
    pub sigma_or_iter: f64,
    pub loss: LossTag,
    pub seed: u64,
    pub snr: Option<Snr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarGroup {
    Poses,
    Depths,
}

impl VarGroup {
    pub fn name(self) -> &'static str {
        match self {
            VarGroup::Poses => "poses",
            VarGroup::Depths => "depths",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradErrorPoint {
    pub sigma: f64,
    pub group: VarGroup,
    pub seed: u64,
    pub error: Option<f64>,
}

pub fn snr_records(experiment: &'static str, points: &[SnrPoint]) -> Vec<ExperimentRecord> {
    points
        .iter()
        .map(|p| ExperimentRecord {
            experiment,
            sigma_or_iter: p.sigma_or_iter,
            loss_tag: p.loss.name(),
            seed: p.seed,
            value: p.snr.map_or(Value::Missing, Value::from),
        })
        .collect()
}

pub fn grad_error_records(experiment: &'static str, points: &[GradErrorPoint]) -> Vec<ExperimentRecord> {
    points
        .iter()
        .map(|p| ExperimentRecord {
            experiment,
            sigma_or_iter: p.sigma,
            loss_tag: p.group.name(),
            seed: p.seed,
            value: p.error.map_or(Value::Missing, Value::Finite),
        })
        .collect()
}

/// Values of one tag at one sweep level, in seed order, skipping sentinels.
pub fn finite_values(records: &[ExperimentRecord], tag: &str, level: f64) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.loss_tag == tag && r.sigma_or_iter == level)
        .filter_map(|r| r.value.finite())
        .collect()
}

/// Settings shared by the noise-injection sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub scene: SynthConfig,
    pub ba: BAConfig,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Frame whose patch depths are perturbed in the depth-subset variant.
    pub subset_frame: usize,
    /// Rotation noise per unit of translation noise in the pose variant.
    pub rot_per_trans: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scene: SynthConfig {
                n_frames: 6,
                outlier_frac: 0.1,
                ..SynthConfig::default()
            },
            ba: BAConfig {
                n_fixed_poses: 2,
                ..BAConfig::default()
            },
            sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.8],
            seeds: (0..10).collect(),
            subset_frame: 1,
            rot_per_trans: 0.1,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.ba.validate()?;
        if self.sigmas.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidInput("sweep needs at least one sigma and one seed".into()));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput("noise levels must be finite and non-negative".into()));
        }
        if self.subset_frame >= self.scene.n_frames {
            return Err(Error::InvalidInput("subset_frame outside the scene".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(f64, u64)> {
        self.sigmas
            .iter()
            .flat_map(|&s| self.seeds.iter().map(move |&seed| (s, seed)))
            .collect()
    }
}

/// Seed for the injected noise, decorrelated from the scene's own draws.
fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Scene at ground truth with noisy targets, solved once.
fn solved_scene(cfg: &SweepConfig, seed: u64) -> Result<(PatchGraph, BASolution)> {
    let (g, _) = generate_scene(&cfg.scene.with_seed(seed))?;
    let sol = ba_solve(&g, &cfg.ba)?;
    Ok((g, sol))
}

/// Target gradients of the flow and pose losses, once with the solver's own
/// linearization and once with the Jacobians evaluated at noisy depths. The
/// upstream gradients always come from the noise-free solution.
pub fn linearization_cell(cfg: &SweepConfig, sigma: f64, seed: u64) -> Result<[Snr; 2]> {
    let (g, sol) = solved_scene(cfg, seed)?;
    let clean = linearize_at(&sol, &sol.depths)?;
    let all: Vec<usize> = (0..sol.depths.len()).collect();
    let noisy = linearize_at(&sol, &perturb_depth_values(&sol.depths, &all, sigma, noise_seed(seed)))?;
    let ups: [UpstreamGrads; 2] = [flow_loss(&g, &sol).1, pose_loss(&g, &sol)?.1];
    let mut out = [Snr::Infinite; 2];
    for (o, up) in out.iter_mut().zip(&ups) {
        let a = ba_backward(&clean, up)?.flat_delta();
        let b = ba_backward(&noisy, up)?.flat_delta();
        *o = snr_db(&a, &b);
    }
    Ok(out)
}

pub fn exp_linearization(cfg: &SweepConfig) -> Result<Vec<SnrPoint>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let res: Vec<_> = cells
        .par_iter()
        .map(|&(s, seed)| linearization_cell(cfg, s, seed).ok())
        .collect();
    Ok(cells
        .iter()
        .zip(res)
        .flat_map(|(&(s, seed), r)| {
            [LossTag::Flow, LossTag::Pose]
                .into_iter()
                .enumerate()
                .map(move |(n, loss)| SnrPoint {
                    sigma_or_iter: s,
                    loss,
                    seed,
                    snr: r.map(|x| x[n]),
                })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseTarget {
    /// Depths of every patch anchored in `subset_frame`.
    DepthSubset,
    /// The pose of frame 0.
    FirstPose,
}

impl NoiseTarget {
    pub fn experiment(self) -> &'static str {
        match self {
            NoiseTarget::DepthSubset => "interference-depth",
            NoiseTarget::FirstPose => "interference-pose",
        }
    }
}

fn mean_deviation<'a>(items: impl Iterator<Item = (f64, bool)> + 'a) -> Option<f64> {
    let (sum, n) = items.filter(|(_, keep)| *keep).fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean L2 deviation of the flow-loss gradients on the clean free poses and
/// clean depths when the chosen variables are perturbed right before the loss.
pub fn interference_cell(cfg: &SweepConfig, target: NoiseTarget, sigma: f64, seed: u64) -> Result<[Option<f64>; 2]> {
    let (g, sol) = solved_scene(cfg, seed)?;
    let at = g.with_estimates(&sol.poses, &sol.depths);
    let ns = noise_seed(seed);
    let (noisy, dirty_patches, dirty_frame) = match target {
        NoiseTarget::DepthSubset => {
            let subset = patches_of_frame(&at, cfg.subset_frame);
            let d = perturb_depth_values(&sol.depths, &subset, sigma, ns);
            (at.with_estimates(&sol.poses, &d), subset, None)
        }
        NoiseTarget::FirstPose => {
            let mut p = sol.poses.clone();
            p[0] = perturb_pose_value(&p[0], sigma, sigma * cfg.rot_per_trans, ns);
            (at.with_estimates(&p, &sol.depths), Vec::new(), Some(0))
        }
    };
    let base = flow_loss(&at, &evaluate_at(&at, &cfg.ba)?).1;
    let pert = flow_loss(&noisy, &evaluate_at(&noisy, &cfg.ba)?).1;
    let poses = mean_deviation(
        base.grad_pose
            .iter()
            .zip(&pert.grad_pose)
            .enumerate()
            .map(|(i, (a, b))| ((a - b).norm(), i >= sol.n_fixed && Some(i) != dirty_frame)),
    );
    let depths = mean_deviation(
        base.grad_depth
            .iter()
            .zip(&pert.grad_depth)
            .enumerate()
            .map(|(k, (a, b))| ((a - b).abs(), !dirty_patches.contains(&k))),
    );
    Ok([poses, depths])
}

pub fn exp_flow_interference(cfg: &SweepConfig, target: NoiseTarget) -> Result<Vec<GradErrorPoint>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let res: Vec<_> = cells
        .par_iter()
        .map(|&(s, seed)| interference_cell(cfg, target, s, seed).ok())
        .collect();
    Ok(cells
        .iter()
        .zip(res)
        .flat_map(|(&(s, seed), r)| {
            [VarGroup::Poses, VarGroup::Depths]
                .into_iter()
                .enumerate()
                .map(move |(n, group)| GradErrorPoint {
                    sigma: s,
                    group,
                    seed,
                    error: r.and_then(|x| x[n]),
                })
        })
        .collect())
}

/// Where the solver weights come from in the SNR study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    /// The predictor's own weight head.
    Predicted,
    /// Fixed per-edge weights from the corruption labels.
    Oracle { inlier: f64, outlier: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightedSnrConfig {
    /// Scene, solver, inner-loop and predictor settings.
    pub train: TrainConfig,
    pub batches: usize,
    pub batch_size: usize,
    /// Scene `n` of batch `b` uses seed `base_seed + b * batch_size + n`.
    pub base_seed: u64,
    pub weights: WeightSource,
}

impl Default for WeightedSnrConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.scene.outlier_frac = 0.3;
        train.scene.outlier_mode = OutlierMode::Patch;
        Self {
            train,
            batches: 50,
            batch_size: 8,
            base_seed: 0,
            weights: WeightSource::Oracle {
                inlier: 1.0,
                outlier: 0.0,
            },
        }
    }
}

impl WeightedSnrConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.batch_size < 8 || self.batches == 0 {
            return Err(Error::InvalidInput("weighted SNR needs batches of at least 8 scenes".into()));
        }
        if let WeightSource::Oracle { inlier, outlier } = self.weights {
            if !(inlier > 0.0 && inlier <= 1.0 && (0.0..=1.0).contains(&outlier)) {
                return Err(Error::InvalidInput("oracle weights must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// A training scene with its optional fixed weights.
pub fn snr_scene(cfg: &WeightedSnrConfig, seed: u64) -> Result<(PatchGraph, Option<Vec<Vector2<f64>>>)> {
    let (g, labels) = generate_scene(&cfg.train.scene.with_seed(seed))?;
    let g = init_estimates(&g, cfg.train.init_depth_range, seed);
    let w = match cfg.weights {
        WeightSource::Predicted => None,
        WeightSource::Oracle { inlier, outlier } => Some(
            labels
                .outlier
                .iter()
                .map(|&o| Vector2::repeat(if o { outlier } else { inlier }))
                .collect(),
        ),
    };
    Ok((g, w))
}

/// Gradient of the (weighted) flow loss of one scene with respect to the
/// revision-head parameters.
pub fn delta_head_grad(
    scene: &PatchGraph,
    weights: Option<&[Vector2<f64>]>,
    predictor: &Predictor,
    base: &InnerOptions,
    loss: LossTag,
) -> Result<Vec<f64>> {
    let strategy = match loss {
        LossTag::Flow => Strategy::Unweighted,
        LossTag::WeightedFlow => Strategy::Weighted,
        LossTag::Pose => return Err(Error::InvalidInput("the SNR study compares flow losses only".into())),
    };
    let opts = InnerOptions {
        strategy,
        sigma_override: weights.map(|w| w.to_vec()),
        ..base.clone()
    };
    let tape = inner_loop(scene, Policy::Net(predictor), &opts)?;
    let g = tape_backward(&tape, predictor, &opts, 1.0, 0.0)?;
    Ok(g[predictor.delta_head()].to_vec())
}

/// Batch SNR of the revision-head gradients over a batch of scenes. Scenes
/// whose inner loop fails under either loss are dropped from both.
pub fn batch_snr_pair(
    scenes: &[(PatchGraph, Option<Vec<Vector2<f64>>>)],
    predictor: &Predictor,
    opts: &InnerOptions,
) -> Result<[Snr; 2]> {
    let grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = scenes
        .par_iter()
        .map(|(g, w)| {
            let a = delta_head_grad(g, w.as_deref(), predictor, opts, LossTag::Flow).ok()?;
            let b = delta_head_grad(g, w.as_deref(), predictor, opts, LossTag::WeightedFlow).ok()?;
            Some((a, b))
        })
        .collect();
    let (flow, weighted): (Vec<_>, Vec<_>) = grads.into_iter().flatten().unzip();
    Ok([batch_snr(&flow)?, batch_snr(&weighted)?])
}

pub fn exp_weighted_snr(cfg: &WeightedSnrConfig) -> Result<Vec<SnrPoint>> {
    cfg.validate()?;
    let predictor = initial_predictor(&cfg.train);
    let opts = InnerOptions::from_config(&cfg.train, 0.0);
    let mut out = Vec::with_capacity(2 * cfg.batches);
    for b in 0..cfg.batches {
        let first = cfg.base_seed + (b * cfg.batch_size) as u64;
        let scenes = (0..cfg.batch_size as u64)
            .map(|n| snr_scene(cfg, first + n))
            .collect::<Result<Vec<_>>>()?;
        let snr = batch_snr_pair(&scenes, &predictor, &opts).ok();
        for (n, loss) in [LossTag::Flow, LossTag::WeightedFlow].into_iter().enumerate() {
            out.push(SnrPoint {
                sigma_or_iter: b as f64,
                loss,
                seed: first,
                snr: snr.map(|s| s[n]),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBiasSweep {
    pub toy: ToyBiasConfig,
    pub seeds: Vec<u64>,
    /// Keep every this many steps in the CSV.
    pub record_every: usize,
}

impl Default for ToyBiasSweep {
    fn default() -> Self {
        Self {
            toy: ToyBiasConfig::default(),
            seeds: (0..10).collect(),
            record_every: 10,
        }
    }
}

/// Mean-weight trajectories of both arms as CSV records.
pub fn exp_toy_bias(cfg: &ToyBiasSweep) -> Result<Vec<ExperimentRecord>> {
    if cfg.record_every == 0 || cfg.seeds.is_empty() {
        return Err(Error::InvalidInput("toy sweep needs seeds and record_every >= 1".into()));
    }
    let mut out = Vec::new();
    for s in toy_bias_experiment(&cfg.toy, &cfg.seeds)? {
        for (tag, run) in [("unclipped", &s.unclipped), ("clipped", &s.clipped)] {
            let last = run.mean_weight.len() - 1;
            for (step, w) in run.mean_weight.iter().enumerate() {
                if step % cfg.record_every == 0 || step == last {
                    out.push(ExperimentRecord {
                        experiment: "toy-bias",
                        sigma_or_iter: step as f64,
                        loss_tag: tag,
                        seed: s.seed,
                        value: Value::Finite(*w),
                    });
                }
            }
        }
    }
    Ok(out)
}
