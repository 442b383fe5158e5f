//! Seeded synthetic scenes: smooth random trajectories, uniformly sampled
//! patches, noisy observed targets with planted outliers, and the depth and
//! pose perturbations used by the gradient-noise experiments.
//!
//! Randomness comes from ChaCha8. A scene with seed `s` draws its trajectory
//! and patches from stream 0 of `s`, and edge `e` draws its corruption from
//! stream `1 + e`, so edge noise does not depend on how many draws the
//! geometry consumed.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{Pose, Twist};
use crate::projective::{reproject, Intrinsics, DEFAULT_Z_MIN};
use crate::scene::{Frame, Patch, PatchGraph, DEFAULT_D_MAX, DEFAULT_D_MIN};

const RESAMPLE_BUDGET: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub patches_per_frame: usize,
    pub width: f64,
    pub height: f64,
    pub intrinsics: Intrinsics,
    pub radius: usize,
    /// Translation per frame, meters.
    pub step_scale: f64,
    /// Rotation noise per frame, radians.
    pub rot_scale: f64,
    pub depth_range: (f64, f64),
    pub sigma_in: f64,
    pub outlier_frac: f64,
    pub sigma_out: f64,
    pub outlier_mode: OutlierMode,
    pub seed: u64,
}

/// What `outlier_frac` selects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierMode {
    /// Each edge independently.
    #[default]
    Edge,
    /// Whole patches: every edge of a selected patch is corrupted.
    Patch,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            patches_per_frame: 8,
            width: 320.0,
            height: 240.0,
            intrinsics: Intrinsics {
                fx: 200.0,
                fy: 200.0,
                cx: 160.0,
                cy: 120.0,
            },
            radius: 3,
            step_scale: 0.15,
            rot_scale: 0.02,
            depth_range: (2.0, 8.0),
            sigma_in: 0.5,
            outlier_frac: 0.0,
            sigma_out: 20.0,
            outlier_mode: OutlierMode::Edge,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.outlier_frac) {
            return bad("outlier_frac must lie in [0, 1]");
        }
        if !(self.sigma_in >= 0.0 && self.sigma_out >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("depth range must be positive and ordered");
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("image size must be positive");
        }
        if !(self.step_scale >= 0.0 && self.rot_scale >= 0.0) {
            return bad("trajectory scales must be non-negative");
        }
        self.intrinsics.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorruptionLabels {
    pub outlier: Vec<bool>,
    pub noise: Vec<Vector2<f64>>,
}

impl CorruptionLabels {
    pub fn outlier_fraction(&self) -> f64 {
        if self.outlier.is_empty() {
            return 0.0;
        }
        self.outlier.iter().filter(|o| **o).count() as f64 / self.outlier.len() as f64
    }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

fn edge_rng(seed: u64, edge: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + edge as u64);
    rng
}

fn trajectory(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    // a dominant sideways heading keeps parallax high; the velocity drifts
    // slowly so consecutive steps look alike
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vel = Vector3::new(heading.cos(), heading.sin(), 0.2 * rng.random_range(-1.0..1.0));
    let mut poses = vec![Pose::identity()];
    for _ in 1..cfg.n_frames {
        vel = (vel + 0.2 * normal3(rng)).normalize();
        let w = cfg.rot_scale * normal3(rng);
        let xi = Twist::new(
            cfg.step_scale * vel.x,
            cfg.step_scale * vel.y,
            cfg.step_scale * vel.z,
            w.x,
            w.y,
            w.z,
        );
        let last = *poses.last().unwrap();
        poses.push(last.retract(&xi));
    }
    poses
}

/// Generate a scene with estimates initialized at ground truth, observed
/// targets `p_bar = p* + noise`, and unit weights.
pub fn generate_scene(cfg: &SynthConfig) -> Result<(PatchGraph, CorruptionLabels)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gt = trajectory(cfg, &mut rng);
    let k = cfg.intrinsics;
    let frames: Vec<Frame> = gt
        .iter()
        .enumerate()
        .map(|(index, p)| Frame {
            index,
            pose: *p,
            gt_pose: *p,
        })
        .collect();

    let (dlo, dhi) = cfg.depth_range;
    let mut patches = Vec::with_capacity(cfg.n_frames * cfg.patches_per_frame);
    for i in 0..cfg.n_frames {
        let lo = i.saturating_sub(cfg.radius);
        let hi = (i + cfg.radius).min(cfg.n_frames - 1);
        for _ in 0..cfg.patches_per_frame {
            let mut found = None;
            for _ in 0..RESAMPLE_BUDGET {
                let c = Vector2::new(
                    rng.random_range(0.0..cfg.width),
                    rng.random_range(0.0..cfg.height),
                );
                let d = if dhi > dlo { rng.random_range(dlo..dhi) } else { dlo };
                let visible = (lo..=hi)
                    .filter(|j| *j != i)
                    .all(|j| reproject(&c, d, &gt[i], &gt[j], &k, DEFAULT_Z_MIN).is_ok());
                if visible {
                    found = Some((c, d));
                    break;
                }
            }
            let (center, depth) = found.ok_or_else(|| {
                Error::InfeasibleConfig(format!("no visible patch for frame {i} after {RESAMPLE_BUDGET} draws"))
            })?;
            patches.push(Patch {
                k: patches.len(),
                i,
                center,
                depth,
                gt_depth: depth,
            });
        }
    }

    let graph = PatchGraph::new(k, frames, patches)
        .build_edges(cfg.radius)
        .gt_targets();
    let mut graph = graph;
    let bad_patch: Vec<bool> = {
        let mut pr = ChaCha8Rng::seed_from_u64(cfg.seed);
        pr.set_stream(u64::MAX - 1);
        (0..graph.patches.len()).map(|_| pr.random::<f64>() < cfg.outlier_frac).collect()
    };
    let mut labels = CorruptionLabels::default();
    for (n, e) in graph.edges.iter_mut().enumerate() {
        let mut er = edge_rng(cfg.seed, n);
        let edge_draw = er.random::<f64>() < cfg.outlier_frac;
        let is_out = match cfg.outlier_mode {
            OutlierMode::Edge => edge_draw,
            OutlierMode::Patch => bad_patch[e.k],
        };
        let s = if is_out { cfg.sigma_out } else { cfg.sigma_in };
        let z: Vector2<f64> = Vector2::new(er.sample(StandardNormal), er.sample(StandardNormal));
        let noise = z * s;
        e.target = e.gt_target.expect("gt targets computed above") + noise;
        labels.outlier.push(is_out);
        labels.noise.push(noise);
    }
    Ok((graph, labels))
}

/// Estimates for training: identity poses and depths uniform in the range.
pub fn init_estimates(graph: &PatchGraph, depth_range: (f64, f64), seed: u64) -> PatchGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let (lo, hi) = depth_range;
    let mut g = graph.clone();
    for f in &mut g.frames {
        f.pose = Pose::identity();
    }
    for p in &mut g.patches {
        p.depth = if hi > lo { rng.random_range(lo..hi) } else { lo };
    }
    g
}

/// Patch ids whose source frame is `frame`.
pub fn patches_of_frame(graph: &PatchGraph, frame: usize) -> Vec<usize> {
    graph
        .patches
        .iter()
        .filter(|p| p.i == frame)
        .map(|p| p.k)
        .collect()
}

/// Multiplicative log-normal noise `exp(sigma z)` on the selected depths.
/// The normal draws depend only on the seed and the subset position, so a
/// sweep over `sigma` with one seed scales a common noise direction.
pub fn perturb_depth_values(depths: &[f64], subset: &[usize], sigma: f64, seed: u64) -> Vec<f64> {
    let mut out = depths.to_vec();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &k in subset {
        let z: f64 = rng.sample(StandardNormal);
        out[k] = (out[k] * (sigma * z).exp()).clamp(DEFAULT_D_MIN, DEFAULT_D_MAX);
    }
    out
}

pub fn perturb_depths(graph: &PatchGraph, subset: &[usize], sigma: f64, seed: u64) -> PatchGraph {
    let d = perturb_depth_values(&graph.depths(), subset, sigma, seed);
    graph.with_estimates(&graph.poses(), &d)
}

/// Left-multiply `exp(xi)` with `xi ~ N(0, diag(sigma_t^2 I, sigma_r^2 I))`.
pub fn perturb_pose_value(pose: &Pose, sigma_t: f64, sigma_r: f64, seed: u64) -> Pose {
    if sigma_t == 0.0 && sigma_r == 0.0 {
        return *pose;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = normal3(&mut rng) * sigma_t;
    let w = normal3(&mut rng) * sigma_r;
    pose.retract(&Twist::new(t.x, t.y, t.z, w.x, w.y, w.z))
}

pub fn perturb_pose(graph: &PatchGraph, frame: usize, sigma_t: f64, sigma_r: f64, seed: u64) -> PatchGraph {
    let mut g = graph.clone();
    g.frames[frame].pose = perturb_pose_value(&g.frames[frame].pose, sigma_t, sigma_r, seed);
    g
}
