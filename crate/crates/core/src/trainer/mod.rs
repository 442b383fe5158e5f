//! Predictor, inner loop, and the outer training loop.

mod config;
mod inner;
mod predictor;

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Optimizer, Strategy, TrainConfig};
pub use inner::{correct_target_grad, inner_loop, remove_scale_component, tape_backward, InnerOptions, InnerStep, Policy, SceneLoss, Tape};
pub use predictor::{features, predictor_backward, predictor_forward, Features, ForwardCache, Predictor, N_FEATURES};

use crate::analysis::{batch_snr, median, norm};
use crate::error::{Error, Result};
use crate::losses::{balance_beta, FLOW_COEF, POSE_COEF};
use crate::scene::PatchGraph;
use crate::synth::{generate_scene, init_estimates};

/// Offset separating validation scene seeds from training scene seeds.
pub const VALIDATION_SEED_BASE: u64 = 1 << 40;

/// Training scene with initial estimates: identity poses, random depths.
pub fn make_scene(cfg: &TrainConfig, seed: u64) -> Result<PatchGraph> {
    let (g, _) = generate_scene(&cfg.scene.with_seed(seed))?;
    Ok(init_estimates(&g, cfg.init_depth_range, seed))
}

pub fn validation_scenes(cfg: &TrainConfig) -> Result<Vec<PatchGraph>> {
    (0..cfg.val_scenes as u64)
        .map(|i| make_scene(cfg, VALIDATION_SEED_BASE + i))
        .collect()
}

/// Loss and parameter gradients of one scene.
#[derive(Clone, Debug)]
pub struct SceneGrad {
    pub loss: SceneLoss,
    pub grad: Vec<f64>,
    pub grad_flow: Option<Vec<f64>>,
    pub grad_pose: Option<Vec<f64>>,
}

pub fn scene_grad(
    scene: &PatchGraph,
    predictor: &Predictor,
    opts: &InnerOptions,
    coefs: (f64, f64),
    split: bool,
) -> Result<SceneGrad> {
    let tape = inner_loop(scene, Policy::Net(predictor), opts)?;
    let grad = tape_backward(&tape, predictor, opts, coefs.0, coefs.1)?;
    let (grad_flow, grad_pose) = if split {
        (
            Some(tape_backward(&tape, predictor, opts, 1.0, 0.0)?),
            Some(tape_backward(&tape, predictor, opts, 0.0, 1.0)?),
        )
    } else {
        (None, None)
    };
    Ok(SceneGrad {
        loss: tape.loss(),
        grad,
        grad_flow,
        grad_pose,
    })
}

#[derive(Clone, Debug)]
pub struct OuterStep {
    /// Mean over surviving scenes.
    pub grad: Vec<f64>,
    pub grad_flow: Option<Vec<f64>>,
    pub grad_pose: Option<Vec<f64>>,
    pub losses: Vec<SceneLoss>,
    /// Revision-head block of every surviving scene's gradient.
    pub head_grads: Vec<Vec<f64>>,
    pub failed: usize,
}

fn mean_of(vs: &[&Vec<f64>], n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let k = vs.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= k);
    m
}

/// One batch: per-scene forward and reverse passes, failures dropped as long
/// as at least half of the batch survives.
pub fn outer_step(
    scenes: &[PatchGraph],
    predictor: &Predictor,
    opts: &InnerOptions,
    coefs: (f64, f64),
    split: bool,
) -> Result<OuterStep> {
    let results: Vec<Result<SceneGrad>> = scenes
        .par_iter()
        .map(|s| scene_grad(s, predictor, opts, coefs, split))
        .collect();
    let ok: Vec<SceneGrad> = results.into_iter().filter_map(|r| r.ok()).collect();
    let failed = scenes.len() - ok.len();
    if ok.is_empty() || 2 * ok.len() < scenes.len() {
        return Err(Error::BatchFailure {
            survived: ok.len(),
            total: scenes.len(),
        });
    }
    let n = predictor.theta.len();
    let grad = mean_of(&ok.iter().map(|s| &s.grad).collect::<Vec<_>>(), n);
    let (grad_flow, grad_pose) = if split {
        (
            Some(mean_of(&ok.iter().filter_map(|s| s.grad_flow.as_ref()).collect::<Vec<_>>(), n)),
            Some(mean_of(&ok.iter().filter_map(|s| s.grad_pose.as_ref()).collect::<Vec<_>>(), n)),
        )
    } else {
        (None, None)
    };
    let head = predictor.delta_head();
    Ok(OuterStep {
        grad,
        grad_flow,
        grad_pose,
        losses: ok.iter().map(|s| s.loss).collect(),
        head_grads: ok.iter().map(|s| s.grad[head.clone()].to_vec()).collect(),
        failed,
    })
}

/// First-order optimizer state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    momentum: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(cfg: &TrainConfig, n: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            Optimizer::Momentum => {
                for ((x, m), g) in theta.iter_mut().zip(&mut self.m).zip(grad) {
                    *m = self.momentum * *m + g;
                    *x -= self.lr * *m;
                }
            }
            Optimizer::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                for (((x, m), v), g) in theta.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Median validation metrics over the scenes whose inner loop succeeded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub flow_error: f64,
    pub ate: f64,
    pub failed: usize,
}

pub fn validate(scenes: &[PatchGraph], predictor: &Predictor, opts: &InnerOptions) -> Validation {
    let losses: Vec<Option<SceneLoss>> = scenes
        .par_iter()
        .map(|s| inner_loop(s, Policy::Net(predictor), opts).ok().map(|t| t.loss()))
        .collect();
    let ok: Vec<SceneLoss> = losses.into_iter().flatten().collect();
    let flows: Vec<f64> = ok.iter().map(|l| l.final_flow_error).collect();
    let ates: Vec<f64> = ok.iter().filter_map(|l| l.ate).collect();
    Validation {
        flow_error: median(&flows).unwrap_or(f64::NAN),
        ate: median(&ates).unwrap_or(f64::NAN),
        failed: scenes.len() - ok.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub loss: Option<f64>,
    pub flow: Option<f64>,
    pub pose: Option<f64>,
    pub beta: Option<f64>,
    pub val_flow_error: Option<f64>,
    pub val_ate: Option<f64>,
    pub batch_snr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub records: Vec<CurveRecord>,
}

impl TrainCurve {
    /// `(iteration, validation flow error)` for every validation point.
    pub fn validation(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.val_flow_error.map(|v| (r.iteration, v)))
            .collect()
    }

    pub fn final_validation(&self) -> Option<f64> {
        self.validation().last().map(|v| v.1)
    }

    /// First validated iteration whose flow error is at most `tau`.
    pub fn iterations_to_reach(&self, tau: f64) -> Option<usize> {
        self.validation().into_iter().find(|(_, v)| *v <= tau).map(|v| v.0)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r).map_err(|e| Error::Serialization(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub config_hash: String,
    pub predictor: Predictor,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&s).map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: TrainCurve,
    pub predictor: Predictor,
    pub checkpoint: Checkpoint,
}

pub fn initial_predictor(cfg: &TrainConfig) -> Predictor {
    Predictor::random(cfg.hidden, cfg.feature_scale, cfg.head_init_std, cfg.seed ^ 0x5eed)
}

/// Interpolation weight toward ground truth at outer iteration `it`.
pub fn interp_alpha(cfg: &TrainConfig, it: usize) -> f64 {
    if cfg.strategy != Strategy::GtInterp || cfg.iterations == 0 {
        return 0.0;
    }
    1.0 - it as f64 / cfg.iterations as f64
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let val_set = validation_scenes(cfg)?;
    let val_opts = InnerOptions::from_config(cfg, 0.0);
    let mut predictor = initial_predictor(cfg);
    let mut opt = OptimizerState::new(cfg, predictor.theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = TrainCurve::default();
    let v0 = validate(&val_set, &predictor, &val_opts);
    curve.records.push(CurveRecord {
        iteration: 0,
        loss: None,
        flow: None,
        pose: None,
        beta: None,
        val_flow_error: Some(v0.flow_error),
        val_ate: Some(v0.ate),
        batch_snr: None,
    });
    let mut beta = 1.0;
    for it in 0..cfg.iterations {
        let scenes: Vec<PatchGraph> = (0..cfg.batch_size)
            .map(|_| make_scene(cfg, rng.next_u64() >> 1))
            .collect::<Result<_>>()?;
        let opts = InnerOptions::from_config(cfg, interp_alpha(cfg, it));
        let bal = cfg.strategy.balanced();
        let refresh = bal && it % cfg.beta_period == 0;
        let coefs = |b: f64| if bal { (b, 1.0) } else { (FLOW_COEF, POSE_COEF) };
        let mut step = outer_step(&scenes, &predictor, &opts, coefs(beta), refresh)?;
        if refresh {
            let (gf, gp) = (step.grad_flow.as_ref().unwrap(), step.grad_pose.as_ref().unwrap());
            if let Ok(b) = balance_beta(gp, gf) {
                if b > 0.0 && b.is_finite() {
                    beta = b;
                    step.grad = gf.iter().zip(gp).map(|(f, p)| beta * f + p).collect();
                }
            }
        }
        let (cf, cp) = coefs(beta);
        let k = step.losses.len() as f64;
        let flow = step.losses.iter().map(|l| l.flow).sum::<f64>() / k;
        let pose = step.losses.iter().map(|l| l.pose).sum::<f64>() / k;
        let loss = cf * flow + cp * pose;
        if !loss.is_finite() || loss > cfg.divergence_threshold || step.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it + 1, loss });
        }
        let mut grad = step.grad;
        let gn = norm(&grad);
        if cfg.max_grad_norm > 0.0 && gn > cfg.max_grad_norm {
            grad.iter_mut().for_each(|g| *g *= cfg.max_grad_norm / gn);
        }
        opt.step(&mut predictor.theta, &grad);
        let snr = batch_snr(&step.head_grads).ok().and_then(|s| s.value());
        let done = it + 1;
        let val = (done % cfg.val_every == 0 || done == cfg.iterations).then(|| validate(&val_set, &predictor, &val_opts));
        curve.records.push(CurveRecord {
            iteration: done,
            loss: Some(loss),
            flow: Some(flow),
            pose: Some(pose),
            beta: cfg.strategy.balanced().then_some(beta),
            val_flow_error: val.map(|v| v.flow_error),
            val_ate: val.map(|v| v.ate),
            batch_snr: snr,
        });
    }
    let checkpoint = Checkpoint {
        iteration: cfg.iterations,
        config_hash: cfg.hash(),
        predictor: predictor.clone(),
    };
    Ok(TrainOutcome {
        curve,
        predictor,
        checkpoint,
    })
}
