use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ba::BAConfig;
use crate::backward::{DEFAULT_GAMMA_MAX, DEFAULT_GAMMA_MIN};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_K_SKIP;
use crate::synth::SynthConfig;

/// Outer loss / gradient treatment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Plain flow loss plus pose loss with fixed coefficients.
    #[default]
    Unweighted,
    /// Flow loss weighted by the BA weights (stop-gradient), balanced against the pose loss.
    Weighted,
    /// BA targets interpolated from ground truth toward the model, annealed over training.
    GtInterp,
    /// Target gradients whose sign disagrees with the ground-truth direction are zeroed.
    GradCorrect,
    /// Weighted flow loss with weights computed from the flow errors themselves.
    Heuristic,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Unweighted,
        Strategy::Weighted,
        Strategy::GtInterp,
        Strategy::GradCorrect,
        Strategy::Heuristic,
    ];

    /// Whether the total is `L_pose + beta * L_flow` with a refreshed beta.
    pub fn balanced(self) -> bool {
        matches!(self, Strategy::Weighted | Strategy::Heuristic)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Unweighted => "unweighted",
            Strategy::Weighted => "weighted",
            Strategy::GtInterp => "gt-interp",
            Strategy::GradCorrect => "grad-correct",
            Strategy::Heuristic => "heuristic",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Inner iterations on the initial window.
    pub inner_iters: usize,
    pub streaming: bool,
    /// Frames in the initial streaming window.
    pub stream_init_frames: usize,
    /// Inner iterations after each added frame.
    pub per_frame_iters: usize,
    /// Pose loss is skipped on the first `k_skip` inner iterations.
    pub k_skip: usize,
    /// Outer iterations between balance-coefficient refreshes.
    pub beta_period: usize,
    /// Apply the flow loss only to the last inner iterate.
    pub flow_final_only: bool,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the parameter gradient to at most this norm (0 disables).
    pub max_grad_norm: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Project the common-scale direction out of the solver's weight gradients.
    pub project_weight_scale: bool,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Validation every this many outer iterations.
    pub val_every: usize,
    pub val_scenes: usize,
    pub hidden: usize,
    /// Pixel scale of the residual features and the revision head.
    pub feature_scale: f64,
    pub head_init_std: f64,
    /// Weight fed to the first predictor call as the "previous" weight.
    pub init_sigma: f64,
    pub init_depth_range: (f64, f64),
    pub divergence_threshold: f64,
    pub ba: BAConfig,
    pub scene: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Unweighted,
            inner_iters: 8,
            streaming: false,
            stream_init_frames: 8,
            per_frame_iters: 2,
            k_skip: DEFAULT_K_SKIP,
            beta_period: 50,
            flow_final_only: false,
            optimizer: Optimizer::Adam,
            lr: 3e-3,
            momentum: 0.9,
            max_grad_norm: 0.0,
            gamma_min: DEFAULT_GAMMA_MIN,
            gamma_max: DEFAULT_GAMMA_MAX,
            project_weight_scale: false,
            batch_size: 8,
            iterations: 300,
            seed: 0,
            val_every: 25,
            val_scenes: 16,
            hidden: 16,
            feature_scale: 10.0,
            head_init_std: 0.1,
            init_sigma: 0.5,
            init_depth_range: (2.0, 8.0),
            divergence_threshold: 1e6,
            ba: BAConfig {
                n_iters: 8,
                ..BAConfig::default()
            },
            scene: SynthConfig {
                outlier_frac: 0.2,
                step_scale: 0.05,
                ..SynthConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.inner_iters == 0 {
            return bad("inner_iters must be at least 1");
        }
        if self.beta_period == 0 || self.val_every == 0 {
            return bad("periods must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if !(self.feature_scale > 0.0) || !(self.max_grad_norm >= 0.0) {
            return bad("feature_scale must be positive and max_grad_norm non-negative");
        }
        if self.gamma_min > self.gamma_max {
            return bad("gamma_min exceeds gamma_max");
        }
        if !(self.init_sigma > 0.0 && self.init_sigma <= 1.0) {
            return bad("init_sigma must lie in (0, 1]");
        }
        let (lo, hi) = self.init_depth_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("init_depth_range must be positive and ordered");
        }
        if self.streaming
            && (self.stream_init_frames < 2 || self.stream_init_frames > self.scene.n_frames || self.per_frame_iters == 0)
        {
            return bad("streaming needs 2 <= stream_init_frames <= n_frames and per_frame_iters >= 1");
        }
        self.ba.validate()?;
        self.scene.validate()
    }

    /// Number of frames in each inner iteration's window.
    pub fn schedule(&self) -> Vec<usize> {
        let n = self.scene.n_frames;
        if !self.streaming {
            return vec![n; self.inner_iters];
        }
        let mut s = vec![self.stream_init_frames; self.inner_iters];
        for c in self.stream_init_frames + 1..=n {
            s.extend(std::iter::repeat_n(c, self.per_frame_iters));
        }
        s
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// TOML for `.toml` paths, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&s)
        } else {
            Self::from_json(&s)
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
