use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ba_grad::analysis::{
    ba_input_oracle, csv_string, exp_flow_interference, exp_linearization, exp_toy_bias, exp_weighted_snr,
    grad_error_records, snr_records, ExperimentRecord, NoiseTarget, SweepConfig, ToyBiasSweep, WeightedSnrConfig,
};
use ba_grad::ba::{ba_solve, BAConfig};
use ba_grad::lie::{ate, Pose};
use ba_grad::scene::PatchGraph;
use ba_grad::synth::{generate_scene, init_estimates, SynthConfig};
use ba_grad::trainer::{train, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Seed override for smoke tests.
const SEED_ENV: &str = "BA_GRAD_SEED";

#[derive(Parser, Debug)]
#[command(name = "ba-grad", version, about = "Differentiable bundle adjustment: scenes, solves, gradient checks, experiments, training")]
struct Cli {
    /// Worker threads for sweeps and batches (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes, one JSON file per seed.
    Gen {
        /// TOML or JSON generation config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run bundle adjustment on a scene from its current estimates.
    Solve {
        #[arg(long)]
        scene: PathBuf,
        /// Solution JSON path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ba: BaFlags,
    },
    /// Compare the implicit gradients against finite differences through re-solves.
    Gradcheck {
        #[arg(long)]
        scene: PathBuf,
        /// Solver iterations (the base solve must converge).
        #[arg(long, default_value_t = 50)]
        n_iters: usize,
        #[arg(long, default_value_t = 1e-9)]
        lambda: f64,
        #[arg(long, default_value_t = 2)]
        n_fixed_poses: usize,
        /// Step-norm convergence threshold.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Seed of the random upstream gradients.
        #[arg(long, default_value_t = 0)]
        upstream_seed: u64,
        /// Finite-difference step on the targets (px).
        #[arg(long, default_value_t = 1e-3)]
        h_delta: f64,
        /// Finite-difference step on the weights.
        #[arg(long, default_value_t = 1e-4)]
        h_sigma: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-3)]
        max_rel_err: f64,
    },
    /// Run a gradient-noise experiment and write its CSV.
    Experiment {
        name: ExperimentName,
        /// TOML or JSON experiment config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the predictor; writes curve.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sim(3)-aligned absolute trajectory error between two pose files.
    Ate {
        /// JSON array of [qw, qx, qy, qz, tx, ty, tz] poses, or a solution file.
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExperimentName {
    Linearization,
    InterferenceDepth,
    InterferencePose,
    WeightedSnr,
    ToyBias,
}

impl ExperimentName {
    fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Linearization => "linearization",
            ExperimentName::InterferenceDepth => "interference-depth",
            ExperimentName::InterferencePose => "interference-pose",
            ExperimentName::WeightedSnr => "weighted-snr",
            ExperimentName::ToyBias => "toy-bias",
        }
    }
}

/// Solver settings; each flag overrides the matching default.
#[derive(Args, Debug)]
struct BaFlags {
    #[arg(long)]
    n_iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_fixed_poses: Option<usize>,
    #[arg(long)]
    z_min: Option<f64>,
    #[arg(long)]
    d_min: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

impl BaFlags {
    fn config(&self) -> BAConfig {
        let d = BAConfig::default();
        BAConfig {
            n_iters: self.n_iters.unwrap_or(d.n_iters),
            lambda: self.lambda.unwrap_or(d.lambda),
            n_fixed_poses: self.n_fixed_poses.unwrap_or(d.n_fixed_poses),
            z_min: self.z_min.unwrap_or(d.z_min),
            d_min: self.d_min.unwrap_or(d.d_min),
            d_max: self.d_max.unwrap_or(d.d_max),
            tol: self.tol.unwrap_or(d.tol),
        }
    }
}

/// Scene generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenConfig {
    scene: SynthConfig,
    seeds: Vec<u64>,
    /// Replace the estimates with identity poses and random depths in this range.
    init_depth_range: Option<(f64, f64)>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scene: SynthConfig::default(),
            seeds: vec![0],
            init_depth_range: None,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
    Gradcheck(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Gradcheck(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Gradcheck(m) => m,
        }
    }
}

type Run<T> = Result<T, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seeds: Vec<u64>,
    tool_version: String,
    outputs: Vec<String>,
    wall_clock_s: f64,
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Write through a sibling temporary file and rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Run<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| runtime_err(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config_hash: String,
    seeds: Vec<u64>,
    outputs: &[PathBuf],
    start: Instant,
) -> Run<()> {
    let m = RunManifest {
        command: command.into(),
        config_hash,
        seeds,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let s = serde_json::to_string_pretty(&m).map_err(runtime_err)? + "\n";
    write_atomic(&dir.join("manifest.json"), s.as_bytes())
}

fn read(path: &Path) -> Run<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// TOML for `.toml` paths, JSON otherwise. Parse errors carry line and field.
fn load_config<T: DeserializeOwned>(path: &Path) -> Run<T> {
    let s = read(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&s).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&s).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn parse_seed(v: Option<&str>) -> Run<Option<u64>> {
    v.map(|v| {
        v.trim()
            .parse()
            .map_err(|_| Failure::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))
    })
    .transpose()
}

fn create_dir(dir: &Path) -> Run<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime_err(format!("{}: {e}", dir.display())))
}

fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>) -> Run<()> {
    let start = Instant::now();
    let mut cfg: GenConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.scene.validate().map_err(config_err)?;
    if cfg.seeds.is_empty() {
        return Err(Failure::Config("seeds must not be empty".into()));
    }
    if let Some((lo, hi)) = cfg.init_depth_range {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Failure::Config("init_depth_range must be positive and ordered".into()));
        }
    }
    create_dir(out)?;
    let mut outputs = Vec::new();
    for &seed in &cfg.seeds {
        let (g, _) = generate_scene(&cfg.scene.with_seed(seed)).map_err(runtime_err)?;
        let g = match cfg.init_depth_range {
            Some(r) => init_estimates(&g, r, seed),
            None => g,
        };
        let path = out.join(format!("scene_{seed}.json"));
        let json = g.to_json().map_err(runtime_err)? + "\n";
        write_atomic(&path, json.as_bytes())?;
        outputs.push(path);
    }
    write_manifest(out, "gen", sha256_json(&cfg), cfg.seeds.clone(), &outputs, start)
}

#[derive(Debug, Serialize, Deserialize)]
struct SolutionFile {
    poses: Vec<[f64; 7]>,
    depths: Vec<f64>,
    iterations: usize,
    last_step_norm: f64,
    objective: f64,
    ba: BAConfig,
}

fn load_scene(path: &Path) -> Run<PatchGraph> {
    PatchGraph::from_json(&read(path)?).map_err(config_err)
}

fn cmd_solve(scene: &Path, out: &Path, flags: &BaFlags) -> Run<()> {
    let cfg = flags.config();
    cfg.validate().map_err(config_err)?;
    let g = load_scene(scene)?;
    let sol = ba_solve(&g, &cfg).map_err(runtime_err)?;
    let file = SolutionFile {
        poses: sol.poses.iter().map(Pose::to_array).collect(),
        depths: sol.depths.clone(),
        iterations: sol.iterations,
        last_step_norm: sol.last_step_norm,
        objective: sol.objective(),
        ba: cfg,
    };
    let s = serde_json::to_string_pretty(&file).map_err(runtime_err)? + "\n";
    write_atomic(out, s.as_bytes())?;
    println!("objective {:e} after {} iterations", file.objective, file.iterations);
    Ok(())
}

fn cmd_gradcheck(
    scene: &Path,
    cfg: BAConfig,
    upstream_seed: u64,
    h_delta: f64,
    h_sigma: f64,
    max_rel_err: f64,
) -> Run<()> {
    cfg.validate().map_err(config_err)?;
    if cfg.tol <= 0.0 {
        return Err(Failure::Config("gradcheck needs a positive --tol".into()));
    }
    let g = load_scene(scene)?;
    let r = ba_input_oracle(&g, &cfg, upstream_seed, h_delta, h_sigma).map_err(runtime_err)?;
    let ok = r.rel_err_delta < max_rel_err && r.rel_err_sigma < max_rel_err;
    println!("targets  rel_err {:.3e}", r.rel_err_delta);
    println!("weights  rel_err {:.3e}", r.rel_err_sigma);
    println!("condition {:.3e}", r.condition);
    println!("{}", if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Failure::Gradcheck(format!("relative error above {max_rel_err:e}")))
    }
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Run<T> {
    path.map_or_else(|| Ok(T::default()), load_config)
}

fn cmd_experiment(name: ExperimentName, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Run<()> {
    let start = Instant::now();
    let (records, hash, seeds): (Vec<ExperimentRecord>, String, Vec<u64>) = match name {
        ExperimentName::Linearization | ExperimentName::InterferenceDepth | ExperimentName::InterferencePose => {
            let mut cfg: SweepConfig = load_or_default(config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            cfg.validate().map_err(config_err)?;
            let recs = match name {
                ExperimentName::Linearization => {
                    snr_records(name.as_str(), &exp_linearization(&cfg).map_err(runtime_err)?)
                }
                _ => {
                    let target = if name == ExperimentName::InterferenceDepth {
                        NoiseTarget::DepthSubset
                    } else {
                        NoiseTarget::FirstPose
                    };
                    grad_error_records(target.experiment(), &exp_flow_interference(&cfg, target).map_err(runtime_err)?)
                }
            };
            (recs, sha256_json(&cfg), cfg.seeds.clone())
        }
        ExperimentName::WeightedSnr => {
            let mut cfg: WeightedSnrConfig = load_or_default(config)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            cfg.validate().map_err(config_err)?;
            let recs = snr_records(name.as_str(), &exp_weighted_snr(&cfg).map_err(runtime_err)?);
            (recs, sha256_json(&cfg), vec![cfg.base_seed])
        }
        ExperimentName::ToyBias => {
            let mut cfg: ToyBiasSweep = load_or_default(config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let recs = exp_toy_bias(&cfg).map_err(|e| match e {
                ba_grad::Error::InvalidInput(_) => config_err(e),
                _ => runtime_err(e),
            })?;
            (recs, sha256_json(&cfg), cfg.seeds.clone())
        }
    };
    create_dir(out)?;
    let path = out.join(format!("{}.csv", name.as_str()));
    write_atomic(&path, csv_string(&records).as_bytes())?;
    write_manifest(out, &format!("experiment {}", name.as_str()), hash, seeds, &[path], start)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Run<()> {
    let start = Instant::now();
    let mut cfg: TrainConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config_err)?;
    let outcome = train(&cfg).map_err(runtime_err)?;
    create_dir(out)?;
    let curve = out.join("curve.csv");
    let mut buf = Vec::new();
    outcome.curve.write_csv(&mut buf).map_err(runtime_err)?;
    write_atomic(&curve, &buf)?;
    let ckpt = out.join("checkpoint.json");
    let s = serde_json::to_string_pretty(&outcome.checkpoint).map_err(runtime_err)? + "\n";
    write_atomic(&ckpt, s.as_bytes())?;
    if let Some(v) = outcome.curve.final_validation() {
        println!("final validation flow error {v:.4} px");
    }
    write_manifest(out, "train", sha256_json(&cfg), vec![cfg.seed], &[curve, ckpt], start)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PoseFile {
    Poses(Vec<[f64; 7]>),
    Solution { poses: Vec<[f64; 7]> },
}

fn load_poses(path: &Path) -> Run<Vec<Pose>> {
    let f: PoseFile = serde_json::from_str(&read(path)?)
        .map_err(|e| Failure::Config(format!("{}: expected an array of 7-element poses: {e}", path.display())))?;
    let arrays = match f {
        PoseFile::Poses(p) | PoseFile::Solution { poses: p } => p,
    };
    arrays.into_iter().map(|a| Pose::from_array(a).map_err(config_err)).collect()
}

fn ate_between(est: &Path, gt: &Path) -> Run<f64> {
    let (e, g) = (load_poses(est)?, load_poses(gt)?);
    if e.len() != g.len() {
        return Err(Failure::Config(format!("{} poses against {}", e.len(), g.len())));
    }
    if e == g {
        return Ok(0.0);
    }
    ate(&e, &g).map_err(runtime_err)
}

fn cmd_ate(est: &Path, gt: &Path) -> Run<()> {
    println!("{}", ate_between(est, gt)?);
    Ok(())
}

fn run(cli: Cli, seed: Option<u64>) -> Run<()> {
    match cli.command {
        Command::Gen { config, out } => cmd_gen(&config, &out, seed),
        Command::Solve { scene, out, ba } => cmd_solve(&scene, &out, &ba),
        Command::Gradcheck {
            scene,
            n_iters,
            lambda,
            n_fixed_poses,
            tol,
            upstream_seed,
            h_delta,
            h_sigma,
            max_rel_err,
        } => {
            let cfg = BAConfig {
                n_iters,
                lambda,
                n_fixed_poses,
                tol,
                ..BAConfig::default()
            };
            cmd_gradcheck(&scene, cfg, upstream_seed, h_delta, h_sigma, max_rel_err)
        }
        Command::Experiment { name, config, out } => cmd_experiment(name, config.as_deref(), &out, seed),
        Command::Train { config, out } => cmd_train(&config, &out, seed),
        Command::Ate { est, gt } => cmd_ate(&est, &gt),
    }
}

/// Run `cli` on a pool of `--jobs` threads; `seed_env` is the raw seed override.
fn execute(cli: Cli, seed_env: Option<&str>) -> Run<()> {
    let seed = parse_seed(seed_env)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(runtime_err)?;
    pool.install(|| run(cli, seed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed_env = std::env::var(SEED_ENV).ok();
    match execute(cli, seed_env.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests;
