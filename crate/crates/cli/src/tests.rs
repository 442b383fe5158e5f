use std::path::{Path, PathBuf};

use clap::Parser;

use super::{ate_between, execute, Cli, Failure};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("ba-grad").chain(args.iter().copied())).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn exec(args: &[&str]) -> Result<(), Failure> {
    execute(cli(args), None)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn code(r: Result<(), Failure>) -> u8 {
    r.err().map_or(0, |f| f.code())
}

fn experiment(name: &str, config: &str, jobs: usize) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join(config);
    exec(&["--jobs", &jobs.to_string(), "experiment", name, "--config", path(&cfg), "--out", path(dir.path())])
        .unwrap_or_else(|f| panic!("{name}: {}", f.message()));
    assert!(dir.path().join("manifest.json").exists());
    read(&dir.path().join(format!("{name}.csv")))
}

#[test]
fn sweep_experiments_match_golden_files() {
    for name in ["linearization", "interference-depth", "interference-pose"] {
        let got = experiment(name, "linearization.toml", 1);
        assert_eq!(got, read(&configs().join(format!("golden/{name}.csv"))), "{name}");
    }
    assert_eq!(experiment("toy-bias", "toy_bias.toml", 1), read(&configs().join("golden/toy-bias.csv")));
}

#[test]
fn weighted_snr_matches_golden_for_any_job_count() {
    let golden = read(&configs().join("golden/weighted-snr.csv"));
    for jobs in [1, 2] {
        assert_eq!(experiment("weighted-snr", "weighted_snr.toml", jobs), golden, "--jobs {jobs}");
    }
}

fn train_curve(config: &str, jobs: usize) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join(config);
    exec(&["--jobs", &jobs.to_string(), "train", "--config", path(&cfg), "--out", path(dir.path())])
        .unwrap_or_else(|f| panic!("{}", f.message()));
    assert!(dir.path().join("checkpoint.json").exists());
    read(&dir.path().join("curve.csv"))
}

#[test]
fn training_curves_match_golden_files() {
    let smoke = read(&configs().join("golden/train_smoke.csv"));
    assert_eq!(train_curve("train_smoke.toml", 1), smoke);
    assert_eq!(train_curve("train_smoke.toml", 2), smoke);
    assert_eq!(
        train_curve("train_benchmark.toml", 0),
        read(&configs().join("golden/train_benchmark.csv"))
    );
}

#[test]
fn gen_is_deterministic_and_writes_manifest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = configs().join("gen.toml");
    for d in [&a, &b] {
        exec(&["gen", "--config", path(&cfg), "--out", path(d.path())]).unwrap();
    }
    for seed in 0..3 {
        let f = format!("scene_{seed}.json");
        assert_eq!(read(&a.path().join(&f)), read(&b.path().join(&f)));
    }
    let m: serde_json::Value = serde_json::from_slice(&read(&a.path().join("manifest.json"))).unwrap();
    assert_eq!(m["command"], "gen");
    assert_eq!(m["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(
        m["config_hash"],
        "2eef966cd0004e5ab97383a35a8b8a6f6215bf62516813d9950f531cf407de20"
    );
    assert!(m["wall_clock_s"].as_f64().unwrap() >= 0.0);
    assert!(!a.path().join("manifest.json.tmp").exists());
}

#[test]
fn seed_override_replaces_config_seeds() {
    let d = tempfile::tempdir().unwrap();
    let cfg = configs().join("gen.toml");
    execute(cli(&["gen", "--config", path(&cfg), "--out", path(d.path())]), Some("7")).unwrap();
    assert!(d.path().join("scene_7.json").exists());
    assert!(!d.path().join("scene_0.json").exists());
    let r = execute(cli(&["gen", "--config", path(&cfg), "--out", path(d.path())]), Some("seven"));
    assert_eq!(code(r), 2);
}

#[test]
fn malformed_config_is_a_config_error_with_location() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    let out = d.path().join("out");
    std::fs::write(&cfg, "seeds = [0]\n[scene]\nn_frame = 3\n").unwrap();
    let err = exec(&["gen", "--config", path(&cfg), "--out", path(&out)]).unwrap_err();
    assert_eq!(err.code(), 2);
    assert!(err.message().contains("line 3") && err.message().contains("n_frame"), "{}", err.message());

    std::fs::write(&cfg, "[scene]\nn_frames = 1\n").unwrap();
    assert_eq!(code(exec(&["gen", "--config", path(&cfg), "--out", path(&out)])), 2);
    let missing = d.path().join("absent.toml");
    assert_eq!(code(exec(&["train", "--config", path(&missing), "--out", path(&out)])), 2);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let e = Cli::try_parse_from(["ba-grad", "ate", "--est", "a", "--gt", "b", "--verbose"]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let e = Cli::try_parse_from(["ba-grad", "experiment", "nonsense", "--out", "x"]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn help_documents_flags() {
    let mut cmd = <Cli as clap::CommandFactory>::command();
    let help = cmd
        .find_subcommand_mut("gradcheck")
        .unwrap()
        .render_long_help()
        .to_string();
    for flag in ["--scene", "--tol", "--h-delta", "--h-sigma", "--max-rel-err", "--upstream-seed"] {
        assert!(help.contains(flag), "{flag}");
    }
    let help = cmd.find_subcommand_mut("solve").unwrap().render_long_help().to_string();
    for flag in ["--n-iters", "--lambda", "--n-fixed-poses", "--z-min", "--d-min", "--d-max", "--tol"] {
        assert!(help.contains(flag), "{flag}");
    }
}

#[test]
fn gradcheck_passes_on_tiny_scene_and_fails_with_code_4() {
    let scene = configs().join("tiny_scene.json");
    exec(&["gradcheck", "--scene", path(&scene)]).unwrap();
    let r = exec(&["gradcheck", "--scene", path(&scene), "--max-rel-err", "1e-12"]);
    assert_eq!(code(r), 4);
    assert_eq!(code(exec(&["gradcheck", "--scene", path(&scene), "--tol", "0"])), 2);
}

#[test]
fn solve_then_ate() {
    let d = tempfile::tempdir().unwrap();
    let sol = d.path().join("sol.json");
    let scene = configs().join("tiny_scene.json");
    exec(&["solve", "--scene", path(&scene), "--out", path(&sol), "--n-iters", "20", "--n-fixed-poses", "2"]).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&read(&sol)).unwrap();
    assert_eq!(v["poses"].as_array().unwrap().len(), 4);
    assert_eq!(v["ba"]["n_iters"], 20);

    assert_eq!(ate_between(&sol, &sol).ok(), Some(0.0));
    let arr = d.path().join("poses.json");
    std::fs::write(&arr, serde_json::to_string(&v["poses"]).unwrap()).unwrap();
    assert_eq!(ate_between(&arr, &sol).ok(), Some(0.0));

    let bad = exec(&["solve", "--scene", path(&sol), "--out", path(&d.path().join("x.json"))]);
    assert_eq!(code(bad), 2);
    assert_eq!(code(exec(&["solve", "--scene", path(&scene), "--out", path(&sol), "--lambda=-1"])), 2);
}
