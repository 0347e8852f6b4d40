use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn racer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_racer"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RACER_WORKERS")
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/scenarios")
        .join(name)
        .display()
        .to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a 400-instance dataset (plus shifted splits) into `dir/synth`.
fn synth(dir: &Path) {
    let out = racer(
        &["gen-synth", "--scenario", &scenario("budget.toml"), "--n", "400", "--out", "synth"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const FAST: [&str; 8] = ["--policy", "linear", "--epochs", "4", "--lr", "0.05", "--dual-lr", "0.01"];

fn train(dir: &Path, out_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "synth/synthetic.jsonl", "--budget", "3", "--out", out_dir];
    args.extend(FAST);
    args.extend(extra);
    racer(&args, dir)
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&racer(&["--help"], dir.path())), 0);
    assert_eq!(code(&racer(&["--version"], dir.path())), 0);
    assert_eq!(code(&racer(&["no-such-command"], dir.path())), 1);
}

#[test]
fn train_writes_model_history_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = train(dir.path(), "run", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["model.json", "history.csv", "manifest.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "missing {f}");
    }
    assert!(stdout(&out).contains("val accuracy"));
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
}

#[test]
fn missing_budget_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = racer(&["train", "--data", "synth/synthetic.jsonl"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage: racer train"));
}

#[test]
fn acer_mode_matches_infinite_temperatures() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert_eq!(code(&train(dir.path(), "a", &["--mode", "acer"])), 0);
    assert_eq!(code(&train(dir.path(), "b", &["--tau-r", "inf", "--tau-c", "inf"])), 0);
    for f in ["model.json", "history.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert_eq!(code(&train(dir.path(), "first", &["--seed", "5"])), 0);
    let out = racer(
        &["train", "--data", "synth/synthetic.jsonl", "--config", "first/manifest.json", "--out", "second"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["model.json", "history.csv"] {
        let a = std::fs::read(dir.path().join("first").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("second").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(dir.path().join("c.toml"), "budget = 2.5\nepochs = 2\nseed = 9\n").unwrap();
    let out = racer(
        &[
            "train", "--data", "synth/synthetic.jsonl", "--config", "c.toml", "--epochs", "3", "--policy", "linear",
            "--out", "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["budget"], 2.5);
    assert_eq!(m["config"]["epochs"], 3);
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["config"]["beta"], 0.005);
}

#[test]
fn eval_model_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert_eq!(code(&train(dir.path(), "run", &[])), 0);
    let out = racer(
        &["eval", "--model", "run/model.json", "--data", "synth/ood_high.jsonl", "--out", "ev"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert!(m["accuracy"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("ev/manifest.json").is_file());

    let out = racer(
        &["eval", "--baseline", "all-instruct", "--data", "synth/synthetic.jsonl", "--out", "base"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("base/metrics.json")).unwrap()).unwrap();
    assert!((m["realized_cost"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(m["reasoning_fraction"], 0.0);

    let out = racer(&["eval", "--baseline", "sometimes", "--data", "synth/synthetic.jsonl"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert_eq!(code(&train(dir.path(), "run", &[])), 0);
    let other = racer(
        &["gen-synth", "--scenario", &scenario("separable3.toml"), "--n", "50", "--out", "other"],
        dir.path(),
    );
    assert_eq!(code(&other), 0);
    let out = racer(
        &["eval", "--model", "run/model.json", "--data", "other/synthetic.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn missing_data_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = racer(&["train", "--data", "absent.jsonl", "--budget", "2"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn sweep_baseline_only_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let out = racer(
        &["sweep", "--scenario", &scenario("budget.toml"), "--repeats", "1", "--methods", "all-instruct", "--out", "a"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let raw = std::fs::read_to_string(dir.path().join("a/raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 3, "{raw}");

    let args = [
        "sweep", "--scenario", &scenario("budget.toml"), "--budgets", "2,3", "--repeats", "2", "--methods",
        "racer,random", "--policy", "linear", "--epochs", "2", "--out", "b",
    ];
    let first = racer(&args, dir.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(stdout(&first).contains("4 training cells, 0 reused"));
    let raw_first = std::fs::read(dir.path().join("b/raw.csv")).unwrap();
    let mut resumed: Vec<&str> = args.to_vec();
    resumed.push("--resume");
    let second = racer(&resumed, dir.path());
    assert!(stdout(&second).contains("4 training cells, 4 reused"));
    assert_eq!(std::fs::read(dir.path().join("b/raw.csv")).unwrap(), raw_first);
}

#[test]
fn sweep_worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_racer"))
            .args([
                "sweep", "--scenario", &scenario("budget.toml"), "--budgets", "2,4", "--repeats", "2", "--methods",
                "racer,acer,random", "--policy", "linear", "--epochs", "2", "--out", out,
            ])
            .env("RACER_WORKERS", workers)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1", "one")), 0);
    assert_eq!(code(&run("4", "four")), 0);
    for f in ["raw.csv", "aggregate.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("one").join(f)).unwrap(),
            std::fs::read(dir.path().join("four").join(f)).unwrap()
        );
    }
}

#[test]
fn saddle_demo_pass_flat_and_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let out = racer(&["saddle-demo", "--contexts", "6", "--seed", "3", "--out", "s"], dir.path());
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("PASS"), "{text}");
    assert!(text.contains("kappa = 0.3333"), "{text}");
    assert!(dir.path().join("s/trace.csv").is_file());

    let out = racer(&["saddle-demo", "--seed", "3", "--lambda0", "star", "--iterations", "10", "--out", "f"], dir.path());
    assert_eq!(code(&out), 0);
    let trace = std::fs::read_to_string(dir.path().join("f/trace.csv")).unwrap();
    let lambdas: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(lambdas.iter().all(|l| (l - lambdas[0]).abs() < 1e-10));

    let out = racer(&["saddle-demo", "--seed", "3", "--budget", "0.01", "--out", "x"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("slack"));
}

#[test]
fn saddle_demo_reads_problem_files() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&racer(&["saddle-demo", "--seed", "8", "--out", "a"], dir.path())), 0);
    let out = racer(&["saddle-demo", "--problem", "a/problem.json", "--out", "b"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read(dir.path().join("a/trace.csv")).unwrap(),
        std::fs::read(dir.path().join("b/trace.csv")).unwrap()
    );
}

#[test]
fn gen_synth_is_deterministic_and_calibrated() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["x", "y"] {
        let o = racer(&["gen-synth", "--scenario", &scenario("ratio_high.toml"), "--out", out], dir.path());
        assert_eq!(code(&o), 0);
    }
    let a = std::fs::read(dir.path().join("x/synthetic.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("y/synthetic.jsonl")).unwrap());
    let o = racer(
        &["gen-synth", "--scenario", &scenario("ratio_high.toml"), "--format", "csv", "--out", "z"],
        dir.path(),
    );
    assert!(stdout(&o).contains("median cost ratio 11."), "{}", stdout(&o));
    assert!(dir.path().join("z/synthetic.csv").is_file());
}

#[test]
fn inspect_weights_uniform_at_infinite_temperature() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = racer(
        &["inspect-weights", "--data", "synth/synthetic.jsonl", "--tau-r", "inf", "--tau-c", "inf", "--out", "w"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("w/weights.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "1.0");
        assert_eq!(cols[4], "1.0");
    }

    let out = racer(
        &["inspect-weights", "--data", "synth/synthetic.jsonl", "--tau-c", "0.5", "--out", "t"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("t/weights.csv")).unwrap();
    let weights: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    assert!((mean - 1.0).abs() < 1e-9);
    assert!(weights.iter().any(|w| *w > 1.5));
}

#[test]
fn commands_do_not_modify_inputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let before = std::fs::read(dir.path().join("synth/synthetic.jsonl")).unwrap();
    assert_eq!(code(&train(dir.path(), "run", &[])), 0);
    let _ = racer(&["inspect-weights", "--data", "synth/synthetic.jsonl", "--model", "run/model.json"], dir.path());
    assert_eq!(std::fs::read(dir.path().join("synth/synthetic.jsonl")).unwrap(), before);
}
