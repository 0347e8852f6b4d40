use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::CommandFactory;
use racer_core::evalbench::{
    aggregate, baseline_policy, gen_synthetic, median_cost_ratio, run_sweep, shift_scenarios, write_aggregate_csv,
    write_raw_csv, BaselineKind, Method, ScenarioConfig, SweepConfig,
};
use racer_core::metrics::{evaluate_policy, EvalMode, Metrics};
use racer_core::model::ModelFile;
use racer_core::reweight::{tilt_or_uniform, Direction, RobustConfig, RobustMode, Temperature};
use racer_core::saddle::{primal_dual_iterate, solve_saddle, TabularProblem};
use racer_core::trainer::{train as run_training, write_history, TrainConfig};
use racer_core::{load_dataset, DataFormat, Dataset, PolicySpec};
use serde::{Deserialize, Serialize};

use crate::manifest::{load_config_value, ManifestBuilder};
use crate::{EvalArgs, GenSynthArgs, InspectArgs, Lambda0, SaddleArgs, SweepArgs, TrainArgs, TrainFlags};

/// Bad or missing command-line input; exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A numeric check that did not hold; exit status 3.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// 1 usage, 2 data or config, 3 numeric failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<CheckFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<racer_core::Error>() {
            return match e {
                racer_core::Error::Divergence { .. } | racer_core::Error::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn usage_of(sub: &str) -> String {
    let mut cmd = crate::Cli::command();
    cmd.build();
    cmd.find_subcommand_mut(sub)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default()
}

/// Four significant digits for human-facing summaries.
fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = 3 - x.abs().log10().floor() as i32;
    format!("{:.*}", digits.max(0) as usize, x)
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path, DataFormat::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn apply_flags(cfg: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.tau_r {
        cfg.robust.tau_reward = v;
    }
    if let Some(v) = f.tau_c {
        cfg.robust.tau_cost = v;
    }
    if let Some(v) = f.mode {
        cfg.robust.mode = v;
    }
    if let Some(v) = f.beta {
        cfg.beta = v;
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.primal_lr = v;
    }
    if let Some(v) = f.dual_lr {
        cfg.dual_lr = v;
    }
    if let Some(v) = f.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = &f.policy {
        cfg.policy = v.clone();
    }
    if let Some(v) = f.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = f.dual_schedule {
        cfg.dual_schedule = v;
    }
}

/// One spelling per robustness setting, so `--mode acer` and infinite
/// temperatures resolve to the same config.
fn canonical_robust(r: &mut RobustConfig) {
    let (tr, tc) = (r.effective_tau_reward(), r.effective_tau_cost());
    r.tau_reward = tr;
    r.tau_cost = tc;
    r.mode = match (tr.is_infinite(), tc.is_infinite()) {
        (true, true) => RobustMode::Acer,
        (false, true) => RobustMode::RacerR,
        (true, false) => RobustMode::RacerC,
        (false, false) => RobustMode::Racer,
    };
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("train");
    let file = match &a.flags.config {
        Some(p) => {
            m.input(p)?;
            Some(load_config_value(p)?)
        }
        None => None,
    };
    let mut cfg: TrainConfig = match &file {
        Some(v) => serde_json::from_value(v.clone()).context("reading training config")?,
        None => TrainConfig::default(),
    };
    let file_budget = file.as_ref().and_then(|v| v.get("budget")).is_some();
    match a.budget {
        Some(b) => cfg.budget = b,
        None if file_budget => {}
        None => {
            return Err(UsageError(format!(
                "the following required argument was not provided: --budget <BUDGET>\n\n{}",
                usage_of("train")
            ))
            .into())
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    apply_flags(&mut cfg, &a.flags);
    canonical_robust(&mut cfg.robust);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;

    m.input(&a.data)?;
    let data = load(&a.data)?;
    create_dir(&a.out)?;
    let outcome = run_training(&data, &cfg)?;

    let model_path = a.out.join("model.json");
    ModelFile::new(outcome.best.policy.clone(), outcome.instruct_cost_mean, cfg.clone()).save(&model_path)?;
    m.output(&model_path);
    let history_path = a.out.join("history.csv");
    write_history(&outcome.history, &history_path)?;
    m.output(&history_path);
    let manifest = m.finish(&a.out, &cfg, Some(cfg.seed))?;

    let b = &outcome.best;
    println!(
        "best epoch {}: val accuracy {}, cost {}, reasoning {}, lambda {}",
        b.epoch,
        sig4(b.val.accuracy),
        sig4(b.val.realized_cost),
        sig4(b.val.reasoning_fraction),
        sig4(b.lambda)
    );
    println!("wrote {}, {}, {}", model_path.display(), history_path.display(), manifest.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRecord<'a> {
    model: Option<&'a Path>,
    baseline: Option<BaselineKind>,
    data: &'a Path,
    mode: EvalMode,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    metrics: Metrics,
    instruct_cost_mean: f64,
    n: usize,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("eval");
    m.input(&a.data)?;
    let data = load(&a.data)?;
    let (policy, data) = match (&a.model, a.baseline) {
        (Some(path), _) => {
            m.input(path)?;
            let model = ModelFile::load(path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(d) = model.policy.feature_dim() {
                if d != data.dim() {
                    return Err(racer_core::Error::DimensionMismatch {
                        expected: d,
                        got: data.dim(),
                    })
                    .context("model and data disagree");
                }
            }
            let data = data.normalize_with(model.instruct_cost_mean)?;
            (model.policy, data)
        }
        (None, Some(kind)) => (baseline_policy(kind)?, data),
        (None, None) => return Err(UsageError("one of --model or --baseline is required".into()).into()),
    };
    let metrics = evaluate_policy(&policy, &data, a.mode, a.seed)?;
    create_dir(&a.out)?;
    let path = a.out.join("metrics.json");
    write_json(
        &path,
        &EvalOutput {
            metrics,
            instruct_cost_mean: data.instruct_cost_mean(),
            n: data.len(),
        },
    )?;
    m.output(&path);
    let record = EvalRecord {
        model: a.model.as_deref(),
        baseline: a.baseline,
        data: &a.data,
        mode: a.mode,
        seed: a.seed,
    };
    m.finish(&a.out, &record, Some(a.seed))?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

/// Sweep settings read from a config file; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct SweepFile {
    budgets: Option<Vec<f64>>,
    methods: Option<Vec<Method>>,
    repeats: Option<usize>,
    base_seed: Option<u64>,
    eval_mode: Option<EvalMode>,
    train: Option<TrainConfig>,
}

/// Training split plus named test splits for a scenario: an in-distribution
/// split from a disjoint seed, and the shifted splits when the scenario has them.
fn scenario_splits(path: &Path) -> Result<(Dataset, Vec<(String, Dataset)>)> {
    let scen = ScenarioConfig::load(path)?;
    let (train, shifted) = match shift_scenarios(&scen) {
        Ok(sp) if scen.shift.is_none() => (sp.train, Some((sp.ood_low, sp.ood_high))),
        _ => (gen_synthetic(&scen)?, None),
    };
    let id_cfg = ScenarioConfig {
        seed: scen.seed.wrapping_add(7),
        ..scen.clone()
    };
    let id = gen_synthetic(&id_cfg)?.normalize_with(train.instruct_cost_mean())?;
    let mut tests = vec![("id".to_string(), id)];
    if let Some((low, high)) = shifted {
        tests.push(("ood_low".to_string(), low));
        tests.push(("ood_high".to_string(), high));
    }
    Ok((train, tests))
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("sweep");
    let file: SweepFile = match &a.flags.config {
        Some(p) => {
            m.input(p)?;
            serde_json::from_value(load_config_value(p)?).context("reading sweep config")?
        }
        None => SweepFile::default(),
    };
    let defaults = SweepConfig::default();
    let mut cfg = SweepConfig {
        budgets: a.budgets.clone().or(file.budgets).unwrap_or(defaults.budgets),
        methods: a.methods.clone().or(file.methods).unwrap_or(defaults.methods),
        repeats: a.repeats.or(file.repeats).unwrap_or(defaults.repeats),
        base_seed: a.seed.or(file.base_seed).unwrap_or(defaults.base_seed),
        eval_mode: a.eval_mode.or(file.eval_mode).unwrap_or(defaults.eval_mode),
        train: file.train.unwrap_or(defaults.train),
    };
    apply_flags(&mut cfg.train, &a.flags);
    if cfg.budgets.iter().any(|b| !(*b > 1.0 && b.is_finite())) {
        return Err(UsageError("budgets must exceed 1".into()).into());
    }

    let (train_data, tests) = match (&a.scenario, &a.train_data) {
        (Some(path), _) => {
            m.input(path)?;
            scenario_splits(path)?
        }
        (None, Some(path)) => {
            m.input(path)?;
            let train = load(path)?;
            let mut tests = Vec::new();
            for (name, p) in &a.tests {
                m.input(p)?;
                tests.push((name.clone(), load(p)?.normalize_with(train.instruct_cost_mean())?));
            }
            if tests.is_empty() {
                tests.push(("train".to_string(), train.clone()));
            }
            (train, tests)
        }
        (None, None) => return Err(UsageError("one of --scenario or --train is required".into()).into()),
    };

    create_dir(&a.out)?;
    let cells = a.out.join("cells");
    if !a.resume && cells.exists() {
        std::fs::remove_dir_all(&cells).with_context(|| format!("clearing {}", cells.display()))?;
    }
    create_dir(&cells)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers).build()?;
    let result = pool.install(|| run_sweep(&train_data, &tests, &cfg, Some(&cells)))?;
    for f in &result.failures {
        eprintln!("cell {} budget {} seed {} failed: {}", f.method, f.budget, f.seed, f.message);
    }

    let raw = a.out.join("raw.csv");
    write_raw_csv(&result.records, &raw)?;
    let agg_path = a.out.join("aggregate.csv");
    let rows = aggregate(&result.records);
    write_aggregate_csv(&rows, &agg_path)?;
    m.output(&raw);
    m.output(&agg_path);
    m.output(&cells);
    m.finish(&a.out, &cfg, Some(cfg.base_seed))?;

    for r in &rows {
        let budget = r.budget.map_or_else(|| "-".to_string(), |b| b.to_string());
        println!(
            "{:<14} C={:<5} {:<9} acc {} ± {}  cost {} ± {}  (n={})",
            r.method.name(),
            budget,
            r.split,
            sig4(r.acc_mean),
            sig4(r.acc_std),
            sig4(r.cost_mean),
            sig4(r.cost_std),
            r.n
        );
    }
    println!(
        "{} training cells, {} reused, {} failed",
        result.cells,
        result.cached,
        result.failures.len()
    );
    if result.cells > 0 && result.failures.len() == result.cells {
        return Err(CheckFailed("every training cell failed".into()).into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SaddleRecord<'a> {
    problem: Option<&'a Path>,
    contexts: usize,
    seed: u64,
    beta: f64,
    budget: f64,
    max_cost: f64,
    max_weight: f64,
    lambda0: Lambda0,
    iterations: usize,
}

pub fn saddle_demo(a: SaddleArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("saddle-demo");
    let mut problem = match &a.problem {
        Some(p) => {
            m.input(p)?;
            TabularProblem::load(p)?
        }
        None => TabularProblem::random(a.contexts, a.seed, a.beta.unwrap_or(1.0), a.max_cost, a.max_weight)?,
    };
    if let Some(b) = a.beta {
        problem.beta = b;
    }
    if let Some(c) = a.budget {
        problem.budget = c;
    }
    problem.validate()?;
    let slack = problem.feasibility_slack();
    if slack <= 0.0 {
        eprintln!(
            "feasibility: All-Instruct weighted cost {} vs budget {}, slack {}",
            problem.weighted_cost_of(0),
            problem.budget,
            slack
        );
        return Err(racer_core::Error::Infeasible(format!("slack {slack} is not positive")).into());
    }

    let solution = solve_saddle(&problem, 1e-12)?;
    let lambda0 = match a.lambda0 {
        Lambda0::Value(v) => v,
        Lambda0::Star => solution.lambda_star,
    };
    let trace = primal_dual_iterate(&problem, lambda0, a.iterations)?;
    create_dir(&a.out)?;
    let trace_path = a.out.join("trace.csv");
    trace.write_csv(&trace_path)?;
    let problem_path = a.out.join("problem.json");
    problem.save(&problem_path)?;
    m.output(&trace_path);
    m.output(&problem_path);
    let record = SaddleRecord {
        problem: a.problem.as_deref(),
        contexts: problem.contexts.len(),
        seed: a.seed,
        beta: problem.beta,
        budget: problem.budget,
        max_cost: a.max_cost,
        max_weight: a.max_weight,
        lambda0: a.lambda0,
        iterations: a.iterations,
    };
    m.finish(&a.out, &record, Some(a.seed))?;

    let c = &trace.constants;
    println!(
        "M = {}, K = {}, beta = {}, eta = {}, kappa = {}, lambda* = {}, slack = {}",
        sig4(c.m),
        sig4(c.k),
        sig4(problem.beta),
        sig4(c.eta),
        sig4(c.kappa),
        sig4(solution.lambda_star),
        sig4(slack)
    );
    let kl = trace.bound_violations(1e-12);
    let dual = trace.contraction_violations(1e-10);
    if kl.is_empty() && dual.is_empty() {
        println!(
            "PASS: KL bound and multiplier contraction hold at all {} iterates (kappa = {})",
            trace.rows.len(),
            c.kappa
        );
        Ok(())
    } else {
        println!(
            "FAIL: KL bound violated at {} iterates, contraction at {}",
            kl.len(),
            dual.len()
        );
        Err(CheckFailed("convergence bound violated".into()).into())
    }
}

#[derive(Debug, Serialize)]
struct SynthRecord<'a> {
    scenario: &'a ScenarioConfig,
    format: &'a str,
}

pub fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("gen-synth");
    m.input(&a.scenario)?;
    let mut scen = ScenarioConfig::load(&a.scenario)?;
    if let Some(n) = a.n {
        scen.n = n;
    }
    if let Some(s) = a.seed {
        scen.seed = s;
    }
    scen.validate()?;
    let format = if a.format == "csv" { DataFormat::Csv } else { DataFormat::Jsonl };
    create_dir(&a.out)?;
    let mut written: Vec<(PathBuf, Dataset)> = Vec::new();
    written.push((a.out.join(format!("synthetic.{}", a.format)), gen_synthetic(&scen)?));
    let shiftable = scen.domains.len() > 1 && scen.domains.iter().any(|d| d.ratio_median != scen.domains[0].ratio_median);
    if shiftable {
        let sp = shift_scenarios(&scen)?;
        written.push((a.out.join(format!("ood_low.{}", a.format)), sp.ood_low));
        written.push((a.out.join(format!("ood_high.{}", a.format)), sp.ood_high));
    }
    for (path, ds) in &written {
        ds.write(path, format)?;
        m.output(path);
        println!(
            "{}: {} instances, median cost ratio {}, instruct accuracy {}, reasoning accuracy {}",
            path.display(),
            ds.len(),
            sig4(median_cost_ratio(ds)),
            sig4(ds.accuracy_of(0)),
            sig4(ds.accuracy_of(1))
        );
    }
    m.finish(&a.out, &SynthRecord { scenario: &scen, format: &a.format }, Some(scen.seed))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct InspectRecord<'a> {
    data: &'a Path,
    model: Option<&'a Path>,
    tau_r: Temperature,
    tau_c: Temperature,
}

pub fn inspect_weights(a: InspectArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("inspect-weights");
    m.input(&a.data)?;
    let data = load(&a.data)?;
    let (policy, data, robust) = match &a.model {
        Some(path) => {
            m.input(path)?;
            let model = ModelFile::load(path).with_context(|| format!("loading {}", path.display()))?;
            let data = data.normalize_with(model.instruct_cost_mean)?;
            (model.policy, data, model.config.robust)
        }
        None => (PolicySpec::constant(0.5)?, data, RobustConfig::default()),
    };
    let tau_r = a.tau_r.unwrap_or(robust.effective_tau_reward());
    let tau_c = a.tau_c.unwrap_or(robust.effective_tau_cost());

    let mut reward = Vec::with_capacity(data.len());
    let mut cost = Vec::with_capacity(data.len());
    for x in data.instances() {
        let p = policy.prob(x)?;
        reward.push((1.0 - p) * x.reward(0) + p * x.reward(1));
        cost.push((1.0 - p) * x.cost[0] + p * x.cost[1]);
    }
    let wr = tilt_or_uniform(&reward, tau_r, Direction::WorstLow)?;
    let wc = tilt_or_uniform(&cost, tau_c, Direction::WorstHigh)?;

    create_dir(&a.out)?;
    let path = a.out.join("weights.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "expected_reward", "expected_cost", "reward_weight", "cost_weight"])?;
    for (i, x) in data.instances().iter().enumerate() {
        w.write_record([
            x.id.clone(),
            format!("{:?}", reward[i]),
            format!("{:?}", cost[i]),
            format!("{:?}", wr.weights[i]),
            format!("{:?}", wc.weights[i]),
        ])?;
    }
    w.flush()?;
    m.output(&path);
    m.finish(
        &a.out,
        &InspectRecord {
            data: &a.data,
            model: a.model.as_deref(),
            tau_r,
            tau_c,
        },
        None,
    )?;
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} instances; max reward weight {}, max cost weight {}; wrote {}",
        data.len(),
        sig4(max(&wr.weights)),
        sig4(max(&wc.weights)),
        path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_significant_digits() {
        assert_eq!(sig4(0.123456), "0.1235");
        assert_eq!(sig4(12.3456), "12.35");
        assert_eq!(sig4(12345.6), "12346");
        assert_eq!(sig4(0.0), "0");
    }

    #[test]
    fn acer_spellings_agree() {
        let mut a = RobustConfig::default().with_mode(RobustMode::Acer);
        let mut b = RobustConfig {
            tau_reward: Temperature::INFINITE,
            tau_cost: Temperature::INFINITE,
            ..RobustConfig::default()
        };
        canonical_robust(&mut a);
        canonical_robust(&mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let usage: anyhow::Error = UsageError("x".into()).into();
        assert_eq!(exit_code(&usage), 1);
        let data: anyhow::Error = racer_core::Error::EmptyDataset.into();
        assert_eq!(exit_code(&data), 2);
        let num: anyhow::Error = racer_core::Error::Divergence {
            epoch: 0,
            batch: 0,
            message: "nan".into(),
        }
        .into();
        assert_eq!(exit_code(&num.context("training")), 3);
    }
}
