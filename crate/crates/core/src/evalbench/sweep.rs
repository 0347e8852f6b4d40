//! Budget sweeps over methods and seeds, with paired Random baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, EvalMode, Metrics};
use crate::numeric::{mean, std_dev};
use crate::policy::PolicySpec;
use crate::reweight::RobustMode;
use crate::trainer::{train, TrainConfig};

/// Budget grid used when none is given.
pub const DEFAULT_BUDGETS: [f64; 10] = [2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0, 10.0];
pub const DEFAULT_REPEATS: usize = 10;
/// Random-baseline rate when no learnable method is available for pairing.
pub const UNPAIRED_RANDOM_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Racer,
    RacerR,
    RacerC,
    Acer,
    AllInstruct,
    AllReasoning,
    Random,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Racer,
        Method::RacerR,
        Method::RacerC,
        Method::Acer,
        Method::AllInstruct,
        Method::AllReasoning,
        Method::Random,
    ];

    pub fn robust_mode(self) -> Option<RobustMode> {
        match self {
            Method::Racer => Some(RobustMode::Racer),
            Method::RacerR => Some(RobustMode::RacerR),
            Method::RacerC => Some(RobustMode::RacerC),
            Method::Acer => Some(RobustMode::Acer),
            _ => None,
        }
    }

    pub fn is_learnable(self) -> bool {
        self.robust_mode().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Racer => "racer",
            Method::RacerR => "racer-r",
            Method::RacerC => "racer-c",
            Method::Acer => "acer",
            Method::AllInstruct => "all-instruct",
            Method::AllReasoning => "all-reasoning",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Constant routing baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BaselineKind {
    AllInstruct,
    AllReasoning,
    Random(f64),
}

impl FromStr for BaselineKind {
    type Err = Error;
    /// `all-instruct`, `all-reasoning` or `random:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-instruct" => Ok(BaselineKind::AllInstruct),
            "all-reasoning" => Ok(BaselineKind::AllReasoning),
            other => {
                let p = other
                    .strip_prefix("random:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| Error::Config(format!("unknown baseline `{other}`")))?;
                Ok(BaselineKind::Random(p))
            }
        }
    }
}

pub fn baseline_policy(kind: BaselineKind) -> Result<PolicySpec> {
    PolicySpec::constant(match kind {
        BaselineKind::AllInstruct => 0.0,
        BaselineKind::AllReasoning => 1.0,
        BaselineKind::Random(p) => p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub budgets: Vec<f64>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Template for every training run; budget, seed and mode are overridden per cell.
    pub train: TrainConfig,
    pub eval_mode: EvalMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            budgets: DEFAULT_BUDGETS.to_vec(),
            methods: Method::ALL.to_vec(),
            repeats: DEFAULT_REPEATS,
            base_seed: 0,
            train: TrainConfig::default(),
            eval_mode: EvalMode::Expected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: Method,
    /// `None` for budget-independent baselines.
    pub budget: Option<f64>,
    pub seed: Option<u64>,
    pub split: String,
    pub accuracy: f64,
    pub cost: f64,
    pub reasoning_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub budget: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub failures: Vec<CellFailure>,
    /// Learnable cells attempted.
    pub cells: usize,
    /// Learnable cells served from the cache.
    pub cached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub budget: Option<f64>,
    pub split: String,
    pub n: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub rf_mean: f64,
    pub rf_std: f64,
}

/// sha256 over the numeric content of a dataset.
pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(data.instruct_cost_mean().to_le_bytes());
    for x in data.instances() {
        h.update(x.id.as_bytes());
        h.update([0u8]);
        for f in &x.features {
            h.update(f.to_le_bytes());
        }
        h.update([u8::from(x.correct[0]), u8::from(x.correct[1])]);
        h.update(x.cost_raw[0].to_le_bytes());
        h.update(x.cost_raw[1].to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedCell {
    digest: String,
    metrics: Vec<(String, Metrics)>,
}

struct Cell {
    method: Method,
    budget: f64,
    seed: u64,
}

fn cell_config(cfg: &SweepConfig, cell: &Cell) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.budget = cell.budget;
    t.seed = cell.seed;
    t.robust.mode = cell.method.robust_mode().unwrap_or_default();
    t
}

fn cell_digest(data_digest: &str, cfg: &SweepConfig, train_cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(data_digest.as_bytes());
    h.update(serde_json::to_vec(train_cfg).expect("config serializes"));
    h.update(serde_json::to_vec(&cfg.eval_mode).expect("mode serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn cache_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join(format!("{}_{:?}_{}.json", cell.method.name(), cell.budget, cell.seed))
}

fn run_cell(
    train_data: &Dataset,
    tests: &[(String, Dataset)],
    cfg: &SweepConfig,
    cell: &Cell,
    data_digest: &str,
    cache_dir: Option<&Path>,
) -> Result<(Vec<(String, Metrics)>, bool)> {
    let train_cfg = cell_config(cfg, cell);
    let digest = cell_digest(data_digest, cfg, &train_cfg);
    let path = cache_dir.map(|d| cache_path(d, cell));
    if let Some(p) = &path {
        if let Ok(text) = std::fs::read_to_string(p) {
            if let Ok(c) = serde_json::from_str::<CachedCell>(&text) {
                if c.digest == digest {
                    return Ok((c.metrics, true));
                }
            }
        }
    }
    let outcome = train(train_data, &train_cfg)?;
    let metrics = tests
        .iter()
        .map(|(name, ds)| Ok((name.clone(), evaluate_policy(&outcome.best.policy, ds, cfg.eval_mode, cell.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &path {
        let text = serde_json::to_string(&CachedCell {
            digest,
            metrics: metrics.clone(),
        })
        .map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok((metrics, false))
}

/// Trains every learnable method per (budget, seed) in parallel and evaluates all
/// methods on every test split. Cell failures are recorded, not propagated.
pub fn run_sweep(
    train_data: &Dataset,
    tests: &[(String, Dataset)],
    cfg: &SweepConfig,
    cache_dir: Option<&Path>,
) -> Result<SweepResult> {
    if cfg.budgets.is_empty() || cfg.methods.is_empty() {
        return Err(Error::Config("sweep needs at least one budget and one method".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::Config("sweep needs at least one repeat".into()));
    }
    if tests.is_empty() {
        return Err(Error::Config("sweep needs at least one evaluation split".into()));
    }
    for (name, ds) in tests {
        if ds.instruct_cost_mean() != train_data.instruct_cost_mean() {
            return Err(Error::Validation(format!(
                "split `{name}` is not normalized with the training constant"
            )));
        }
    }
    if let Some(d) = cache_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let data_digest = {
        let mut h = Sha256::new();
        h.update(dataset_digest(train_data));
        for (name, ds) in tests {
            h.update(name.as_bytes());
            h.update(dataset_digest(ds));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
    };

    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|r| cfg.base_seed + r).collect();
    let mut cells = Vec::new();
    for &method in methods.iter().filter(|m| m.is_learnable()) {
        for &budget in &cfg.budgets {
            for &seed in &seeds {
                cells.push(Cell { method, budget, seed });
            }
        }
    }
    let outcomes: Vec<Result<(Vec<(String, Metrics)>, bool)>> = cells
        .par_iter()
        .map(|c| run_cell(train_data, tests, cfg, c, &data_digest, cache_dir))
        .collect();

    let mut result = SweepResult {
        cells: cells.len(),
        ..Default::default()
    };
    // (budget bits, seed) → per-split metrics of the pairing method
    let pair_method = methods.iter().copied().find(|m| m.is_learnable());
    let mut paired: BTreeMap<(u64, u64), Vec<(String, Metrics)>> = BTreeMap::new();
    for (cell, out) in cells.iter().zip(outcomes) {
        match out {
            Ok((metrics, cached)) => {
                result.cached += usize::from(cached);
                if Some(cell.method) == pair_method {
                    paired.insert((cell.budget.to_bits(), cell.seed), metrics.clone());
                }
                for (split, m) in metrics {
                    result.records.push(SweepRecord {
                        method: cell.method,
                        budget: Some(cell.budget),
                        seed: Some(cell.seed),
                        split,
                        accuracy: m.accuracy,
                        cost: m.realized_cost,
                        reasoning_frac: m.reasoning_fraction,
                    });
                }
            }
            Err(e) => result.failures.push(CellFailure {
                method: cell.method,
                budget: cell.budget,
                seed: cell.seed,
                message: e.to_string(),
            }),
        }
    }

    for method in &methods {
        let kind = match method {
            Method::AllInstruct => BaselineKind::AllInstruct,
            Method::AllReasoning => BaselineKind::AllReasoning,
            _ => continue,
        };
        let policy = baseline_policy(kind)?;
        for (name, ds) in tests {
            let m = evaluate_policy(&policy, ds, cfg.eval_mode, cfg.base_seed)?;
            result.records.push(SweepRecord {
                method: *method,
                budget: None,
                seed: None,
                split: name.clone(),
                accuracy: m.accuracy,
                cost: m.realized_cost,
                reasoning_frac: m.reasoning_fraction,
            });
        }
    }

    if methods.contains(&Method::Random) {
        for &budget in &cfg.budgets {
            for &seed in &seeds {
                let pair = paired.get(&(budget.to_bits(), seed));
                if pair_method.is_some() && pair.is_none() {
                    continue;
                }
                for (name, ds) in tests {
                    let rate = pair
                        .and_then(|p| p.iter().find(|(s, _)| s == name))
                        .map_or(UNPAIRED_RANDOM_RATE, |(_, m)| m.reasoning_fraction)
                        .clamp(0.0, 1.0);
                    let m = evaluate_policy(&baseline_policy(BaselineKind::Random(rate))?, ds, cfg.eval_mode, seed)?;
                    result.records.push(SweepRecord {
                        method: Method::Random,
                        budget: Some(budget),
                        seed: Some(seed),
                        split: name.clone(),
                        accuracy: m.accuracy,
                        cost: m.realized_cost,
                        reasoning_frac: m.reasoning_fraction,
                    });
                }
            }
        }
    }
    Ok(result)
}

fn budget_key(b: Option<f64>) -> (u8, u64) {
    // budgets here are positive, so bit order equals numeric order
    b.map_or((0, 0), |v| (1, v.to_bits()))
}

/// Mean and sample standard deviation over seeds per (method, budget, split).
pub fn aggregate(records: &[SweepRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Method, (u8, u64), String), Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, budget_key(r.budget), r.split.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, _, split), rs)| {
            let col = |f: fn(&SweepRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (acc, cost, rf) = (col(|r| r.accuracy), col(|r| r.cost), col(|r| r.reasoning_frac));
            AggregateRow {
                method,
                budget: rs[0].budget,
                split,
                n: rs.len(),
                acc_mean: mean(&acc),
                acc_std: std_dev(&acc),
                cost_mean: mean(&cost),
                cost_std: std_dev(&cost),
                rf_mean: mean(&rf),
                rf_std: std_dev(&rf),
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(e.to_string())
}

fn opt_f(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

/// Raw per-cell CSV: `method,budget,seed,split,accuracy,cost,reasoning_frac`.
pub fn write_raw_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["method", "budget", "seed", "split", "accuracy", "cost", "reasoning_frac"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.method.name().to_string(),
            opt_f(r.budget),
            r.seed.map_or(String::new(), |s| s.to_string()),
            r.split.clone(),
            format!("{:?}", r.accuracy),
            format!("{:?}", r.cost),
            format!("{:?}", r.reasoning_frac),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "method", "budget", "split", "n", "acc_mean", "acc_std", "cost_mean", "cost_std", "rf_mean", "rf_std",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let f = |x: f64| format!("{x:?}");
        w.write_record([
            r.method.name().to_string(),
            opt_f(r.budget),
            r.split.clone(),
            r.n.to_string(),
            f(r.acc_mean),
            f(r.acc_std),
            f(r.cost_mean),
            f(r.cost_std),
            f(r.rf_mean),
            f(r.rf_std),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One-sided sign test p-value `P(X ≥ wins)` for `X ~ Bin(trials, 1/2)`.
pub fn sign_test_p_value(wins: usize, trials: usize) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    // log-space binomial coefficients keep large trial counts finite
    let ln_fact = |k: usize| (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
    let total = ln_fact(trials);
    (wins..=trials)
        .map(|k| (total - ln_fact(k) - ln_fact(trials - k) - trials as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}
