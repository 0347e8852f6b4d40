//! Mini-batch primal-dual training of a parametric router with per-batch
//! exponential-tilt reweighting of the reward and cost terms.

mod objective;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, EvalMode, Metrics};
use crate::numeric::mean;
use crate::policy::{PolicySpec, DEFAULT_HIDDEN};
use crate::reweight::{tilt_or_uniform, Direction, RobustConfig, WeightVector};

pub use objective::{batch_objective, batch_stats, entropy, BatchStats, DualState};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Linear,
    FeedForward { hidden: Vec<usize> },
}

impl Default for PolicyKind {
    fn default() -> Self {
        PolicyKind::FeedForward {
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    /// `linear`, `mlp` (default widths) or `mlp:32,16`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "linear" {
            return Ok(PolicyKind::Linear);
        }
        let rest = s
            .strip_prefix("mlp")
            .or_else(|| s.strip_prefix("feed_forward"))
            .or_else(|| s.strip_prefix("feedforward"))
            .ok_or_else(|| Error::Config(format!("unknown policy kind `{s}`")))?;
        if rest.is_empty() {
            return Ok(PolicyKind::default());
        }
        let widths = rest
            .strip_prefix(':')
            .ok_or_else(|| Error::Config(format!("expected `mlp:w1,w2,...`, got `{s}`")))?;
        let hidden = widths
            .split(',')
            .map(|w| w.trim().parse::<usize>().ok().filter(|v| *v > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Config(format!("bad hidden widths `{widths}`")))?;
        Ok(PolicyKind::FeedForward { hidden })
    }
}

/// When the multiplier is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualSchedule {
    /// After every primal step.
    #[default]
    PerBatch,
    /// Once per epoch, from the epoch-average weighted cost.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Target mean cost ratio `C`.
    pub budget: f64,
    pub beta: f64,
    pub robust: RobustConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub primal_lr: f64,
    pub dual_lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub policy: PolicyKind,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub lambda_init: f64,
    pub dual_schedule: DualSchedule,
    /// Rank checkpoints by the tilt-weighted validation cost when the cost tilt is active.
    pub robust_selection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget: 4.0,
            beta: 0.005,
            robust: RobustConfig::default(),
            epochs: 60,
            batch_size: 64,
            primal_lr: 1e-4,
            dual_lr: 1e-3,
            seed: 0,
            val_fraction: 0.1,
            policy: PolicyKind::default(),
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            lambda_init: 0.0,
            dual_schedule: DualSchedule::PerBatch,
            robust_selection: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.budget > 1.0 && self.budget.is_finite()) {
            return Err(Error::Config(format!(
                "budget must exceed the All-Instruct cost of 1, got {}",
                self.budget
            )));
        }
        positive("beta", self.beta)?;
        positive("primal_lr", self.primal_lr)?;
        positive("dual_lr", self.dual_lr)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.lambda_init >= 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::Config("lambda_init must be non-negative".into()));
        }
        if let PolicyKind::FeedForward { hidden } = &self.policy {
            if hidden.iter().any(|w| *w == 0) {
                return Err(Error::Config("hidden widths must be positive".into()));
            }
        }
        self.robust.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub policy: PolicySpec,
    /// Expected-mode metrics on the validation split.
    pub val: Metrics,
    /// Cost used for budget feasibility during selection.
    pub selection_cost: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Running mean over the epoch's batches of the unweighted expected reward.
    pub train_reward: f64,
    /// Running mean over the epoch's batches of the unweighted expected cost.
    pub train_cost: f64,
    pub lambda: f64,
    pub val_acc: f64,
    pub val_cost: f64,
    pub reasoning_frac: f64,
    /// Largest `|w − 1|` among reward weights this epoch.
    pub reward_weight_dev: f64,
    /// Largest `|w − 1|` among cost weights this epoch.
    pub cost_weight_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// `instruct_cost_mean` of the training data.
    pub instruct_cost_mean: f64,
}

/// Deterministic train/validation split: seed-shuffle, hold out the tail.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 {
        return Err(Error::Validation(format!(
            "validation split of {n} instances at fraction {val_fraction} is empty"
        )));
    }
    if n_val >= n {
        return Err(Error::Validation("no training instances left after the split".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Feasible checkpoint with the best accuracy, else the one closest to the budget.
pub fn select_checkpoint(checkpoints: &[Checkpoint], budget: f64) -> Option<&Checkpoint> {
    let feasible = checkpoints
        .iter()
        .filter(|c| c.selection_cost <= budget)
        .max_by(|a, b| {
            a.val
                .accuracy
                .total_cmp(&b.val.accuracy)
                .then(a.epoch.cmp(&b.epoch))
        });
    feasible.or_else(|| {
        checkpoints.iter().min_by(|a, b| {
            (a.selection_cost - budget)
                .abs()
                .total_cmp(&(b.selection_cost - budget).abs())
                .then(b.val.accuracy.total_cmp(&a.val.accuracy))
                .then(b.epoch.cmp(&a.epoch))
        })
    })
}

fn max_dev(w: &WeightVector) -> f64 {
    w.weights.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max)
}

fn initial_policy(config: &TrainConfig, dim: usize, rng: &mut ChaCha8Rng) -> PolicySpec {
    match &config.policy {
        PolicyKind::Linear => PolicySpec::linear_zeros(dim),
        PolicyKind::FeedForward { hidden } => PolicySpec::feedforward(dim, hidden, rng),
    }
}

fn checkpoint_cost(policy: &PolicySpec, val: &[&Instance], config: &TrainConfig, realized: f64) -> Result<f64> {
    let tau = config.robust.effective_tau_cost();
    if !config.robust_selection || tau.is_infinite() {
        return Ok(realized);
    }
    let costs = batch_stats(policy, val)?.expected_cost;
    Ok(tilt_or_uniform(&costs, tau, Direction::WorstHigh)?.weighted_mean(&costs))
}

/// Trains a router on `data` (normalized) and returns the selected checkpoint.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !data.is_normalized() {
        return Err(Error::Validation("training data must be cost-normalized".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), config.val_fraction, config.seed)?;
    let val_set = data.subset(&val_idx)?;
    let val_refs: Vec<&Instance> = val_set.instances().iter().collect();
    let all = data.instances();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut policy = initial_policy(config, data.dim(), &mut rng);
    let mut params = policy.params();
    let mut opt = Optimizer::new(config.optimizer, config.primal_lr, config.weight_decay, params.len());
    let mut dual = DualState {
        lambda: config.lambda_init,
        eta: config.dual_lr,
        beta: config.beta,
    };
    let tau_r = config.robust.effective_tau_reward();
    let tau_c = config.robust.effective_tau_cost();

    let mut order = train_idx;
    let mut history = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut reward_sum, mut cost_sum, mut weighted_sum) = (0.0, 0.0, 0.0);
        let (mut r_dev, mut c_dev) = (0.0f64, 0.0f64);
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &all[i]).collect();
            let diverged = |message: String| Error::Divergence {
                epoch,
                batch: bi,
                message,
            };
            let stats = batch_stats(&policy, &batch)?;
            let wr = tilt_or_uniform(&stats.expected_reward, tau_r, Direction::WorstLow)
                .map_err(|e| diverged(e.to_string()))?;
            let wc = tilt_or_uniform(&stats.expected_cost, tau_c, Direction::WorstHigh)
                .map_err(|e| diverged(e.to_string()))?;
            r_dev = r_dev.max(max_dev(&wr));
            c_dev = c_dev.max(max_dev(&wc));
            let (value, grad) =
                batch_objective(&policy, &batch, &wr, &wc, &dual).map_err(|e| diverged(e.to_string()))?;
            if !value.is_finite() {
                return Err(diverged(format!("objective is {value}")));
            }
            opt.ascend(&mut params, &grad);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(diverged("parameters became non-finite".into()));
            }
            policy.set_params(&params);

            let after = batch_stats(&policy, &batch)?;
            let weighted_cost = wc.weighted_mean(&after.expected_cost);
            if config.dual_schedule == DualSchedule::PerBatch {
                dual.update(weighted_cost, config.budget);
            }
            weighted_sum += weighted_cost;
            reward_sum += mean(&stats.expected_reward);
            cost_sum += mean(&stats.expected_cost);
            batches += 1;
        }
        let nb = batches as f64;
        if config.dual_schedule == DualSchedule::PerEpoch {
            dual.update(weighted_sum / nb, config.budget);
        }

        let val = evaluate_policy(&policy, &val_set, EvalMode::Expected, 0)?;
        let selection_cost = checkpoint_cost(&policy, &val_refs, config, val.realized_cost)?;
        history.push(EpochRecord {
            epoch,
            train_reward: reward_sum / nb,
            train_cost: cost_sum / nb,
            lambda: dual.lambda,
            val_acc: val.accuracy,
            val_cost: val.realized_cost,
            reasoning_frac: val.reasoning_fraction,
            reward_weight_dev: r_dev,
            cost_weight_dev: c_dev,
        });
        checkpoints.push(Checkpoint {
            epoch,
            policy: policy.clone(),
            val,
            selection_cost,
            lambda: dual.lambda,
        });
    }
    let best = select_checkpoint(&checkpoints, config.budget)
        .cloned()
        .ok_or(Error::EmptyDataset)?;
    Ok(TrainOutcome {
        best,
        history,
        checkpoints,
        instruct_cost_mean: data.instruct_cost_mean(),
    })
}

/// Writes the per-epoch history as CSV with full-precision floats.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(e.to_string()))?;
    w.write_record([
        "epoch",
        "train_reward",
        "train_cost",
        "lambda",
        "val_acc",
        "val_cost",
        "reasoning_frac",
        "reward_weight_dev",
        "cost_weight_dev",
    ])
    .map_err(|e| Error::Validation(e.to_string()))?;
    for r in history {
        let f = |x: f64| format!("{x:?}");
        w.write_record([
            r.epoch.to_string(),
            f(r.train_reward),
            f(r.train_cost),
            f(r.lambda),
            f(r.val_acc),
            f(r.val_cost),
            f(r.reasoning_frac),
            f(r.reward_weight_dev),
            f(r.cost_weight_dev),
        ])
        .map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reweight::{RobustMode, Temperature};

    fn ck(epoch: usize, cost: f64, acc: f64) -> Checkpoint {
        Checkpoint {
            epoch,
            policy: PolicySpec::constant(0.5).unwrap(),
            val: Metrics {
                accuracy: acc,
                realized_cost: cost,
                reasoning_fraction: 0.5,
            },
            selection_cost: cost,
            lambda: 0.0,
        }
    }

    #[test]
    fn selection_prefers_best_feasible() {
        let cks = [ck(0, 1.8, 0.80), ck(1, 1.9, 0.83), ck(2, 2.4, 0.90)];
        assert_eq!(select_checkpoint(&cks, 2.0).unwrap().epoch, 1);
    }

    #[test]
    fn selection_falls_back_to_closest_cost() {
        let cks = [ck(0, 2.4, 0.9), ck(1, 2.1, 0.7)];
        assert_eq!(select_checkpoint(&cks, 2.0).unwrap().epoch, 1);
        let one = [ck(3, 5.0, 0.1)];
        assert_eq!(select_checkpoint(&one, 2.0).unwrap().epoch, 3);
        assert!(select_checkpoint(&[], 2.0).is_none());
    }

    #[test]
    fn selection_ties_go_to_latest_epoch() {
        let cks = [ck(0, 1.5, 0.8), ck(1, 1.7, 0.8)];
        assert_eq!(select_checkpoint(&cks, 2.0).unwrap().epoch, 1);
        let cks = [ck(0, 2.2, 0.8), ck(1, 1.8 + 0.4, 0.8)];
        assert_eq!(select_checkpoint(&cks, 2.0).unwrap().epoch, 1);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.1, 3).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 3).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_indices(5, 0.01, 0).is_err());
    }

    #[test]
    fn policy_kind_parsing() {
        assert_eq!("linear".parse::<PolicyKind>().unwrap(), PolicyKind::Linear);
        assert_eq!(
            "mlp:32,16".parse::<PolicyKind>().unwrap(),
            PolicyKind::FeedForward { hidden: vec![32, 16] }
        );
        assert_eq!("mlp".parse::<PolicyKind>().unwrap(), PolicyKind::default());
        assert!("mlp:0".parse::<PolicyKind>().is_err());
        assert!("tree".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { budget: 1.0, ..Default::default() },
            TrainConfig { beta: 0.0, ..Default::default() },
            TrainConfig { val_fraction: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lambda_init: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig {
            robust: RobustConfig {
                tau_reward: Temperature::INFINITE,
                mode: RobustMode::RacerC,
                ..Default::default()
            },
            policy: PolicyKind::Linear,
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = toml::from_str("budget = 3.0\n[policy]\nkind = \"linear\"\n").unwrap();
        assert_eq!(partial.budget, 3.0);
        assert_eq!(partial.epochs, 60);
    }
}
