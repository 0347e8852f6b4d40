//! Synthetic routing corpora built from a mixture of domains.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};

/// Stream ids so the train and shifted splits never share random draws.
const STREAM_TRAIN: u64 = 0;
const STREAM_OOD_LOW: u64 = 1;
const STREAM_OOD_HIGH: u64 = 2;

/// Weight placed on the extreme domain by the default shifted mixtures.
pub const DEFAULT_SHIFT_MASS: f64 = 0.7;

fn default_ratio_shape() -> f64 {
    0.5
}

fn default_base_shape() -> f64 {
    0.3
}

fn default_noise() -> f64 {
    1.0
}

fn default_base_cost() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Mixture weight in the training distribution.
    pub weight: f64,
    /// Instruct-mode accuracy `p₀`.
    pub p_instruct: f64,
    /// Reasoning-mode accuracy `p₁`.
    pub p_reasoning: f64,
    /// Median of the per-instance reasoning/instruct cost ratio.
    pub ratio_median: f64,
    /// Log-normal shape of the cost ratio.
    #[serde(default = "default_ratio_shape")]
    pub ratio_shape: f64,
    /// Log-normal shape of the unit-median instruct cost.
    #[serde(default = "default_base_shape")]
    pub base_shape: f64,
    /// Probability that both modes share one correctness draw.
    #[serde(default)]
    pub agreement: f64,
    pub feature_mean: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Median raw instruct cost in tokens.
    #[serde(default = "default_base_cost")]
    pub base_cost: f64,
    pub domains: Vec<DomainSpec>,
    /// Mixture override applied by [`gen_synthetic`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<BTreeMap<String, f64>>,
    /// Mixture of the low-cost shifted split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_low: Option<BTreeMap<String, f64>>,
    /// Mixture of the high-cost shifted split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_high: Option<BTreeMap<String, f64>>,
    /// Instance count of the shifted splits (defaults to `n`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_n: Option<usize>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dim(&self) -> usize {
        self.domains.first().map_or(0, |d| d.feature_mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("scenario needs n > 0".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("scenario needs at least one domain".into()));
        }
        if !(self.base_cost > 0.0 && self.base_cost.is_finite()) {
            return Err(Error::Config("base_cost must be positive".into()));
        }
        let dim = self.dim();
        for d in &self.domains {
            let ctx = |m: &str| Error::Config(format!("domain `{}`: {m}", d.name));
            if !(d.weight >= 0.0 && d.weight.is_finite()) {
                return Err(ctx("weight must be non-negative"));
            }
            for p in [d.p_instruct, d.p_reasoning, d.agreement] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(ctx("probabilities must lie in [0, 1]"));
                }
            }
            if !(d.ratio_median > 1.0 && d.ratio_median.is_finite()) {
                return Err(ctx("cost-ratio median must exceed 1"));
            }
            if !(d.ratio_shape >= 0.0 && d.base_shape >= 0.0 && d.noise >= 0.0) {
                return Err(ctx("shapes and noise must be non-negative"));
            }
            if d.feature_mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: d.feature_mean.len(),
                });
            }
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("domain names must be unique".into()));
        }
        self.mixture(None)?;
        for m in [&self.shift, &self.ood_low, &self.ood_high].into_iter().flatten() {
            self.mixture(Some(m))?;
        }
        Ok(())
    }

    /// Mixture weights in domain order, from an override map or the base weights.
    /// Domains absent from an override get weight 0.
    pub fn mixture(&self, over: Option<&BTreeMap<String, f64>>) -> Result<Vec<f64>> {
        let weights: Vec<f64> = match over {
            None => self.domains.iter().map(|d| d.weight).collect(),
            Some(m) => {
                if let Some(k) = m.keys().find(|k| !self.domains.iter().any(|d| &d.name == *k)) {
                    return Err(Error::Config(format!("mixture names unknown domain `{k}`")));
                }
                self.domains
                    .iter()
                    .map(|d| m.get(&d.name).copied().unwrap_or(0.0))
                    .collect()
            }
        };
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "mixture weights must be non-negative and sum to 1 (sum {total})"
            )));
        }
        Ok(weights)
    }

    /// Default shifted mixture: `DEFAULT_SHIFT_MASS` on the lowest (or highest)
    /// ratio-median domain, the remainder split in proportion to the base weights.
    fn default_shift(&self, toward_high: bool) -> BTreeMap<String, f64> {
        let pick = self
            .domains
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let o = a.1.ratio_median.total_cmp(&b.1.ratio_median);
                if toward_high {
                    o
                } else {
                    o.reverse()
                }
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        let rest: f64 = self
            .domains
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pick)
            .map(|(_, d)| d.weight)
            .sum();
        self.domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let w = if i == pick {
                    DEFAULT_SHIFT_MASS
                } else if rest > 0.0 {
                    (1.0 - DEFAULT_SHIFT_MASS) * d.weight / rest
                } else {
                    (1.0 - DEFAULT_SHIFT_MASS) / (self.domains.len() - 1) as f64
                };
                (d.name.clone(), w)
            })
            .collect()
    }
}

fn sample(config: &ScenarioConfig, mixture: &[f64], n: usize, stream: u64, prefix: &str) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let pick = WeightedIndex::new(mixture).map_err(|e| Error::Config(format!("mixture: {e}")))?;
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let d = &config.domains[pick.sample(&mut rng)];
        let noise = Normal::new(0.0, d.noise).map_err(|e| Error::Config(e.to_string()))?;
        let features: Vec<f64> = d.feature_mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
        let u0: f64 = rng.random();
        let shared = rng.random_bool(d.agreement);
        let u1: f64 = if shared { u0 } else { rng.random() };
        let base = LogNormal::new(config.base_cost.ln(), d.base_shape)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng);
        let ratio = LogNormal::new(d.ratio_median.ln(), d.ratio_shape)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng);
        instances.push(Instance::new(
            format!("{prefix}{i}"),
            features,
            [u0 < d.p_instruct, u1 < d.p_reasoning],
            [base, base * ratio],
            Some(d.name.clone()),
        ));
    }
    Dataset::new(instances)
}

/// Draws `config.n` instances from the (possibly shifted) mixture, normalized by
/// their own mean instruct cost. Deterministic in `config.seed`.
pub fn gen_synthetic(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let mixture = config.mixture(config.shift.as_ref())?;
    Ok(sample(config, &mixture, config.n, STREAM_TRAIN, "s")?.normalize())
}

#[derive(Debug, Clone)]
pub struct ShiftSplits {
    pub train: Dataset,
    pub ood_low: Dataset,
    pub ood_high: Dataset,
}

/// Training split from the base mixture plus low- and high-cost shifted splits,
/// all normalized by the training split's mean instruct cost.
pub fn shift_scenarios(base: &ScenarioConfig) -> Result<ShiftSplits> {
    base.validate()?;
    let medians: Vec<f64> = base.domains.iter().map(|d| d.ratio_median).collect();
    let distinct = medians.iter().any(|m| *m != medians[0]);
    if base.domains.len() < 2 || !distinct {
        return Err(Error::Config(
            "shifted splits need two or more domains with distinct cost-ratio medians".into(),
        ));
    }
    let train = sample(base, &base.mixture(None)?, base.n, STREAM_TRAIN, "t")?.normalize();
    let constant = train.instruct_cost_mean();
    let n_ood = base.ood_n.unwrap_or(base.n);
    let low_map = base.ood_low.clone().unwrap_or_else(|| base.default_shift(false));
    let high_map = base.ood_high.clone().unwrap_or_else(|| base.default_shift(true));
    let ood_low = sample(base, &base.mixture(Some(&low_map))?, n_ood, STREAM_OOD_LOW, "l")?.normalize_with(constant)?;
    let ood_high =
        sample(base, &base.mixture(Some(&high_map))?, n_ood, STREAM_OOD_HIGH, "h")?.normalize_with(constant)?;
    Ok(ShiftSplits {
        train,
        ood_low,
        ood_high,
    })
}

/// Median of per-instance `cost_raw[1] / cost_raw[0]`.
pub fn median_cost_ratio(data: &Dataset) -> f64 {
    let ratios: Vec<f64> = data
        .instances()
        .iter()
        .map(|x| x.cost_raw[1] / x.cost_raw[0])
        .collect();
    crate::numeric::median(&ratios)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_domain() -> ScenarioConfig {
        ScenarioConfig::from_toml_str(
            r#"
            n = 2000
            seed = 7
            [[domains]]
            name = "cheap"
            weight = 0.5
            p_instruct = 0.7
            p_reasoning = 0.8
            ratio_median = 2.5
            feature_mean = [1.0, 0.0]
            [[domains]]
            name = "pricey"
            weight = 0.5
            p_instruct = 0.5
            p_reasoning = 0.9
            ratio_median = 8.0
            feature_mean = [0.0, 1.0]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_accuracies_give_all_correct() {
        let mut cfg = two_domain();
        for d in &mut cfg.domains {
            d.p_instruct = 1.0;
            d.p_reasoning = 1.0;
        }
        let ds = gen_synthetic(&cfg).unwrap();
        assert!(ds.instances().iter().all(|x| x.correct == [true, true]));
    }

    #[test]
    fn determinism_in_seed() {
        let cfg = two_domain();
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.instances(), b.instances());
        let c = gen_synthetic(&ScenarioConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.instances(), c.instances());
    }

    #[test]
    fn agreement_preserves_marginals() {
        let mut cfg = two_domain();
        cfg.n = 20_000;
        cfg.domains.truncate(1);
        cfg.domains[0].weight = 1.0;
        cfg.domains[0].agreement = 0.8;
        let ds = gen_synthetic(&cfg).unwrap();
        assert!((ds.accuracy_of(0) - 0.7).abs() < 0.015);
        assert!((ds.accuracy_of(1) - 0.8).abs() < 0.015);
    }

    #[test]
    fn shifted_splits_order_costs_and_share_normalization() {
        let s = shift_scenarios(&two_domain()).unwrap();
        assert!(s.ood_high.mean_cost(1) > s.train.mean_cost(1));
        assert!(s.train.mean_cost(1) > s.ood_low.mean_cost(1));
        assert_eq!(s.ood_low.instruct_cost_mean(), s.train.instruct_cost_mean());
        assert_eq!(s.ood_high.instruct_cost_mean(), s.train.instruct_cost_mean());
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut cfg = two_domain();
        cfg.domains[0].weight = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = two_domain();
        cfg.domains[1].ratio_median = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = two_domain();
        cfg.shift = Some([("nope".to_string(), 1.0)].into());
        assert!(cfg.validate().is_err());
        let mut cfg = two_domain();
        cfg.domains.truncate(1);
        cfg.domains[0].weight = 1.0;
        assert!(shift_scenarios(&cfg).is_err());
    }
}
