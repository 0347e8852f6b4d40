//! Accuracy / realized-cost / reasoning-rate evaluation of a policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::policy::PolicySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Average over `π(·|z)` analytically.
    #[default]
    Expected,
    /// Draw one action per instance.
    Sampled,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected" => Ok(EvalMode::Expected),
            "sampled" => Ok(EvalMode::Sampled),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub realized_cost: f64,
    pub reasoning_fraction: f64,
}

/// Uniform draw for instance `index`, independent of evaluation order.
pub(crate) fn instance_uniform(seed: u64, index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random::<f64>()
}

fn accumulate<'a>(
    items: impl Iterator<Item = (usize, &'a Instance, f64)>,
    mode: EvalMode,
    seed: u64,
    n: usize,
) -> Metrics {
    let (mut acc, mut cost, mut rf) = (0.0, 0.0, 0.0);
    for (i, inst, p) in items {
        match mode {
            EvalMode::Expected => {
                acc += (1.0 - p) * inst.reward(0) + p * inst.reward(1);
                cost += (1.0 - p) * inst.cost[0] + p * inst.cost[1];
                rf += p;
            }
            EvalMode::Sampled => {
                let a = usize::from(instance_uniform(seed, i) < p);
                acc += inst.reward(a);
                cost += inst.cost[a];
                rf += a as f64;
            }
        }
    }
    let n = n as f64;
    Metrics {
        accuracy: acc / n,
        realized_cost: cost / n,
        reasoning_fraction: rf / n,
    }
}

/// Evaluates `policy` on `data`. Sampled mode is a pure function of `seed`.
pub fn evaluate_policy(
    policy: &PolicySpec,
    data: &Dataset,
    mode: EvalMode,
    seed: u64,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probs = data
        .instances()
        .iter()
        .map(|x| policy.prob(x))
        .collect::<Result<Vec<_>>>()?;
    evaluate_probs(&probs, data, mode, seed)
}

/// Same as [`evaluate_policy`] for precomputed `π(1|zᵢ)` values.
pub fn evaluate_probs(probs: &[f64], data: &Dataset, mode: EvalMode, seed: u64) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probs.len() != data.len() {
        return Err(Error::Validation(format!(
            "{} probabilities for {} instances",
            probs.len(),
            data.len()
        )));
    }
    Ok(accumulate(
        data.instances()
            .iter()
            .zip(probs)
            .enumerate()
            .map(|(i, (inst, &p))| (i, inst, p)),
        mode,
        seed,
        data.len(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn toy() -> Dataset {
        let raw = [
            ([true, true], [100.0, 400.0]),
            ([false, true], [80.0, 600.0]),
            ([true, false], [120.0, 300.0]),
            ([false, false], [100.0, 500.0]),
        ];
        Dataset::new(
            raw.iter()
                .enumerate()
                .map(|(i, (c, k))| Instance::new(format!("i{i}"), vec![i as f64], *c, *k, None))
                .collect(),
        )
        .unwrap()
        .normalize()
    }

    #[test]
    fn all_instruct_costs_one() {
        let ds = toy();
        let m = evaluate_policy(&PolicySpec::constant(0.0).unwrap(), &ds, EvalMode::Expected, 0).unwrap();
        assert!((m.realized_cost - 1.0).abs() < 1e-12);
        assert_eq!(m.reasoning_fraction, 0.0);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn all_reasoning_reports_reasoning_endpoint() {
        let ds = toy();
        let m = evaluate_policy(&PolicySpec::constant(1.0).unwrap(), &ds, EvalMode::Expected, 0).unwrap();
        assert!((m.realized_cost - ds.mean_cost(1)).abs() < 1e-12);
        assert_eq!(m.accuracy, ds.accuracy_of(1));
        assert_eq!(m.reasoning_fraction, 1.0);
    }

    #[test]
    fn expected_mode_is_linear_in_tabular_policy() {
        let ds = toy();
        let p1: BTreeMap<String, f64> = ["i0", "i1", "i2", "i3"]
            .iter()
            .zip([0.1, 0.9, 0.4, 0.0])
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let p2: BTreeMap<String, f64> = p1.keys().cloned().zip([0.7, 0.2, 1.0, 0.3]).collect();
        let alpha = 0.35;
        let blend: BTreeMap<String, f64> = p1
            .iter()
            .map(|(k, v)| (k.clone(), alpha * v + (1.0 - alpha) * p2[k]))
            .collect();
        let e = |p: BTreeMap<String, f64>| {
            evaluate_policy(&PolicySpec::Tabular { probs: p }, &ds, EvalMode::Expected, 0).unwrap()
        };
        let (m1, m2, mb) = (e(p1), e(p2), e(blend));
        let mix = |a: f64, b: f64| alpha * a + (1.0 - alpha) * b;
        assert!((mb.accuracy - mix(m1.accuracy, m2.accuracy)).abs() < 1e-12);
        assert!((mb.realized_cost - mix(m1.realized_cost, m2.realized_cost)).abs() < 1e-12);
        assert!((mb.reasoning_fraction - mix(m1.reasoning_fraction, m2.reasoning_fraction)).abs() < 1e-12);
    }

    #[test]
    fn sampled_mode_is_deterministic_in_seed() {
        let ds = toy();
        let p = PolicySpec::constant(0.5).unwrap();
        let a = evaluate_policy(&p, &ds, EvalMode::Sampled, 42).unwrap();
        let b = evaluate_policy(&p, &ds, EvalMode::Sampled, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_mean_matches_expected_within_three_standard_errors() {
        let ds = toy();
        let p = PolicySpec::Linear {
            weights: vec![0.8],
            bias: -1.0,
        };
        let exp = evaluate_policy(&p, &ds, EvalMode::Expected, 0).unwrap();
        let runs: Vec<Metrics> = (0..10_000u64)
            .map(|s| evaluate_policy(&p, &ds, EvalMode::Sampled, s).unwrap())
            .collect();
        let check = |f: fn(&Metrics) -> f64, target: f64| {
            let xs: Vec<f64> = runs.iter().map(f).collect();
            let m = crate::numeric::mean(&xs);
            let se = crate::numeric::std_dev(&xs) / (xs.len() as f64).sqrt();
            assert!((m - target).abs() <= 3.0 * se, "mean {m} vs {target} (se {se})");
        };
        check(|m| m.accuracy, exp.accuracy);
        check(|m| m.realized_cost, exp.realized_cost);
        check(|m| m.reasoning_fraction, exp.reasoning_fraction);
    }
}
