//! Reweighted, entropy-regularized batch Lagrangian and its gradient.

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus, xlogx};
use crate::policy::PolicySpec;
use crate::reweight::WeightVector;
use crate::saddle::dual_step;

/// Binary entropy `−p log p − (1−p) log(1−p)`.
pub fn entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("entropy needs p in [0, 1], got {p}")));
    }
    Ok(-(xlogx(p) + xlogx(1.0 - p)))
}

/// Entropy of `σ(x)` evaluated from the logit, stable for large `|x|`.
fn entropy_of_logit(x: f64) -> f64 {
    let p = sigmoid(x);
    p * softplus(-x) + (1.0 - p) * softplus(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub eta: f64,
    pub beta: f64,
}

impl DualState {
    /// Projected ascent step given the (weighted) mean cost.
    pub fn update(&mut self, weighted_cost: f64, budget: f64) {
        self.lambda = dual_step(self.lambda, self.eta, weighted_cost, budget, self.beta);
    }
}

/// Per-instance quantities from one forward pass over a batch.
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    /// `π(1|zᵢ)`.
    pub probs: Vec<f64>,
    /// `Σ_a π(a|zᵢ) correct[a]`.
    pub expected_reward: Vec<f64>,
    /// `Σ_a π(a|zᵢ) cost[a]`.
    pub expected_cost: Vec<f64>,
}

/// Expected reward and cost of every instance under `policy`.
pub fn batch_stats(policy: &PolicySpec, batch: &[&Instance]) -> Result<BatchStats> {
    let mut out = BatchStats::default();
    for inst in batch {
        let p = policy.prob(inst)?;
        out.probs.push(p);
        out.expected_reward.push((1.0 - p) * inst.reward(0) + p * inst.reward(1));
        out.expected_cost.push((1.0 - p) * inst.cost[0] + p * inst.cost[1]);
    }
    Ok(out)
}

/// Value and parameter gradient of
/// `(1/B) Σᵢ [w_rᵢ E_π r − λ w_cᵢ E_π c + β H(π(·|zᵢ))]`.
///
/// Weights are treated as constants.
pub fn batch_objective(
    policy: &PolicySpec,
    batch: &[&Instance],
    weights_r: &WeightVector,
    weights_c: &WeightVector,
    dual: &DualState,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if weights_r.len() != batch.len() || weights_c.len() != batch.len() {
        return Err(Error::Validation(format!(
            "weights ({}, {}) not aligned with batch of {}",
            weights_r.len(),
            weights_c.len(),
            batch.len()
        )));
    }
    let b = batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut value = 0.0;
    for (i, inst) in batch.iter().enumerate() {
        let (x, cache) = policy.forward(&inst.features)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit for batch element {i}")));
        }
        let p = sigmoid(x);
        let (wr, wc) = (weights_r.weights[i], weights_c.weights[i]);
        let reward = (1.0 - p) * inst.reward(0) + p * inst.reward(1);
        let cost = (1.0 - p) * inst.cost[0] + p * inst.cost[1];
        value += wr * reward - dual.lambda * wc * cost + dual.beta * entropy_of_logit(x);
        // d/dx of the summand; dH/dx = −x p (1 − p)
        let gain = wr * (inst.reward(1) - inst.reward(0)) - dual.lambda * wc * (inst.cost[1] - inst.cost[0]);
        let dlogit = (gain - dual.beta * x) * p * (1.0 - p);
        if !dlogit.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for batch element {i}")));
        }
        policy.backward(&inst.features, &cache, dlogit / b, &mut grad);
    }
    Ok((value / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy(0.0).unwrap(), 0.0);
        assert_eq!(entropy(1.0).unwrap(), 0.0);
        assert!((entropy(0.9).unwrap() - 0.325_082_973_391_448_2).abs() < 1e-12);
        assert!((entropy(0.731_06).unwrap() - 0.582_201_687_513_085).abs() < 1e-12);
        assert!(entropy(1.1).is_err());
        assert!(entropy(-0.1).is_err());
        assert!((entropy_of_logit(1.0) - 0.582_203_108_888_218).abs() < 1e-12);
        assert_eq!(entropy_of_logit(800.0), 0.0);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let insts: Vec<Instance> = (0..4)
            .map(|i| Instance::new(format!("{i}"), vec![i as f64, 1.0], [true, true], [1.0, 3.0], None))
            .collect();
        let batch: Vec<&Instance> = insts.iter().collect();
        let policy = PolicySpec::Linear {
            weights: vec![0.3, -0.2],
            bias: 0.1,
        };
        let ones = WeightVector::uniform(4, 0.0);
        let dual = DualState {
            lambda: 0.0,
            eta: 0.1,
            beta: 0.0,
        };
        let (v, g) = batch_objective(&policy, &batch, &ones, &ones, &dual).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn dual_state_projects() {
        let mut d = DualState {
            lambda: 0.01,
            eta: 1.0,
            beta: 0.0,
        };
        d.update(1.0, 2.0);
        assert_eq!(d.lambda, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let insts: Vec<Instance> = (0..6)
            .map(|i| {
                Instance::new(
                    format!("{i}"),
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    [rng.random_bool(0.5), rng.random_bool(0.7)],
                    [rng.random_range(0.5..1.5), rng.random_range(2.0..6.0)],
                    None,
                )
            })
            .collect();
        let batch: Vec<&Instance> = insts.iter().collect();
        let wr = WeightVector {
            weights: (0..6).map(|_| rng.random_range(0.5..1.5)).collect(),
            baseline: 0.0,
        };
        let wc = WeightVector {
            weights: (0..6).map(|_| rng.random_range(0.5..1.5)).collect(),
            baseline: 0.0,
        };
        let dual = DualState {
            lambda: 0.3,
            eta: 0.0,
            beta: 0.05,
        };
        let mut policy = PolicySpec::feedforward(3, &[5, 4], &mut rng);
        let (_, g) = batch_objective(&policy, &batch, &wr, &wc, &dual).unwrap();
        let theta = policy.params();
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            policy.set_params(&t);
            let up = batch_objective(&policy, &batch, &wr, &wc, &dual).unwrap().0;
            t[k] -= 2.0 * h;
            policy.set_params(&t);
            let down = batch_objective(&policy, &batch, &wr, &wc, &dual).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-4 * g[k].abs().max(fd.abs()).max(1e-6), "param {k}: {} vs {fd}", g[k]);
        }
    }
}
