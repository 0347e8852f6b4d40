//! Exact two-action tabular solver for the entropy-regularized Lagrangian
//!
//! `L(π, λ) = Σ ρ(z) [w₁ E_π r − λ w₂ E_π c + β H(π(·|z))] + λC + (β/2)λ²`
//!
//! and the projected dual-gradient iteration used to check its linear rate.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{logsumexp2, sigmoid};
use crate::policy::PolicySpec;

/// Largest dual bracket tried before declaring the problem infeasible.
pub const LAMBDA_LIMIT: f64 = (1u64 << 60) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    /// `ρ(z)`
    pub rho: f64,
    /// `r(z, a)` for a = 0, 1.
    pub reward: [f64; 2],
    /// `c(z, a)` for a = 0, 1.
    pub cost: [f64; 2],
    /// `w₁(z)`, reward density ratio.
    pub w_reward: f64,
    /// `w₂(z)`, cost density ratio.
    pub w_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularProblem {
    pub contexts: Vec<Context>,
    pub budget: f64,
    pub beta: f64,
}

impl TabularProblem {
    pub fn new(contexts: Vec<Context>, budget: f64, beta: f64) -> Result<Self> {
        let p = TabularProblem {
            contexts,
            budget,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(Error::Validation(format!("budget must be positive, got {}", self.budget)));
        }
        let mut total = 0.0;
        for c in &self.contexts {
            if !(c.rho > 0.0 && c.rho.is_finite()) {
                return Err(Error::Validation(format!("context {}: rho must be positive", c.id)));
            }
            if c.cost.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::Validation(format!("context {}: costs must be positive", c.id)));
            }
            if c.reward.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("context {}: reward is not finite", c.id)));
            }
            if !(c.w_reward >= 0.0 && c.w_reward.is_finite() && c.w_cost >= 0.0 && c.w_cost.is_finite()) {
                return Err(Error::Validation(format!("context {}: weights must be finite and non-negative", c.id)));
            }
            total += c.rho;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("rho sums to {total}, not 1")));
        }
        Ok(())
    }

    /// `ξ = C − Σ ρ w₂ c(z,0)`; positive iff All-Instruct is strictly feasible.
    pub fn feasibility_slack(&self) -> f64 {
        self.budget - self.weighted_cost_of(0)
    }

    /// `Σ ρ w₂ c(z,a)` for the constant policy `a`.
    pub fn weighted_cost_of(&self, action: usize) -> f64 {
        self.contexts.iter().map(|c| c.rho * c.w_cost * c.cost[action]).sum()
    }

    /// `Σ ρ w₁ r(z,a)` for the constant policy `a`.
    pub fn weighted_reward_of(&self, action: usize) -> f64 {
        self.contexts.iter().map(|c| c.rho * c.w_reward * c.reward[action]).sum()
    }

    /// Random problem with binary rewards, costs in `(0, max_cost]` and cost weights in
    /// `(0, max_weight]`; both bounds are attained so `M` and `K` equal them exactly.
    /// The budget lies strictly between the All-Instruct and All-Reasoning weighted costs.
    pub fn random(n: usize, seed: u64, beta: f64, max_cost: f64, max_weight: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut contexts: Vec<Context> = raw
            .iter()
            .enumerate()
            .map(|(i, r)| Context {
                id: format!("z{i}"),
                rho: r / total,
                reward: [
                    f64::from(u8::from(rng.random_bool(0.6))),
                    f64::from(u8::from(rng.random_bool(0.75))),
                ],
                cost: [
                    max_cost * rng.random_range(0.05..0.3),
                    max_cost * rng.random_range(0.4..1.0),
                ],
                w_reward: rng.random_range(0.5..1.5),
                w_cost: max_weight * rng.random_range(0.3..1.0),
            })
            .collect();
        contexts[0].cost[1] = max_cost;
        contexts[n - 1].w_cost = max_weight;
        let mut p = TabularProblem {
            contexts,
            budget: 1.0,
            beta,
        };
        let lo = p.weighted_cost_of(0);
        let hi = p.weighted_cost_of(1);
        p.budget = lo + rng.random_range(0.2..0.6) * (hi - lo);
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: TabularProblem = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn logits(&self, c: &Context, lambda: f64) -> [f64; 2] {
        [0, 1].map(|a| (c.w_reward * c.reward[a] - lambda * c.w_cost * c.cost[a]) / self.beta)
    }

    /// `π̃_λ(1|z)` for every context.
    pub fn closed_form_probs(&self, lambda: f64) -> Vec<f64> {
        self.contexts
            .iter()
            .map(|c| {
                let l = self.logits(c, lambda);
                sigmoid(l[1] - l[0])
            })
            .collect()
    }

    /// Per-context logit gap `l₁ − l₀` of `π̃_λ`.
    fn logit_gaps(&self, lambda: f64) -> Vec<f64> {
        self.contexts
            .iter()
            .map(|c| {
                let l = self.logits(c, lambda);
                l[1] - l[0]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    /// Max cost over contexts and actions.
    pub m: f64,
    /// Max cost weight over contexts.
    pub k: f64,
    pub eta: f64,
    pub kappa: f64,
    /// Upper end of the dual bracket; `≥ λ*`.
    pub lambda_cap: f64,
}

impl ConvergenceConstants {
    pub fn from_problem(problem: &TabularProblem) -> Result<Self> {
        problem.validate()?;
        let m = problem
            .contexts
            .iter()
            .flat_map(|c| c.cost)
            .fold(0.0, f64::max);
        let k = problem.contexts.iter().map(|c| c.w_cost).fold(0.0, f64::max);
        let (eta, kappa) = step_and_rate(m, k, problem.beta);
        let (_, lambda_cap) = bracket(problem, 1.0)?;
        Ok(ConvergenceConstants {
            m,
            k,
            eta,
            kappa,
            lambda_cap,
        })
    }

    /// `M²K² / (2β²)`, the leading constant of the policy bound.
    pub fn leading_constant(&self, beta: f64) -> f64 {
        (self.m * self.k).powi(2) / (2.0 * beta * beta)
    }

    /// Right-hand side of the policy bound at iterate `t`.
    pub fn kl_bound(&self, beta: f64, t: usize, initial_gap: f64) -> f64 {
        self.leading_constant(beta) * self.kappa.powi(2 * t as i32) * initial_gap * initial_gap
    }
}

/// `η = 2β/(M²K² + 2β²)` and `κ = M²K²/(M²K² + 2β²)`.
pub fn step_and_rate(m: f64, k: f64, beta: f64) -> (f64, f64) {
    let mk2 = (m * k).powi(2);
    let denom = mk2 + 2.0 * beta * beta;
    (2.0 * beta / denom, mk2 / denom)
}

/// Closed-form maximizer of `L(·, λ)` as a tabular policy over context ids.
pub fn closed_form_policy(problem: &TabularProblem, lambda: f64) -> PolicySpec {
    let probs: BTreeMap<String, f64> = problem
        .contexts
        .iter()
        .zip(problem.closed_form_probs(lambda))
        .map(|(c, p)| (c.id.clone(), p))
        .collect();
    PolicySpec::Tabular { probs }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualValue {
    pub d: f64,
    pub d1: f64,
    pub d2: f64,
}

/// `d(λ)`, `d′(λ)` and `d″(λ)`, all analytic.
pub fn dual_function(problem: &TabularProblem, lambda: f64) -> DualValue {
    let beta = problem.beta;
    let (mut log_q, mut mean_cost, mut var_term) = (0.0, 0.0, 0.0);
    for c in &problem.contexts {
        let l = problem.logits(c, lambda);
        let p1 = sigmoid(l[1] - l[0]);
        let p0 = sigmoid(l[0] - l[1]);
        log_q += c.rho * logsumexp2(l[0], l[1]);
        mean_cost += c.rho * c.w_cost * (p0 * c.cost[0] + p1 * c.cost[1]);
        var_term += c.rho * c.w_cost * c.w_cost * p0 * p1 * (c.cost[1] - c.cost[0]).powi(2);
    }
    DualValue {
        d: beta * log_q + lambda * problem.budget + 0.5 * beta * lambda * lambda,
        d1: -mean_cost + problem.budget + beta * lambda,
        d2: beta + var_term / beta,
    }
}

/// `L(π, λ)` for a policy given as `π(1|z)` per context.
pub fn lagrangian(problem: &TabularProblem, probs: &[f64], lambda: f64) -> f64 {
    let beta = problem.beta;
    let inner: f64 = problem
        .contexts
        .iter()
        .zip(probs)
        .map(|(c, &p1)| {
            let pi = [1.0 - p1, p1];
            let r: f64 = (0..2).map(|a| pi[a] * c.reward[a]).sum();
            let k: f64 = (0..2).map(|a| pi[a] * c.cost[a]).sum();
            let h: f64 = -pi.iter().map(|&x| crate::numeric::xlogx(x)).sum::<f64>();
            c.rho * (c.w_reward * r - lambda * c.w_cost * k + beta * h)
        })
        .sum();
    inner + lambda * problem.budget + 0.5 * beta * lambda * lambda
}

/// Projected dual step `[λ + η(weighted_cost − C − βλ)]₊`.
pub fn dual_step(lambda: f64, eta: f64, weighted_cost: f64, budget: f64, beta: f64) -> f64 {
    (lambda + eta * (weighted_cost - budget - beta * lambda)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleSolution {
    pub lambda_star: f64,
    pub pi_star: PolicySpec,
    /// `π*(1|z)` in context order.
    pub probs: Vec<f64>,
    pub dual_value: f64,
    /// `Q(z, λ*)` per context.
    pub partition: Vec<f64>,
    /// `d′(λ*)` at termination.
    pub gradient: f64,
}

/// Finds `[lo, hi]` with `d′(lo) ≤ 0 < d′(hi)`, doubling from `start`.
/// Returns `(0, start)` when `d′(0) ≥ 0`.
fn bracket(problem: &TabularProblem, start: f64) -> Result<(f64, f64)> {
    if dual_function(problem, 0.0).d1 >= 0.0 {
        return Ok((0.0, start));
    }
    let (mut lo, mut hi) = (0.0, start);
    while dual_function(problem, hi).d1 <= 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > LAMBDA_LIMIT {
            return Err(Error::Infeasible(format!(
                "dual multiplier exceeds 2^60; weighted All-Instruct cost {:.6} vs budget {:.6} (slack {:.3e})",
                problem.weighted_cost_of(0),
                problem.budget,
                problem.feasibility_slack()
            )));
        }
    }
    Ok((lo, hi))
}

/// [`solve_saddle_from`] with the default bracket start of 1.
pub fn solve_saddle(problem: &TabularProblem, tol: f64) -> Result<SaddleSolution> {
    solve_saddle_from(problem, tol, 1.0)
}

/// Minimizes the dual by safeguarded Newton inside a doubling bracket that starts at `start`.
pub fn solve_saddle_from(problem: &TabularProblem, tol: f64, start: f64) -> Result<SaddleSolution> {
    problem.validate()?;
    if !(tol > 0.0) || !(start > 0.0 && start.is_finite()) {
        return Err(Error::Validation("tol and bracket start must be positive".into()));
    }
    let slack = problem.feasibility_slack();
    if slack <= 0.0 {
        return Err(Error::Infeasible(format!(
            "weighted All-Instruct cost {:.6} is not below the budget {:.6} (slack {slack:.3e})",
            problem.weighted_cost_of(0),
            problem.budget
        )));
    }
    let at_zero = dual_function(problem, 0.0);
    let lambda = if at_zero.d1 >= 0.0 {
        0.0
    } else {
        let (mut lo, mut hi) = bracket(problem, start)?;
        let mut x = 0.5 * (lo + hi);
        let mut converged = false;
        for _ in 0..500 {
            let v = dual_function(problem, x);
            if v.d1 == 0.0 {
                converged = true;
                break;
            }
            if v.d1 < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - v.d1 / v.d2;
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            // iterate to machine precision; `tol` is only the acceptance threshold
            if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
                x = next;
                converged = true;
                break;
            }
            x = next;
        }
        let g = dual_function(problem, x).d1;
        if !converged && g.abs() > tol {
            return Err(Error::Numeric(format!(
                "dual solver stalled at λ = {x} with d′ = {g:e}"
            )));
        }
        x
    };
    let v = dual_function(problem, lambda);
    if lambda > 0.0 && v.d1.abs() > tol {
        return Err(Error::Numeric(format!(
            "dual gradient {:e} above tolerance {tol:e}",
            v.d1
        )));
    }
    let partition = problem
        .contexts
        .iter()
        .map(|c| {
            let l = problem.logits(c, lambda);
            logsumexp2(l[0], l[1]).exp()
        })
        .collect();
    Ok(SaddleSolution {
        lambda_star: lambda,
        pi_star: closed_form_policy(problem, lambda),
        probs: problem.closed_form_probs(lambda),
        dual_value: v.d,
        partition,
        gradient: v.d1,
    })
}

/// Upper bound on `λ*` from comparing against All-Instruct:
/// `(d(λ*) − Σ ρ w₁ r(z,0)) / ξ`.
pub fn multiplier_bound(problem: &TabularProblem, solution: &SaddleSolution) -> Result<f64> {
    let xi = problem.feasibility_slack();
    if xi <= 0.0 {
        return Err(Error::Infeasible(format!(
            "All-Instruct is not strictly feasible (slack {xi:e})"
        )));
    }
    Ok((solution.dual_value - problem.weighted_reward_of(0)) / xi)
}

/// KL between Bernoulli laws with logits `x` and `y`, accurate for small gaps.
fn bernoulli_kl_logits(x: f64, y: f64) -> f64 {
    let p1 = sigmoid(x);
    let q1 = sigmoid(y);
    let delta = x - y;
    // softplus(x) − softplus(y) = log1p(q₁ (e^δ − 1))
    (p1 * delta - (q1 * delta.exp_m1()).ln_1p()).max(0.0)
}

/// `Σ ρ(z) KL(π_λ(·|z) ‖ π_μ(·|z))` for two closed-form policies.
pub fn closed_form_kl(problem: &TabularProblem, lambda: f64, mu: f64) -> f64 {
    problem
        .logit_gaps(lambda)
        .iter()
        .zip(problem.logit_gaps(mu))
        .zip(&problem.contexts)
        .map(|((x, y), c)| c.rho * bernoulli_kl_logits(*x, y))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub lambda: f64,
    /// `π_t(1|z)` per context.
    pub probs: Vec<f64>,
    pub kl_to_star: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualTrace {
    pub rows: Vec<TraceRow>,
    pub constants: ConvergenceConstants,
    pub lambda_star: f64,
    pub lambda0: f64,
}

impl PrimalDualTrace {
    /// Rows where the policy bound fails by more than `slack`.
    pub fn bound_violations(&self, slack: f64) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.kl_to_star > r.bound + slack)
            .map(|r| r.t)
            .collect()
    }

    /// Rows where `|λ_t − λ*| > κᵗ|λ₀ − λ*| + slack`.
    pub fn contraction_violations(&self, slack: f64) -> Vec<usize> {
        let gap0 = (self.lambda0 - self.lambda_star).abs();
        self.rows
            .iter()
            .filter(|r| {
                (r.lambda - self.lambda_star).abs()
                    > self.constants.kappa.powi(r.t as i32) * gap0 + slack
            })
            .map(|r| r.t)
            .collect()
    }

    /// Least-squares slope of `log KL` against `t` over rows with `t ≥ burn_in` and
    /// `KL > floor`; `None` with fewer than three usable rows.
    pub fn log_kl_slope(&self, burn_in: usize, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.t >= burn_in && r.kl_to_star > floor)
            .map(|r| (r.t as f64, r.kl_to_star.ln()))
            .collect();
        if pts.len() < 3 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(e.to_string()))?;
        w.write_record(["t", "lambda_t", "kl_to_star", "bound_t"])
            .map_err(|e| Error::Validation(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                format!("{:?}", r.lambda),
                format!("{:?}", r.kl_to_star),
                format!("{:?}", r.bound),
            ])
            .map_err(|e| Error::Validation(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs `T` projected dual-gradient steps from `lambda0`; row `t` pairs `λ_t` with
/// `π_t = π̃_{λ_t}` and the bound at `t`.
pub fn primal_dual_iterate(problem: &TabularProblem, lambda0: f64, iterations: usize) -> Result<PrimalDualTrace> {
    if iterations == 0 {
        return Err(Error::Validation("need at least one iteration".into()));
    }
    if !(lambda0 >= 0.0 && lambda0.is_finite()) {
        return Err(Error::Validation(format!("initial multiplier must be non-negative, got {lambda0}")));
    }
    let constants = ConvergenceConstants::from_problem(problem)?;
    let star = solve_saddle(problem, 1e-10)?;
    let gap0 = lambda0 - star.lambda_star;
    let mut rows = Vec::with_capacity(iterations + 1);
    let mut lambda = lambda0;
    for t in 0..=iterations {
        let probs = problem.closed_form_probs(lambda);
        let weighted_cost: f64 = problem
            .contexts
            .iter()
            .zip(&probs)
            .map(|(c, p)| c.rho * c.w_cost * ((1.0 - p) * c.cost[0] + p * c.cost[1]))
            .sum();
        rows.push(TraceRow {
            t,
            lambda,
            kl_to_star: closed_form_kl(problem, lambda, star.lambda_star),
            bound: constants.kl_bound(problem.beta, t, gap0),
            probs,
        });
        lambda = dual_step(lambda, constants.eta, weighted_cost, problem.budget, problem.beta);
    }
    Ok(PrimalDualTrace {
        rows,
        constants,
        lambda_star: star.lambda_star,
        lambda0,
    })
}
