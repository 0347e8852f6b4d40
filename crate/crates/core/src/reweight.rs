//! Worst-case exponential-tilt reweighting over a KL ball.
//!
//! The least favourable distribution within `{ρ̃ : KL(ρ̃ ‖ ρ) ≤ δ}` for a
//! linear objective `Σ ρ̃(i) fᵢ` is an exponential tilt of `ρ`:
//! `ρ̃(i) ∝ ρ(i) exp(±(fᵢ − s)/τ)`. Training uses the batch-mean anchored
//! form with a user-chosen temperature ([`tilt_weights`]); [`exact_tilt`]
//! solves for the temperature that saturates a given radius and is used to
//! validate the structure of the solution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numeric::{logsumexp, mean, xlogy_ratio};

/// Tilt temperature; `∞` disables reweighting.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const INFINITE: Temperature = Temperature(f64::INFINITY);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && !value.is_nan() {
            Ok(Temperature(value))
        } else {
            Err(Error::Config(format!(
                "temperature must be positive or inf, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Temperature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" | "none" => Ok(Temperature::INFINITE),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse temperature `{s}`")))?;
                Temperature::new(v)
            }
        }
    }
}

impl Serialize for Temperature {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Num(v) => Temperature::new(v),
            Repr::Str(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Which robustness terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustMode {
    /// Reward and cost tilts, as configured.
    #[default]
    Racer,
    /// Reward tilt only.
    RacerR,
    /// Cost tilt only.
    RacerC,
    /// No reweighting.
    Acer,
}

impl FromStr for RobustMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "racer" => Ok(RobustMode::Racer),
            "racer-r" => Ok(RobustMode::RacerR),
            "racer-c" => Ok(RobustMode::RacerC),
            "acer" => Ok(RobustMode::Acer),
            other => Err(Error::Config(format!("unknown robustness mode `{other}`"))),
        }
    }
}

impl fmt::Display for RobustMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RobustMode::Racer => "racer",
            RobustMode::RacerR => "racer-r",
            RobustMode::RacerC => "racer-c",
            RobustMode::Acer => "acer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub tau_reward: Temperature,
    pub tau_cost: Temperature,
    /// KL radius; only consulted by [`exact_tilt`] callers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub mode: RobustMode,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            tau_reward: Temperature(1.0),
            tau_cost: Temperature(5.0),
            delta: None,
            mode: RobustMode::Racer,
        }
    }
}

impl RobustConfig {
    pub fn with_mode(mut self, mode: RobustMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("KL radius must be positive, got {d}")));
            }
        }
        Ok(())
    }

    /// Reward temperature after the mode's overrides.
    pub fn effective_tau_reward(&self) -> Temperature {
        match self.mode {
            RobustMode::Racer | RobustMode::RacerR => self.tau_reward,
            RobustMode::RacerC | RobustMode::Acer => Temperature::INFINITE,
        }
    }

    /// Cost temperature after the mode's overrides.
    pub fn effective_tau_cost(&self) -> Temperature {
        match self.mode {
            RobustMode::Racer | RobustMode::RacerC => self.tau_cost,
            RobustMode::RacerR | RobustMode::Acer => Temperature::INFINITE,
        }
    }
}

/// Which tail the adversary favours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Upweight small values (adversarial for a reward).
    WorstLow,
    /// Upweight large values (adversarial for a cost).
    WorstHigh,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "worst_low" | "worst-low" | "reward" | "low" => Ok(Direction::WorstLow),
            "worst_high" | "worst-high" | "cost" | "high" => Ok(Direction::WorstHigh),
            other => Err(Error::Config(format!("unknown tilt direction `{other}`"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::WorstLow => "worst_low",
            Direction::WorstHigh => "worst_high",
        })
    }
}

/// Per-element density ratios, scaled to mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    /// Anchor `s` of the tilt (the batch mean for [`tilt_weights`]).
    pub baseline: f64,
}

impl WeightVector {
    pub fn uniform(n: usize, baseline: f64) -> Self {
        WeightVector {
            weights: vec![1.0; n],
            baseline,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `(1/n) Σ wᵢ fᵢ`.
    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, f)| w * f).sum::<f64>() / values.len() as f64
    }

    /// `max w / min w`.
    pub fn spread(&self) -> f64 {
        let max = self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.weights.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Validation("tilt of an empty batch".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "tilt input {i} is not finite ({})",
            values[i]
        )));
    }
    Ok(())
}

/// Batch-mean anchored tilt with empirical base measure.
///
/// `WorstLow`: `wᵢ ∝ exp((f̄ − fᵢ)/τ)`; `WorstHigh`: `wᵢ ∝ exp((fᵢ − f̄)/τ)`,
/// scaled so the weights average 1. Exponents are taken relative to the
/// extreme value, so shifting every `fᵢ` by a constant only enters through
/// exact differences.
pub fn tilt_weights(values: &[f64], tau: f64, direction: Direction) -> Result<WeightVector> {
    check_values(values)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Validation(format!(
            "tilt temperature must be positive and finite, got {tau}"
        )));
    }
    let baseline = mean(values);
    let exponents: Vec<f64> = match direction {
        Direction::WorstHigh => {
            let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            values.iter().map(|f| (f - top) / tau).collect()
        }
        Direction::WorstLow => {
            let bottom = values.iter().copied().fold(f64::INFINITY, f64::min);
            values.iter().map(|f| (bottom - f) / tau).collect()
        }
    };
    let unnorm: Vec<f64> = exponents.iter().map(|z| z.exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let n = values.len() as f64;
    Ok(WeightVector {
        weights: unnorm.iter().map(|u| n * u / total).collect(),
        baseline,
    })
}

/// [`tilt_weights`], or uniform weights when `tau` is infinite.
pub fn tilt_or_uniform(values: &[f64], tau: Temperature, direction: Direction) -> Result<WeightVector> {
    if tau.is_infinite() {
        check_values(values)?;
        Ok(WeightVector::uniform(values.len(), mean(values)))
    } else {
        tilt_weights(values, tau.value(), direction)
    }
}

/// Exact anchor implied by a temperature: `s̲ = −τ log Σ ρᵢ e^{−fᵢ/τ}` for
/// `WorstLow`, `s̄ = τ log Σ ρᵢ e^{fᵢ/τ}` for `WorstHigh`. `rho = None` means uniform.
pub fn implied_anchor(values: &[f64], rho: Option<&[f64]>, tau: f64, direction: Direction) -> f64 {
    let sign = match direction {
        Direction::WorstLow => -1.0,
        Direction::WorstHigh => 1.0,
    };
    let n = values.len() as f64;
    let terms: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let log_rho = rho.map_or(-n.ln(), |r| r[i].ln());
            log_rho + sign * f / tau
        })
        .collect();
    sign * tau * logsumexp(&terms)
}

/// `KL(p ‖ q) = Σ p log(p/q)`, `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Validation(format!(
            "distributions have different lengths ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 || v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::Validation(format!(
                "{name} is not a probability vector (sum {s})"
            )));
        }
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 && qi == 0.0 {
            return Err(Error::SupportViolation { index: i, p: pi });
        }
        total += xlogy_ratio(pi, qi);
    }
    Ok(total.max(0.0))
}

/// How the KL constraint ended up at the exact worst case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiltStatus {
    /// The KL constraint is active at a finite, positive temperature.
    Active,
    /// Values are constant; the constraint cannot be active and ρ is optimal.
    Slack,
    /// The radius admits the point mass on the extreme values; τ* = 0.
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactTilt {
    /// `ρ̃(i)/ρ(i)` (mean 1 under ρ); baseline holds the exact anchor.
    pub weights: WeightVector,
    /// The worst-case distribution `ρ̃`.
    pub tilted: Vec<f64>,
    pub tau_star: f64,
    /// `Σ ρ̃(i) fᵢ`.
    pub objective: f64,
    pub kl: f64,
    pub status: TiltStatus,
}

/// Worst-case distribution over the KL ball of radius `delta` around `rho`,
/// found by bisection on the inverse temperature.
pub fn exact_tilt(values: &[f64], rho: &[f64], delta: f64, direction: Direction) -> Result<ExactTilt> {
    check_values(values)?;
    if rho.len() != values.len() {
        return Err(Error::Validation("rho and values differ in length".into()));
    }
    if rho.iter().any(|r| !(*r > 0.0)) || (rho.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(
            "rho must be strictly positive and sum to 1".into(),
        ));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Validation(format!(
            "KL radius must be positive, got {delta}"
        )));
    }
    let sign = match direction {
        Direction::WorstLow => -1.0,
        Direction::WorstHigh => 1.0,
    };
    let g: Vec<f64> = values.iter().map(|f| sign * f).collect();
    let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
    let objective_of = |dist: &[f64]| dist.iter().zip(values).map(|(p, f)| p * f).sum::<f64>();

    if gmax == gmin {
        return Ok(ExactTilt {
            weights: WeightVector::uniform(values.len(), values[0]),
            tilted: rho.to_vec(),
            tau_star: f64::INFINITY,
            objective: values[0],
            kl: 0.0,
            status: TiltStatus::Slack,
        });
    }

    let top_mass: f64 = g
        .iter()
        .zip(rho)
        .filter(|(gi, _)| **gi == gmax)
        .map(|(_, r)| r)
        .sum();
    let kl_max = -top_mass.ln();
    if delta >= kl_max {
        let tilted: Vec<f64> = g
            .iter()
            .zip(rho)
            .map(|(gi, r)| if *gi == gmax { r / top_mass } else { 0.0 })
            .collect();
        let weights = tilted.iter().zip(rho).map(|(t, r)| t / r).collect();
        return Ok(ExactTilt {
            weights: WeightVector {
                weights,
                baseline: sign * gmax,
            },
            objective: objective_of(&tilted),
            tilted,
            tau_star: 0.0,
            kl: kl_max,
            status: TiltStatus::Saturated,
        });
    }

    // log ρ̃ᵢ/ρᵢ at inverse temperature θ, relative to the top value for stability
    let log_ratio = |theta: f64| -> Vec<f64> {
        let shifted: Vec<f64> = g
            .iter()
            .zip(rho)
            .map(|(gi, r)| r.ln() + theta * (gi - gmax))
            .collect();
        let log_z = logsumexp(&shifted);
        g.iter().map(|gi| theta * (gi - gmax) - log_z).collect()
    };
    let kl_at = |theta: f64| -> f64 {
        log_ratio(theta)
            .iter()
            .zip(rho)
            .map(|(lr, r)| r * lr.exp() * lr)
            .sum()
    };

    let mut lo = 0.0;
    let mut hi = 1.0 / (gmax - gmin);
    while kl_at(hi) < delta {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Numeric("temperature bracket overflowed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if kl_at(mid) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    let tau_star = 1.0 / theta;
    let ratios: Vec<f64> = log_ratio(theta).iter().map(|x| x.exp()).collect();
    let tilted: Vec<f64> = ratios.iter().zip(rho).map(|(w, r)| w * r).collect();
    Ok(ExactTilt {
        weights: WeightVector {
            weights: ratios,
            baseline: implied_anchor(values, Some(rho), tau_star, direction),
        },
        objective: objective_of(&tilted),
        kl: kl_at(theta),
        tilted,
        tau_star,
        status: TiltStatus::Active,
    })
}
