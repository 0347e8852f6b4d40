//! Routing policies `π(a | z)` over the two judge modes.
//!
//! Every policy reports `π(1 | z)`, the probability of routing to the
//! reasoning judge; `π(0 | z) = 1 − π(1 | z)`. Parametric policies produce a
//! logit and expose a flat parameter vector so optimizers can treat them
//! uniformly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::numeric::sigmoid;

/// Hidden widths of the reference MLP router.
pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 64];

/// Fully connected layer, weights stored row-major as `output × input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub input: usize,
    pub output: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn he_init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        DenseLayer {
            input,
            output,
            weights: (0..input * output).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; output],
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.output {
            let row = &self.weights[o * self.input..(o + 1) * self.input];
            let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
            out.push(z + self.bias[o]);
        }
    }
}

/// A routing policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// `π(1 | z)` looked up by context id.
    Tabular { probs: BTreeMap<String, f64> },
    /// `π(1 | z) = σ(w·x + b)`.
    Linear { weights: Vec<f64>, bias: f64 },
    /// MLP with ReLU between layers and a scalar output logit.
    FeedForward { layers: Vec<DenseLayer> },
    /// Context-independent `π(1 | z) ≡ prob`; used by the constant baselines.
    Constant { prob: f64 },
}

/// Activations retained from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Inputs to each layer (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl PolicySpec {
    pub fn linear_zeros(dim: usize) -> Self {
        PolicySpec::Linear {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// He-initialized MLP `dim → hidden… → 1` with zero output bias.
    pub fn feedforward<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut input = dim;
        for &h in hidden {
            layers.push(DenseLayer::he_init(input, h, rng));
            input = h;
        }
        layers.push(DenseLayer::he_init(input, 1, rng));
        PolicySpec::FeedForward { layers }
    }

    pub fn constant(prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Validation(format!(
                "constant routing probability must lie in [0, 1], got {prob}"
            )));
        }
        Ok(PolicySpec::Constant { prob })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PolicySpec::Tabular { .. } => "tabular",
            PolicySpec::Linear { .. } => "linear",
            PolicySpec::FeedForward { .. } => "feed_forward",
            PolicySpec::Constant { .. } => "constant",
        }
    }

    /// Input dimension for parametric policies.
    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            PolicySpec::Linear { weights, .. } => Some(weights.len()),
            PolicySpec::FeedForward { layers } => layers.first().map(|l| l.input),
            _ => None,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, PolicySpec::Linear { .. } | PolicySpec::FeedForward { .. })
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        match self.feature_dim() {
            Some(d) if d != features.len() => Err(Error::DimensionMismatch {
                expected: d,
                got: features.len(),
            }),
            _ => Ok(()),
        }
    }

    /// `π(1 | z)` for an instance.
    pub fn prob(&self, instance: &Instance) -> Result<f64> {
        match self {
            PolicySpec::Tabular { probs } => probs
                .get(&instance.id)
                .copied()
                .ok_or_else(|| Error::UnknownContext(instance.id.clone())),
            PolicySpec::Constant { prob } => Ok(*prob),
            _ => Ok(sigmoid(self.logit(&instance.features)?)),
        }
    }

    /// Output logit of a parametric policy.
    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        Ok(self.forward(features)?.0)
    }

    /// Forward pass retaining the activations needed by [`PolicySpec::backward`].
    pub fn forward(&self, features: &[f64]) -> Result<(f64, ForwardCache)> {
        self.check_dim(features)?;
        match self {
            PolicySpec::Linear { weights, bias } => {
                let z = weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + bias;
                Ok((z, ForwardCache::default()))
            }
            PolicySpec::FeedForward { layers } => {
                let mut cache = ForwardCache::default();
                let mut x = features.to_vec();
                let mut out = Vec::new();
                let last = layers.len() - 1;
                for (k, layer) in layers.iter().enumerate() {
                    layer.forward(&x, &mut out);
                    cache.inputs.push(std::mem::take(&mut x));
                    if k < last {
                        x = out.iter().map(|v| v.max(0.0)).collect();
                        cache.pre.push(out.clone());
                    }
                }
                Ok((out[0], cache))
            }
            _ => Err(Error::Validation(format!(
                "{} policy has no logit",
                self.kind_name()
            ))),
        }
    }

    /// Accumulates `dlogit · ∂logit/∂θ` into `grad` (flat parameter layout).
    pub fn backward(&self, features: &[f64], cache: &ForwardCache, dlogit: f64, grad: &mut [f64]) {
        match self {
            PolicySpec::Linear { weights, .. } => {
                let d = weights.len();
                for (g, x) in grad[..d].iter_mut().zip(features) {
                    *g += dlogit * x;
                }
                grad[d] += dlogit;
            }
            PolicySpec::FeedForward { layers } => {
                let offsets = layer_offsets(layers);
                let mut upstream = vec![dlogit];
                for k in (0..layers.len()).rev() {
                    let layer = &layers[k];
                    let input = &cache.inputs[k];
                    let off = offsets[k];
                    let (gw, gb) = grad[off..off + layer.num_params()].split_at_mut(layer.weights.len());
                    for o in 0..layer.output {
                        let u = upstream[o];
                        if u == 0.0 {
                            continue;
                        }
                        gb[o] += u;
                        let row = &mut gw[o * layer.input..(o + 1) * layer.input];
                        for (g, xi) in row.iter_mut().zip(input) {
                            *g += u * xi;
                        }
                    }
                    if k == 0 {
                        break;
                    }
                    let mut down = vec![0.0; layer.input];
                    for o in 0..layer.output {
                        let u = upstream[o];
                        if u == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.input..(o + 1) * layer.input];
                        for (dd, w) in down.iter_mut().zip(row) {
                            *dd += u * w;
                        }
                    }
                    // ReLU gate of the previous hidden layer
                    for (dd, z) in down.iter_mut().zip(&cache.pre[k - 1]) {
                        if *z <= 0.0 {
                            *dd = 0.0;
                        }
                    }
                    upstream = down;
                }
            }
            _ => {}
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            PolicySpec::Linear { weights, .. } => weights.len() + 1,
            PolicySpec::FeedForward { layers } => layers.iter().map(DenseLayer::num_params).sum(),
            _ => 0,
        }
    }

    /// Flat parameter vector: linear weights then bias; per layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        match self {
            PolicySpec::Linear { weights, bias } => {
                let mut v = weights.clone();
                v.push(*bias);
                v
            }
            PolicySpec::FeedForward { layers } => layers
                .iter()
                .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.num_params(), "parameter length mismatch");
        match self {
            PolicySpec::Linear { weights, bias } => {
                let d = weights.len();
                weights.copy_from_slice(&theta[..d]);
                *bias = theta[d];
            }
            PolicySpec::FeedForward { layers } => {
                let mut off = 0;
                for l in layers {
                    let nw = l.weights.len();
                    l.weights.copy_from_slice(&theta[off..off + nw]);
                    off += nw;
                    let nb = l.bias.len();
                    l.bias.copy_from_slice(&theta[off..off + nb]);
                    off += nb;
                }
            }
            _ => {}
        }
    }
}

fn layer_offsets(layers: &[DenseLayer]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for l in layers {
        offs.push(acc);
        acc += l.num_params();
    }
    offs
}

/// `π(1 | z)` for `instance` under `policy`.
pub fn policy_prob(policy: &PolicySpec, instance: &Instance) -> Result<f64> {
    policy.prob(instance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(features: Vec<f64>) -> Instance {
        Instance::new("z", features, [true, false], [1.0, 2.0], None)
    }

    #[test]
    fn zero_linear_policy_is_indifferent() {
        let p = PolicySpec::linear_zeros(3);
        assert_eq!(p.prob(&inst(vec![4.0, -2.0, 9.0])).unwrap(), 0.5);
    }

    #[test]
    fn unit_logit_gives_reference_probability() {
        let p = PolicySpec::Linear {
            weights: vec![1.0],
            bias: 0.0,
        };
        let hi = p.prob(&inst(vec![1.0])).unwrap();
        let lo = p.prob(&inst(vec![-1.0])).unwrap();
        assert!((hi - 0.73106).abs() < 1e-5);
        assert!((hi + lo - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = PolicySpec::linear_zeros(2);
        assert!(matches!(
            p.prob(&inst(vec![1.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn tabular_lookup_and_unknown_id() {
        let mut probs = BTreeMap::new();
        probs.insert("z".to_string(), 0.25);
        let p = PolicySpec::Tabular { probs };
        assert_eq!(p.prob(&inst(vec![])).unwrap(), 0.25);
        let mut other = inst(vec![]);
        other.id = "missing".into();
        assert!(matches!(p.prob(&other), Err(Error::UnknownContext(_))));
    }

    #[test]
    fn constant_policy_rejects_out_of_range() {
        assert!(PolicySpec::constant(1.5).is_err());
        assert_eq!(PolicySpec::constant(0.0).unwrap().prob(&inst(vec![1.0])).unwrap(), 0.0);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = PolicySpec::feedforward(4, &[5, 3], &mut rng);
        let theta = p.params();
        assert_eq!(theta.len(), p.num_params());
        assert_eq!(p.num_params(), 4 * 5 + 5 + 5 * 3 + 3 + 3 + 1);
        let shifted: Vec<f64> = theta.iter().map(|x| x + 0.5).collect();
        p.set_params(&shifted);
        assert_eq!(p.params(), shifted);
    }

    #[test]
    fn feedforward_logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = PolicySpec::feedforward(3, &[6, 4], &mut rng);
        let x = [0.3, -1.2, 0.8];
        let (_, cache) = p.forward(&x).unwrap();
        let mut grad = vec![0.0; p.num_params()];
        p.backward(&x, &cache, 1.0, &mut grad);
        let theta = p.params();
        let h = 1e-6;
        for j in 0..theta.len() {
            let mut t = theta.clone();
            t[j] += h;
            p.set_params(&t);
            let up = p.logit(&x).unwrap();
            t[j] -= 2.0 * h;
            p.set_params(&t);
            let dn = p.logit(&x).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6, "param {j}: fd {fd} vs {}", grad[j]);
        }
    }
}
