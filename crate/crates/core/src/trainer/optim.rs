//! First-order ascent rules over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    #[default]
    AdamW,
    /// Plain gradient ascent.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" | "adam" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(crate::error::Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, num_params: usize) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One ascent step: moves `params` along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.lr * g;
                }
            }
            OptimizerKind::AdamW => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let step = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                    params[i] -= self.lr * self.weight_decay * params[i];
                    params[i] += self.lr * step;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.1, 0.0, 2);
        let mut p = vec![0.0, 0.0];
        opt.ascend(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.1).abs() < 1e-6);
        assert!((p[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn sgd_ascends_a_concave_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0, 1);
        let mut p = vec![0.0];
        for _ in 0..200 {
            let g = -2.0 * (p[0] - 3.0);
            opt.ascend(&mut p, &[g]);
        }
        assert!((p[0] - 3.0).abs() < 1e-9);
    }
}
