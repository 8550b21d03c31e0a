use serde::{Deserialize, Serialize};

use crate::network::model::ModelParams;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state over a full parameter set.
pub struct Optimizer<S> {
    cfg: OptimizerConfig,
    lr: f64,
    step: u64,
    first: ModelParams<S>,
    second: ModelParams<S>,
}

impl<S: Real> Optimizer<S> {
    pub fn new(cfg: OptimizerConfig, lr: f64, like: &ModelParams<S>) -> Self {
        let zeros = ModelParams {
            tensors: like
                .tensors
                .iter()
                .map(|t| crate::network::model::Tensor {
                    data: vec![S::zero(); t.data.len()],
                    ..t.clone()
                })
                .collect(),
        };
        Optimizer {
            cfg,
            lr,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &ModelParams<S>) {
        self.step += 1;
        let lr = S::of(self.lr);
        match self.cfg {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
                let (c1, c2) = (S::of(c1), S::of(c2));
                let one = S::one();
                for (((p, g), m), v) in params
                    .tensors
                    .iter_mut()
                    .zip(&grads.tensors)
                    .zip(&mut self.first.tensors)
                    .zip(&mut self.second.tensors)
                {
                    for (((w, &gw), mw), vw) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                        *mw = b1 * *mw + (one - b1) * gw;
                        *vw = b2 * *vw + (one - b2) * gw * gw;
                        let m_hat = *mw / c1;
                        let v_hat = *vw / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                let mu = S::of(momentum);
                for ((p, g), m) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.first.tensors) {
                    for ((w, &gw), mw) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        *mw = mu * *mw + gw;
                        *w -= lr * *mw;
                    }
                }
            }
        }
    }
}
