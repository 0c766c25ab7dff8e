use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter list. Weight decay is coupled: `wd·θ` is
/// added to the gradient before the update.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    optimizer: Optimizer,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, shapes: &[&DenseArray]) -> Self {
        let zeros = || shapes.iter().map(|t| vec![0.0; t.len()]).collect();
        let (m, v) = match optimizer {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (zeros(), zeros()),
        };
        Self {
            optimizer,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut DenseArray], grads: &[DenseArray], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer update",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let theta = p.values_mut();
            match self.optimizer {
                Optimizer::Sgd => {
                    for (x, &gi) in theta.iter_mut().zip(g.values()) {
                        *x -= lr * (gi + weight_decay * *x);
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (j, (x, &gi)) in theta.iter_mut().zip(g.values()).enumerate() {
                        let gi = gi + weight_decay * *x;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gi;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gi * gi;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
