//! Adam optimizer over a graph's parameters.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Gradients, Graph, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Standard moment decay rates with the given learning rate.
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment state for every parameter of one graph.
///
/// Updates use bias-corrected moment estimates: after `t` steps each
/// parameter moves by `lr * m_hat / (sqrt(v_hat) + eps)` with
/// `m_hat = m / (1 - beta1^t)` and `v_hat = v / (1 - beta2^t)`.
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Fresh zeroed state shaped after the graph's parameters.
    pub fn new(graph: &Graph<S>, cfg: AdamConfig) -> Self {
        let m = (0..graph.param_count())
            .map(|i| Tensor::zeros(graph.param_tensor(i).shape()))
            .collect();
        let v = (0..graph.param_count())
            .map(|i| Tensor::zeros(graph.param_tensor(i).shape()))
            .collect();
        Adam { cfg, t: 0, m, v }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients of a backward pass.
    /// Parameters the loss does not reach are left untouched.
    pub fn step(&mut self, graph: &mut Graph<S>, grads: &Gradients<S>) -> Result<()> {
        if self.m.len() != graph.param_count() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters but the graph has {}",
                self.m.len(),
                graph.param_count()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);

        let param_grads: Vec<Option<Tensor<S>>> = graph
            .param_grads(grads)
            .into_iter()
            .map(|g| g.cloned())
            .collect();

        for (i, grad) in param_grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let theta = graph.param_tensor_mut(i);
            if grad.shape() != theta.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} does not match parameter '{}' {:?}",
                    grad.shape(),
                    i,
                    theta.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, th) in theta.data_mut().iter_mut().enumerate() {
                let g = grad.data()[j].to_f64_lossy();
                let mj = self.cfg.beta1 * m[j].to_f64_lossy() + (1.0 - self.cfg.beta1) * g;
                let vj = self.cfg.beta2 * v[j].to_f64_lossy() + (1.0 - self.cfg.beta2) * g * g;
                m[j] = S::from_f64_lossy(mj);
                v[j] = S::from_f64_lossy(vj);
                let update = self.cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.cfg.eps);
                *th = S::from_f64_lossy(th.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}
