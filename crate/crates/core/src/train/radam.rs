//! Rectified Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every parameter tensor.
    ///
    /// Moments are allocated on the first call and must match afterwards.
    /// The step is `lr * r_t * m_hat * sqrt(1 - beta2^t) / (sqrt(v) + eps)`
    /// once the variance is tractable (`rho_t > 5`), and plain momentum SGD
    /// `lr * m_hat` before that. Weight decay multiplies parameters by
    /// `1 - lr * weight_decay` first.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "radam_step",
                format!("{} parameter tensors", params.len()),
                format!("{} gradient tensors", grads.len()),
            ));
        }
        if self.m.is_empty() && self.t == 0 {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.m.get(i).map(Vec::len) != Some(g.len()) {
                return Err(shape_err(
                    "radam_step",
                    format!("tensor {i}: {} values", p.len()),
                    format!("{} gradients", g.len()),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {i}")));
            }
        }
        if self.m.len() != params.len() {
            return Err(shape_err(
                "radam_step",
                format!("{} moment buffers", self.m.len()),
                format!("{} parameter tensors", params.len()),
            ));
        }

        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
        let rect = (rho_t > 5.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });
        let decay = 1.0 - lr * self.weight_decay;

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let update = match rect {
                    Some(r) => r * m_hat * bc2.sqrt() / (v[j].sqrt() + self.eps),
                    None => m_hat,
                };
                p[j] = p[j] * decay - lr * update;
            }
        }
        Ok(())
    }
}
