use serde::{Deserialize, Serialize};

use super::{Tensor2, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: `param -= lr · weight_decay · param` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment buffers for one ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a Tensor2>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|p| (Tensor2::zeros(p.rows(), p.cols()), Tensor2::zeros(p.rows(), p.cols())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over `(name, param, grad)` triples, in the same order the
    /// state was built with. Nothing is modified if any gradient is missing.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor2, Option<&'a Tensor2>)>,
    ) -> Result<(), TensorError> {
        let items: Vec<_> = params.into_iter().collect();
        assert_eq!(items.len(), self.m.len(), "parameter count changed");
        for (name, p, g) in &items {
            match g {
                None => return Err(TensorError::MissingGradient((*name).to_string())),
                Some(g) if g.shape() != p.shape() => {
                    return Err(TensorError::Dimension {
                        op: "adam_step",
                        left: p.shape(),
                        right: g.shape(),
                    })
                }
                Some(_) => {}
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (_, p, g)) in items.into_iter().enumerate() {
            let g = g.expect("checked above");
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *w -= lr * weight_decay * *w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
