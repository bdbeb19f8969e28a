//! Adam with decoupled-from-nothing classic L2 weight decay: the decay
//! term is added to the gradient before the moment updates. Moments are
//! kept in double precision regardless of the parameter scalar type.

use std::collections::BTreeMap;

use rga_tensor::{ParameterSet, Scalar};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 8e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Applies one update from the accumulated gradients of every trainable
    /// parameter. Gradients are left untouched; zero them before the next
    /// accumulation.
    pub fn step<T: Scalar>(&mut self, params: &mut ParameterSet<T>) -> Result<()> {
        self.t += 1;
        let bias1 = 1.0 - self.cfg.beta1.powi(self.t);
        let bias2 = 1.0 - self.cfg.beta2.powi(self.t);
        let names: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let param = params.get_mut(&name)?;
            let n = param.value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let w = param.value.data()[i].to_f64();
                let g = param.grad.data()[i].to_f64() + self.cfg.weight_decay * w;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let update = self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                param.value.data_mut()[i] = T::from_f64(w - update);
            }
        }
        Ok(())
    }
}
