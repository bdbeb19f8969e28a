use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Batch-norm epsilon shared by every normalisation layer.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update rate.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward pass: a tape plus the bookkeeping that ties recorded
/// leaves back to named parameters and batch-norm running buffers.
pub struct Session<T: Scalar> {
    pub tape: Tape<T>,
    mode: Mode,
    bindings: Vec<(String, NodeId)>,
    bn_updates: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Session<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            bindings: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Records a non-parameter input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.tape.leaf(value)
    }

    /// Records a parameter value as a leaf and remembers the binding so the
    /// gradient can be routed back after `backward`. Binding the same name
    /// twice (weight sharing) sums both contributions.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<NodeId> {
        let p = params.get(name)?;
        let id = self.tape.leaf(p.value.clone());
        self.bindings.push((name.to_string(), id));
        Ok(id)
    }

    /// Batch-norm layer over `(B, C, H, W)` using the parameter naming scheme
    /// `<prefix>.gamma`, `<prefix>.beta`, `<prefix>.running_mean`,
    /// `<prefix>.running_var`. Train mode normalises by batch statistics and
    /// queues a running-statistics update; eval mode requires the buffers.
    pub fn batch_norm(
        &mut self,
        params: &ParameterSet<T>,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = self.param(params, &format!("{prefix}.gamma"))?;
        let beta = self.param(params, &format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                // Running variance uses the unbiased estimate, matching the
                // convention checkpoints are expected to follow.
                let m = self.tape.value(x).numel() / stats.mean.len();
                let correction = if m > 1 {
                    T::from_f64(m as f64 / (m as f64 - 1.0))
                } else {
                    T::one()
                };
                let unbiased: Vec<T> = stats.var.iter().map(|&v| v * correction).collect();
                self.bn_updates
                    .push((prefix.to_string(), stats.mean, unbiased));
                Ok(out)
            }
            Mode::Eval => {
                let mean_name = format!("{prefix}.running_mean");
                let var_name = format!("{prefix}.running_var");
                if !params.contains(&mean_name) || !params.contains(&var_name) {
                    return Err(TensorError::MissingRunningStats(prefix.to_string()));
                }
                let mean = params.value(&mean_name)?.data().to_vec();
                let var = params.value(&var_name)?.data().to_vec();
                self.tape.batch_norm_eval(x, gamma, beta, BN_EPS, &mean, &var)
            }
        }
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Analytic gradients of every bound parameter, summed over bindings.
    pub fn bound_grads(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, id) in &self.bindings {
            let Some(g) = self.tape.grad(*id) else {
                continue;
            };
            match out.get_mut(name) {
                Some(acc) => {
                    for (dst, src) in acc.data_mut().iter_mut().zip(g.data()) {
                        *dst += *src;
                    }
                }
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    /// Adds tape gradients into the parameter store and applies queued
    /// batch-norm running updates. Call after `backward`; in eval mode there
    /// are no updates to apply.
    pub fn harvest(self, params: &mut ParameterSet<T>) -> Result<()> {
        let grads = self.bound_grads();
        for (name, g) in grads {
            let p = params.get_mut(&name)?;
            if !p.trainable {
                continue;
            }
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += *src;
            }
        }
        let momentum = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - momentum;
        for (prefix, mean, var) in self.bn_updates {
            for (suffix, fresh) in [("running_mean", mean), ("running_var", var)] {
                let p = params.get_mut(&format!("{prefix}.{suffix}"))?;
                for (dst, src) in p.value.data_mut().iter_mut().zip(&fresh) {
                    *dst = keep * *dst + momentum * *src;
                }
            }
        }
        Ok(())
    }
}
