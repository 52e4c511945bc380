//! SGD with classic momentum, L2 weight decay folded into the gradient, and
//! a step learning-rate schedule.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is divided by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    /// Rescale the gradients so their joint L2 norm is at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-5,
            milestones: vec![10, 15, 20],
            decay: 10.0,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if !(self.decay >= 1.0) {
            return Err(Error::config(format!("decay factor {} must be >= 1", self.decay)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("clip norm {c} must be > 0")));
            }
        }
        Ok(())
    }

    /// `lr / decay^k`, `k` = milestones already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr / self.decay.powi(passed as i32)
    }
}

/// Joint L2 norm of all gradients.
pub fn global_norm<F: Scalar>(grads: &[Option<crate::Tensor<F>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One update over every tensor in `params`, in order:
/// `v = momentum * v + s * g + wd * p`, then `p -= lr * v`, where `s`
/// shrinks the gradients to `clip_norm` when their joint norm exceeds it
/// and is 1 otherwise.
///
/// `grads` holds one gradient per parameter, in parameter order.
pub fn sgd_step<F: Scalar>(params: &mut Parameters<F>, grads: &[Option<crate::Tensor<F>>], lr: f64, cfg: &OptimConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let scale = match cfg.clip_norm {
        Some(c) => {
            let n = global_norm(grads);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let (mu, wd, lr, s) = (F::of(cfg.momentum), F::of(cfg.weight_decay), F::of(lr), F::of(scale));
    for (entry, g) in params.entries_mut().iter_mut().zip(grads) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::config(format!("missing gradient for {}", entry.name)))?;
        if g.shape() != entry.value.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{}: gradient {:?} vs parameter {:?}", entry.name, g.shape(), entry.value.shape()),
            ));
        }
        let v = entry.momentum.data_mut();
        let p = entry.value.data_mut();
        for ((v, p), &g) in v.iter_mut().zip(p.iter_mut()).zip(g.data()) {
            *v = mu * *v + s * g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Collect gradients for the vars produced by [`Parameters::bind`].
pub fn collect<F: Scalar>(grads: &Gradients<F>, vars: &[crate::Var<'_, F>]) -> Vec<Option<crate::Tensor<F>>> {
    vars.iter().map(|&v| grads.get(v)).collect()
}
