//! Multi-task objective: classification cross-entropy plus depth regression
//! at two scales, combined with fixed weights.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Weights of the classification, local-mask and global-mask terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub local: f64,
    pub global: f64,
}

impl Default for LossWeights {
    /// 1 : 1 : 0.01. The early, full-resolution mask is weighted like the
    /// classifier, the late quarter-resolution one only weakly.
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            local: 1.0,
            global: 0.01,
        }
    }
}

impl LossWeights {
    pub fn classification_only() -> Self {
        LossWeights {
            cls: 1.0,
            local: 0.0,
            global: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cls", self.cls), ("local", self.local), ("global", self.global)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn has_aux(&self) -> bool {
        self.local > 0.0 || self.global > 0.0
    }
}

/// `cls * l_cls + local * l_local + global * l_global`.
pub fn total_loss(l_cls: f64, l_local: f64, l_global: f64, w: &LossWeights) -> f64 {
    w.cls * l_cls + w.local * l_local + w.global * l_global
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy<'t, F: Scalar>(logits: &Var<'t, F>, labels: &[usize]) -> Result<Var<'t, F>> {
    logits.cross_entropy(labels)
}

/// Per-element mean squared error against the full-resolution depth target.
pub fn mse_local<'t, F: Scalar>(pred: &Var<'t, F>, target: &Var<'t, F>) -> Result<Var<'t, F>> {
    pred.mse(target)
}

/// Per-element mean squared error against the quarter-resolution depth target.
pub fn mse_global<'t, F: Scalar>(pred: &Var<'t, F>, target: &Var<'t, F>) -> Result<Var<'t, F>> {
    pred.mse(target)
}

/// The three loss terms recorded on a tape, and their weighted sum.
pub struct LossTerms<'t, F: Scalar> {
    pub cls: Var<'t, F>,
    pub local: Option<Var<'t, F>>,
    pub global: Option<Var<'t, F>>,
    pub total: Var<'t, F>,
}

/// Combine terms on the tape with the same arithmetic as [`total_loss`].
pub fn combine<'t, F: Scalar>(
    cls: Var<'t, F>,
    local: Option<Var<'t, F>>,
    global: Option<Var<'t, F>>,
    w: &LossWeights,
) -> Result<LossTerms<'t, F>> {
    let mut total = cls.scale(F::of(w.cls));
    if let Some(l) = local {
        total = total.add(&l.scale(F::of(w.local)))?;
    }
    if let Some(g) = global {
        total = total.add(&g.scale(F::of(w.global)))?;
    }
    Ok(LossTerms {
        cls,
        local,
        global,
        total,
    })
}
