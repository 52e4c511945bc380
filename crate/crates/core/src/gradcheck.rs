//! Central finite-difference verification of the tape's analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// that are zero up to roundoff do not blow the ratio up.
    pub floor: f64,
    /// Elements probed per input; `None` probes every element.
    pub probes: Option<usize>,
    pub seed: u64,
    /// Corrupt the adjoint of this op family during the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-3,
            probes: None,
            seed: 0,
            fault: None,
        }
    }
}

impl GradCheckConfig {
    /// Settings for a whole network: a looser threshold.
    pub fn end_to_end() -> Self {
        GradCheckConfig {
            tol: 1e-4,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    /// Set when the check could not even be evaluated (non-finite gradient).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error <= self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<28} max_rel_err={:.3e} tol={:.0e}", self.name, self.max_rel_error, self.tol)?;
        if let Some(why) = &self.failure {
            write!(f, " ({why})")?;
        }
        Ok(())
    }
}

/// Compare analytic and numeric gradients of `f` with respect to each of
/// `inputs`. A non-scalar output is reduced to `sum(y * R)` with fixed
/// random weights `R` so that every output element contributes.
pub fn grad_check<G>(name: &str, f: G, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let tape = Tape::<f64>::new();
    tape.inject_fault(cfg.fault);
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let out_shape = out.shape();
    let weights = if out_shape.iter().product::<usize>() == 1 {
        None
    } else {
        Some(Tensor::<f64>::uniform(&out_shape, -1.0, 1.0, &mut rng))
    };
    let loss = project(&tape, out, weights.as_ref())?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        tol: cfg.tol,
        inputs: Vec::new(),
        max_rel_error: 0.0,
        failure: None,
    };

    for (i, g) in analytic.iter().enumerate() {
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            report.failure = Some(format!("non-finite analytic gradient at input {i} element {bad}"));
            report.max_rel_error = f64::INFINITY;
            return Ok(report);
        }
    }

    let evaluate = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(project(&tape, out, weights.as_ref())?.value().item())
    };

    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elements: Vec<usize> = match cfg.probes {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut worst = (0.0f64, 0usize);
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for &e in &elements {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let up = evaluate(&work)?;
            work[i].data_mut()[e] = orig - cfg.step;
            let down = evaluate(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[i].data()[e];
            let rel = relative_error(a, numeric, cfg.floor);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("{name}: non-finite numeric derivative at input {i} element {e}")));
            }
            if rel > worst.0 {
                worst = (rel, e);
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst.0);
        report.inputs.push(InputReport {
            input: i,
            checked: elements.len(),
            max_rel_error: worst.0,
            worst_element: worst.1,
        });
    }
    Ok(report)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, weights: Option<&Tensor<f64>>) -> Result<Var<'t, f64>> {
    match weights {
        None => out.reshape(&[]),
        Some(w) => Ok(out.mul(&tape.constant(w.clone()))?.sum()),
    }
}
