//! Central finite-difference gradient verification.
//!
//! The numeric side evaluates the forward pass only, so it stays
//! independent of the reverse-mode implementation it checks.

use crate::error::Result;

use super::params::ParamSet;
use super::tape::{NodeId, Tape};

/// Builds a scalar loss over `params` on a fresh tape. Implementations
/// must be deterministic (fixed RNG seeds, fresh BN state per call).
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, params: &ParamSet) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, params: &ParamSet) -> Result<NodeId> {
        self(tape, params)
    }
}

/// Outcome of a gradient check: the largest relative error observed.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn eval(builder: &impl LossBuilder, params: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = builder.build(&mut tape, params)?;
    Ok(tape.scalar(loss))
}

/// Compares reverse-mode gradients against central differences with the
/// given `step`. Relative error uses a small absolute floor so exact-zero
/// gradients compare cleanly.
pub fn gradient_check(
    builder: &impl LossBuilder,
    params: &ParamSet,
    step: f64,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = builder.build(&mut tape, &work)?;
    tape.backward(loss)?;
    tape.export_grads(&mut work);

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for pid in 0..work.len() {
        for k in 0..work.get(pid).values.len() {
            let orig = work.get(pid).values[k];
            let mut plus = work.clone();
            plus.get_mut(pid).values[k] = orig + step;
            let mut minus = work.clone();
            minus.get_mut(pid).values[k] = orig - step;
            let numeric = (eval(builder, &plus)? - eval(builder, &minus)?) / (2.0 * step);
            let analytic = work.get(pid).grad[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max((analytic - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}
