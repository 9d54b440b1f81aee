//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over every trainable coordinate.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(f: &mut F, params: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    tape.item(out)
}

/// Compares the tape gradient of the scalar function `f` against central
/// differences with step `h`, for every trainable coordinate of `params`.
///
/// `f` must build its graph from `params` through [`Tape::param`] and be
/// deterministic; a second evaluation at the same point that differs in any
/// bit is reported as [`Error::OracleFault`]. Gradients already stored in
/// `params` are overwritten.
pub fn finite_diff_check<F>(mut f: F, params: &mut ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite_diff_check", format!("h must be > 0, got {h}")));
    }
    params.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let first = tape.item(out)?;
    tape.backward(out, params)?;

    let second = evaluate(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleFault { first, second });
    }

    let ids: Vec<ParamId> = params
        .ids()
        .filter(|&id| params.get(id).requires_grad)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in ids {
        let analytic = params
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; params.get(id).numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let x0 = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = x0 + h;
            let plus = evaluate(&mut f, params);
            params.get_mut(id).data_mut()[k] = x0 - h;
            let minus = evaluate(&mut f, params);
            params.get_mut(id).data_mut()[k] = x0;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Axis;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(3.0));
        let r = finite_diff_check(
            |t, p| {
                let x = t.param(p, id)?;
                t.square(x)
            },
            &mut s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn nondeterminism_is_an_oracle_fault() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(1.0));
        let calls = Cell::new(0.0);
        let r = finite_diff_check(
            |t, p| {
                calls.set(calls.get() + 1.0);
                let x = t.param(p, id)?;
                let y = t.scalar_mul(x, calls.get())?;
                t.reduce_sum(y, Axis::All)
            },
            &mut s,
            1e-5,
        );
        assert!(matches!(r, Err(Error::OracleFault { .. })));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu'(0) is taken as 0 while the central difference sees 1/2.
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(0.0));
        let r = finite_diff_check(
            |t, p| {
                let x = t.param(p, id)?;
                t.relu(x)
            },
            &mut s,
            1e-5,
        )
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-9);
        assert_eq!(r.worst, Some(("x".to_string(), 0)));
    }
}
