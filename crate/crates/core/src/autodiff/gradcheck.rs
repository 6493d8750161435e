use super::tape::{Tape, Var};
use crate::error::{NodeError, Result};
use crate::par;
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(slot, p)| tape.param(slot, p.clone()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, loss))
}

fn value_at<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, loss) = evaluate(f, params)?;
    tape.value(loss).item()
}

/// Checks the tape gradient of the scalar function built by `f` against
/// central finite differences with step `eps`.
///
/// `f` records its computation on the supplied tape, using the given
/// parameter variables, and returns the loss variable. It must be
/// deterministic: two evaluations at the same point must agree exactly,
/// otherwise [`NodeError::NonDeterministic`] is returned.
///
/// Points where the function has a kink are reported like any other; a
/// large error there is expected.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NodeError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (tape, loss) = evaluate(&f, params)?;
    let base = tape.value(loss).item()?;
    if value_at(&f, params)? != base {
        return Err(NodeError::NonDeterministic);
    }
    let grads = tape.backward(loss)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let errors = par::map_indices(coords.len(), |c| -> Result<f64> {
        let (p, i) = coords[c];
        let mut shifted = params.to_vec();
        let orig = shifted[p].data()[i];
        shifted[p].data_mut()[i] = orig + eps;
        let plus = value_at(&f, &shifted)?;
        shifted[p].data_mut()[i] = orig - eps;
        let minus = value_at(&f, &shifted)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(p).map_or(0.0, |g| g.data()[i]);
        Ok((analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs()))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for (c, e) in errors.into_iter().enumerate() {
        let e = e?;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some(coords[c]);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(
            |tape, v| tape.mul(v[0], v[0]).and_then(|sq| tape.sum(sq)),
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn kink_is_reported() {
        let r = grad_check(
            |tape, v| tape.abs(v[0]).and_then(|a| tape.sum(a)),
            &[Tensor::scalar(0.0)],
            1e-5,
        )
        .unwrap();
        // one-sided derivative 1 against a symmetric difference of 0
        assert!((r.max_rel_error - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nondeterminism_is_flagged() {
        let calls = AtomicU64::new(0);
        let r = grad_check(
            |tape, v| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let s = tape.scale(v[0], 1.0 + k)?;
                tape.sum(s)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(NodeError::NonDeterministic)));
    }

    #[test]
    fn rejects_bad_step() {
        let r = grad_check(|tape, v| tape.sum(v[0]), &[Tensor::scalar(1.0)], 0.0);
        assert!(r.is_err());
    }
}
