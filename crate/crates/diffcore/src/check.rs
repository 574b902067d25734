use crate::error::{DiffError, Result};
use crate::tape::{Array, Tape, Var};

/// Largest per-coordinate discrepancy found by [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(array index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences of step `eps`. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(f: F, point: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_report(f, point, eps).map(|r| r.max_rel_error)
}

pub fn finite_difference_report<F>(f: F, point: &[Array], eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DiffError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|a| tape.param(a.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.scalar_value(loss);
    if !base.is_finite() {
        return Err(DiffError::NonFinite("f at the base point".into()));
    }
    let analytic = tape.grad(loss, &vars)?.into_arrays();
    drop(tape);

    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = arrays.iter().map(|a| t.constant(a.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.scalar_value(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DiffError::NonFinite("f at a perturbed point".into()))
        }
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Array> = point.to_vec();
    for (ai, grad) in analytic.iter().enumerate() {
        let cols = grad.ncols();
        for k in 0..grad.len() {
            let idx = [k / cols, k % cols];
            let orig = point[ai][idx];
            set_flat(&mut work[ai], k, orig + eps);
            let up = eval(&work)?;
            set_flat(&mut work[ai], k, orig - eps);
            let down = eval(&work)?;
            set_flat(&mut work[ai], k, orig);
            let numeric = (up - down) / (2.0 * eps);
            let a = grad[idx];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error || report.worst.is_none() {
                report = FdReport {
                    max_rel_error: err.max(report.max_rel_error),
                    worst: Some((ai, k)),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

fn set_flat(a: &mut Array, k: usize, v: f64) {
    let cols = a.ncols();
    a[[k / cols, k % cols]] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_matches() {
        let err = finite_difference_check(|t, v| t.mul(v[0], v[0]), &[array![[2.0]]], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_is_exact() {
        let err = finite_difference_check(|t, _| Ok(t.scalar(5.0)), &[array![[1.0, 2.0]]], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        // log(x) at x = 0
        let res = finite_difference_check(
            |t, v| {
                let l = t.log(v[0])?;
                t.sum(l)
            },
            &[array![[0.0]]],
            1e-5,
        );
        assert!(matches!(res, Err(DiffError::NonFinite(_))));
        assert!(matches!(
            finite_difference_check(|t, v| t.sum(v[0]), &[array![[0.0]]], 0.0),
            Err(DiffError::InvalidArgument(_))
        ));
    }
}
