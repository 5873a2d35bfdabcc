//! Central finite-difference verification of analytic gradients.

use std::fmt;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// One evaluation of an objective: its loss, plus a fingerprint of any hard
/// discrete choices (argmin selections) made along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub selection: Vec<usize>,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Self {
            loss,
            selection: Vec::new(),
        }
    }
}

/// A scalar function of a [`ParamStore`] with an analytic gradient.
pub trait Objective {
    fn evaluate(&self, params: &ParamStore) -> Result<Probe>;

    /// Returns the loss and accumulates its gradient into `params`.
    fn gradient(&self, params: &mut ParamStore) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation changed a discrete selection.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub params: Vec<ParamCheck>,
    /// Set when a perturbed loss was not finite; the check stops there.
    pub non_finite: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_err <= tolerance
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<40} {:>8} {:>8} {:>12} {:>14} {:>14}",
            "parameter", "checked", "skipped", "max-rel-err", "analytic", "numeric"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<40} {:>8} {:>8} {:>12.3e} {:>14.6e} {:>14.6e}",
                p.name, p.checked, p.skipped, p.max_rel_err, p.analytic, p.numeric
            )?;
        }
        if let Some((name, index)) = &self.non_finite {
            writeln!(f, "aborted: non-finite loss perturbing {name}[{index}]")?;
        }
        write!(f, "max relative error: {:.3e}", self.max_rel_err)
    }
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic gradients against `(f(θ+ε) − f(θ−ε)) / 2ε` for every
/// scalar in `params`. Parameters are restored exactly afterwards.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    params.zero_grads();
    let base_loss = objective.gradient(params)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    if !base_loss.is_finite() {
        return Ok(GradCheckReport {
            max_rel_err: f64::INFINITY,
            params: Vec::new(),
            non_finite: Some((names.first().cloned().unwrap_or_default(), 0)),
        });
    }
    let base = objective.evaluate(params)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        params: Vec::with_capacity(names.len()),
        non_finite: None,
    };
    for name in names {
        let analytic = params.grad(&name)?.clone();
        let mut entry = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..analytic.data().len() {
            let original = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = original + eps;
            let plus = objective.evaluate(params);
            params.get_mut(&name)?.data_mut()[i] = original - eps;
            let minus = objective.evaluate(params);
            params.get_mut(&name)?.data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);

            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                report.non_finite = Some((name.clone(), i));
                report.max_rel_err = f64::INFINITY;
                report.params.push(entry);
                return Ok(report);
            }
            if plus.selection != base.selection || minus.selection != base.selection {
                entry.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            entry.checked += 1;
            if err >= entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = report.max_rel_err.max(entry.max_rel_err);
        report.params.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::DenseMatrix;

    struct Square;

    impl Objective for Square {
        fn evaluate(&self, params: &ParamStore) -> Result<Probe> {
            let w = params.get("w")?.get(0, 0);
            Ok(Probe::smooth(w * w))
        }

        fn gradient(&self, params: &mut ParamStore) -> Result<f64> {
            let w = params.get("w")?.get(0, 0);
            params.accumulate_grad("w", &DenseMatrix::filled(1, 1, 2.0 * w))?;
            Ok(w * w)
        }
    }

    struct Constant;

    impl Objective for Constant {
        fn evaluate(&self, _: &ParamStore) -> Result<Probe> {
            Ok(Probe::smooth(4.2))
        }

        fn gradient(&self, _: &mut ParamStore) -> Result<f64> {
            Ok(4.2)
        }
    }

    struct Exploding;

    impl Objective for Exploding {
        fn evaluate(&self, params: &ParamStore) -> Result<Probe> {
            let w = params.get("w")?.get(0, 0);
            Ok(Probe::smooth(if w > 3.0 { f64::NAN } else { w }))
        }

        fn gradient(&self, params: &mut ParamStore) -> Result<f64> {
            params.accumulate_grad("w", &DenseMatrix::filled(1, 1, 1.0))?;
            Ok(params.get("w")?.get(0, 0))
        }
    }

    fn store(w: f64) -> ParamStore {
        let mut p = ParamStore::new(0);
        p.insert("w", DenseMatrix::filled(1, 1, w)).unwrap();
        p
    }

    #[test]
    fn square_matches_closed_form() {
        let mut p = store(3.0);
        let report = grad_check(&Square, &mut p, 1e-5).unwrap();
        let entry = &report.params[0];
        assert_eq!(entry.analytic, 6.0);
        assert!((entry.numeric - 6.0).abs() < 1e-6, "{}", entry.numeric);
        assert!(report.passed(1e-6));
        assert_eq!(p.get("w").unwrap().get(0, 0), 3.0);
    }

    #[test]
    fn constant_has_zero_gradients() {
        let mut p = store(1.0);
        let report = grad_check(&Constant, &mut p, 1e-5).unwrap();
        assert_eq!(report.params[0].analytic, 0.0);
        assert_eq!(report.params[0].numeric, 0.0);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_loss_aborts_with_flag() {
        let mut p = store(3.0);
        let report = grad_check(&Exploding, &mut p, 1e-5).unwrap();
        assert_eq!(report.non_finite, Some(("w".to_string(), 0)));
        assert!(!report.passed(1.0));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let mut p = store(3.0);
        assert!(grad_check(&Square, &mut p, 0.0).is_err());
    }
}
