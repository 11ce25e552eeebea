use rand::Rng;

use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// One probed scalar parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.numeric.abs() + 1e-12)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    /// Largest relative error over smooth probes.
    pub max_rel_err: f64,
    pub checked: Vec<Probe>,
    /// Probes whose one-sided slopes disagree (e.g. an L1 kink); excluded
    /// from `max_rel_err`.
    pub kinks: Vec<Probe>,
}

impl FdReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

/// Draws `n` (parameter, flat index) pairs uniformly over all scalars.
pub fn sample_probes(
    store: &ParamStore<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let total = store.numel();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut flat = rng.gen_range(0..total);
        for id in store.ids() {
            let len = store.get(id).numel();
            if flat < len {
                out.push((id, flat));
                break;
            }
            flat -= len;
        }
    }
    out
}

/// Compares `analytic` gradients of `f` with central differences.
///
/// Relative error is `|analytic - numeric| / (|numeric| + 1e-12)`. A probe
/// whose left and right difference quotients disagree by more than 1% is a
/// non-differentiable point and is reported in [`FdReport::kinks`] instead.
pub fn finite_diff_check<F>(
    f: F,
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    probes: &[(ParamId, usize)],
    eps: f64,
) -> Result<FdReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let v = f(s)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("objective is not finite: {v}")))
        }
    };
    let f0 = eval(store)?;
    let mut report = FdReport::default();
    let mut work = store.clone();
    for &(id, idx) in probes {
        let orig = store.get(id).data()[idx];
        work.get_mut(id).data_mut()[idx] = orig + eps;
        let fp = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig - eps;
        let fm = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig;

        let probe = Probe {
            param: store.name(id).to_owned(),
            index: idx,
            analytic: analytic.get(id).data()[idx],
            numeric: (fp - fm) / (2.0 * eps),
        };
        let right = (fp - f0) / eps;
        let left = (f0 - fm) / eps;
        if (right - left).abs() > 1e-2 * (right.abs() + left.abs()) + 1e-9 {
            report.kinks.push(probe);
        } else {
            report.max_rel_err = report.max_rel_err.max(probe.rel_err());
            report.checked.push(probe);
        }
    }
    Ok(report)
}
