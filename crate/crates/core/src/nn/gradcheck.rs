//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check only this many coordinates, drawn uniformly without replacement.
    pub subsample: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, so coordinates where both
    /// gradients vanish do not divide by zero.
    pub denom_floor: f64,
    /// Skip coordinates whose difference quotients at `h` and `h/2` disagree by
    /// more than this relative amount (a rectifier kink inside the stencil).
    /// Skipped coordinates are replaced by fresh draws.
    pub kink_tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-4, tol: 1e-5, subsample: None, seed: 0, denom_floor: 1e-8, kink_tol: None }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients with central differences.
///
/// `loss` returns the scalar loss and, when asked, the gradient of every
/// parameter. It must be a deterministic function of the parameters.
pub fn grad_check<F>(loss: F, params: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, bool) -> Result<(f64, Option<BTreeMap<String, Tensor<f64>>>)>,
{
    let (_, grads) = loss(params, true)?;
    let grads = grads.ok_or_else(|| Error::MissingState("loss did not return gradients".into()))?;

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let order: Vec<usize> = match opts.subsample {
        Some(k) if k < coords.len() => {
            let mut r = rng::stream(opts.seed, "grad-check", 0);
            sample(&mut r, coords.len(), coords.len()).into_vec()
        }
        _ => (0..coords.len()).collect(),
    };
    let want = opts.subsample.unwrap_or(coords.len()).min(coords.len());

    let mut work = params.clone();
    let mut report =
        GradCheckReport { checked: 0, skipped_kinks: 0, max_rel_error: 0.0, max_abs_error: 0.0, worst: None, passed: true };
    let mut central = |name: &str, i: usize, base: f64, h: f64| -> Result<f64> {
        work.get_mut(name).unwrap().data[i] = base + h;
        let (up, _) = loss(&work, false)?;
        work.get_mut(name).unwrap().data[i] = base - h;
        let (down, _) = loss(&work, false)?;
        work.get_mut(name).unwrap().data[i] = base;
        Ok((up - down) / (2.0 * h))
    };
    for ci in order {
        if report.checked == want {
            break;
        }
        let (name, i) = &coords[ci];
        let base = params.get(name).expect("coordinate from store").data[*i];
        let numeric = central(name, *i, base, opts.h)?;
        if let Some(kt) = opts.kink_tol {
            let half = central(name, *i, base, opts.h / 2.0)?;
            if relative_error(numeric, half, opts.denom_floor) > kt {
                report.skipped_kinks += 1;
                continue;
            }
        }
        let analytic = grads.get(name).map(|g| g.data[*i]).unwrap_or(0.0);
        let rel = relative_error(analytic, numeric, opts.denom_floor);
        let abs = (analytic - numeric).abs();
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(CoordinateCheck { param: name.clone(), index: *i, analytic, numeric, rel_error: rel });
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
