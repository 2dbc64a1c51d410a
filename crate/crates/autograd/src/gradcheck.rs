//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutogradError, Result};
use crate::params::ParamSet;

/// One evaluation of the checked function.
///
/// `regime` identifies the smooth piece the point lies on (see
/// [`crate::Tape::regime_signature`]); functions without kinks use 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub regime: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self { value, regime: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub h: f64,
    /// Upper bound on checked coordinates; all are checked when fewer exist.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because `±h` crossed a kink.
    pub skipped: usize,
    pub worst: Option<Worst>,
}

#[derive(Clone, Debug)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare `analytic` (gradients keyed like `params`) against central
/// differences of `f`. Only names present in `analytic` are perturbed.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamSet,
    analytic: &ParamSet,
    cfg: FdConfig,
) -> Result<FdReport>
where
    F: FnMut(&ParamSet) -> Result<Probe>,
{
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, g) in analytic.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: "finite_diff_check",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        coords.extend((0..g.len()).map(|i| (name.to_string(), i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Oversample so kink rejections can be replaced.
    let order: Vec<usize> = if coords.len() <= cfg.max_coords {
        (0..coords.len()).collect()
    } else {
        sample(&mut rng, coords.len(), (cfg.max_coords * 2).min(coords.len())).into_vec()
    };

    let base = f(params)?;
    check_finite(base.value)?;
    let mut work = params.clone();
    let mut report = FdReport::default();
    for idx in order {
        if report.checked >= cfg.max_coords {
            break;
        }
        let (name, i) = &coords[idx];
        let orig = work.get(name)?.data()[*i];
        work.get_mut(name)?.data_mut()[*i] = orig + cfg.h;
        let plus = f(&work)?;
        work.get_mut(name)?.data_mut()[*i] = orig - cfg.h;
        let minus = f(&work)?;
        work.get_mut(name)?.data_mut()[*i] = orig;
        check_finite(plus.value)?;
        check_finite(minus.value)?;
        if plus.regime != base.regime || minus.regime != base.regime {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * cfg.h);
        let a = analytic.get(name)?.data()[*i];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some(Worst {
                    name: name.clone(),
                    index: *i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(AutogradError::NonFinite {
            op: "finite_diff_check",
        })
    }
}
