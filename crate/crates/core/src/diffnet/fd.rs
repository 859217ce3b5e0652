//! Central finite-difference verification of analytic gradients.

use super::params::{GradSet, ParamSet};
use crate::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Absolute disagreements below this are attributed to round-off in the
/// difference quotient and are not counted.
pub const NOISE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare `analytic` against central differences of `value` around `sets`.
///
/// Per entry the error is `|a - c| / (|a| + |c| + 1e-12)`; the report keeps
/// the maximum.
pub fn fd_compare<F>(sets: &[ParamSet], analytic: &[GradSet], eps: f64, mut value: F) -> Result<FdReport>
where
    F: FnMut(&[ParamSet]) -> Result<f64>,
{
    let mut work = sets.to_vec();
    let mut report = FdReport::default();
    for s in 0..sets.len() {
        let names: Vec<String> = sets[s].names().map(str::to_string).collect();
        for name in names {
            let n = sets[s].get(&name).expect("name").len();
            let grad: Vec<f64> = analytic[s].get(&name).expect("grad").iter().copied().collect();
            for i in 0..n {
                let orig = sets[s].get(&name).expect("name").as_slice().expect("contiguous")[i];
                set_entry(&mut work[s], &name, i, orig + eps);
                let up = value(&work)?;
                set_entry(&mut work[s], &name, i, orig - eps);
                let down = value(&work)?;
                set_entry(&mut work[s], &name, i, orig);
                let c = (up - down) / (2.0 * eps);
                let a = grad[i];
                report.checked += 1;
                let diff = (a - c).abs();
                if diff <= NOISE_FLOOR {
                    continue;
                }
                let rel = diff / (a.abs() + c.abs() + 1e-12);
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}

/// `loss` returns the value and the analytic gradients for each set.
pub fn fd_check<F>(sets: &[ParamSet], eps: f64, mut loss: F) -> Result<FdReport>
where
    F: FnMut(&[ParamSet]) -> Result<(f64, Vec<GradSet>)>,
{
    let (_, grads) = loss(sets)?;
    fd_compare(sets, &grads, eps, |w| loss(w).map(|(v, _)| v))
}

fn set_entry(set: &mut ParamSet, name: &str, i: usize, v: f64) {
    set.get_mut(name).expect("name").as_slice_mut().expect("contiguous")[i] = v;
}
