//! Central finite-difference oracle for analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

#[inline]
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: "grad_check" })
    }
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    check_eps(eps)?;
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x);
        finite(f(&tape, v)?.item()?)
    };
    let analytic = {
        let tape = Tape::new();
        let v = tape.param("x", x.clone());
        let y = f(&tape, v)?;
        finite(y.item()?)?;
        tape.backward(y)?.wrt(v)
    };
    let base = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(Tensor::new(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Finite-difference check over every trainable tensor of a parameter store.
/// `f` must register parameters on the tape by name (see `Forward`). When
/// `max_coords` is set, at most that many coordinates per tensor are probed,
/// chosen with `seed`.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    check_eps(eps)?;
    let grads = {
        let tape = Tape::new();
        let y = f(&tape, store)?;
        finite(y.item()?)?;
        tape.backward(y)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        finite(f(&tape, s)?.item()?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    let mut work = store.clone();
    let trainable: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.clone())
        .collect();
    for name in trainable {
        let value = store.get(&name)?.clone();
        let analytic = grads
            .param(&name)
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let n = value.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let base = value.to_vec();
        for i in coords {
            let mut plus = base.clone();
            plus[i] += eps;
            work.set(&name, Tensor::new(value.shape().to_vec(), plus)?)?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[i] -= eps;
            work.set(&name, Tensor::new(value.shape().to_vec(), minus)?)?;
            let fm = eval(&work)?;
            let err = rel_error(analytic.data()[i], (fp - fm) / (2.0 * eps));
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = name.clone();
            }
        }
        work.set(&name, value)?;
    }
    Ok(report)
}
