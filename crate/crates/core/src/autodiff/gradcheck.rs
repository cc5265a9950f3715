//! Central finite-difference oracle for tape gradients.

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

/// Relative error with a floor on the scale, so coordinates whose true
/// gradient is exactly zero are judged against central-difference noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + REL_ERROR_FLOOR)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Compare the tape gradient of scalar `f` at `x` against central
/// differences with step `h`, over every coordinate of `x`.
///
/// Returns max over coordinates of
/// `|analytic - numeric| / (max(|analytic|, |numeric|) + 1e-6)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    let analytic = tape.backward(out)?.get(xv);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: x.numel(),
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = rel_error(a, numeric);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_coordinate = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Finite-difference check over selected coordinates of a parameter store.
///
/// `coords` lists `(parameter, flat index)` pairs. The reported
/// `worst_coordinate` is the position in `coords`.
pub fn check_param_coordinates<F>(
    f: F,
    params: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = coords.iter().map(|&(id, i)| grads.get(bound[id]).data()[i]).collect();

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let out = f(&mut tape, &bound)?;
        scalar_of(&tape, out)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: coords.len(),
    };
    let mut probe = params.clone();
    for (k, &(id, i)) in coords.iter().enumerate() {
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_error(analytic[k], numeric);
        if err > report.max_rel_error || k == 0 {
            report.max_rel_error = err;
            report.worst_coordinate = k;
            report.analytic = analytic[k];
            report.numeric = numeric;
        }
    }
    Ok(report)
}
