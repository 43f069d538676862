//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    /// `|a - n| / max(|a|, |n|, 1e-8)` using L2 norms over the tensor.
    pub rel_error: f64,
    /// Worst single-element `|a - n|`.
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamGradError> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

/// Compares analytic parameter gradients of `loss` against central
/// differences with step `eps`.
///
/// `loss` must build a fresh forward pass on the given tape and return a
/// scalar. It is evaluated `1 + 2 * numel` times, so keep fragments small.
pub fn grad_check<F>(params: &mut ParamStore<f64>, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(params, &mut tape)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(params, &mut tape)?;
        Ok(tape.value(out).data()[0])
    };

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.tensor(id).numel();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.tensor(id).data()[i];
            params.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let plus = eval(params)?;
            params.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let minus = eval(params)?;
            params.get_mut(id).tensor.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let max_abs_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.push(ParamGradError {
            name: params.get(id).name.clone(),
            rel_error: relative_error(&analytic, &numeric),
            max_abs_error,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: report.iter().map(|p| p.rel_error).fold(0.0, f64::max),
        params: report,
    })
}
