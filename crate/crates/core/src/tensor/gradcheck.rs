use rand::seq::index;

use super::{Fault, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Above this many entries in total, only a seeded sample is perturbed.
const MAX_CHECKED_ENTRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// The parameter with the largest error.
    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[(String, Tensor)]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::invalid("grad_check function must return a scalar"));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`. The relative error of each entry is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, params, h, None)
}

/// [`grad_check`] with `fault` injected into the analytic pass only.
pub fn grad_check_with_fault<F>(f: F, params: &[(String, Tensor)], h: f64, fault: Option<Fault>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let total: usize = params.iter().map(|(_, t)| t.len()).sum();
    let selected: Vec<usize> = if total > MAX_CHECKED_ENTRIES {
        let mut s = rng::stream(&[rng::domain::SAMPLE, total as u64]);
        let mut picks = index::sample(&mut s, total, MAX_CHECKED_ENTRIES).into_vec();
        picks.sort_unstable();
        picks
    } else {
        (0..total).collect()
    };

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    let mut cursor = selected.iter().peekable();
    let mut offset = 0;
    for (p, (name, value)) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[p]);
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        let mut worst = 0.0f64;
        let mut checked = 0;
        while let Some(&&flat) = cursor.peek() {
            if flat >= offset + value.len() {
                break;
            }
            cursor.next();
            let e = flat - offset;
            let orig = value.data()[e];
            work[p].1.data_mut()[e] = orig + h;
            let plus = eval(&f, &work)?;
            work[p].1.data_mut()[e] = orig - h;
            let minus = eval(&f, &work)?;
            work[p].1.data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("perturbed loss for {name}[{e}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
        offset += value.len();
        report.push(ParamError {
            name: name.clone(),
            max_rel_err: worst,
            checked,
        });
    }
    Ok(GradCheckReport { params: report })
}
