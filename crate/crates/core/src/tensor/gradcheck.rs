//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParameterStore, Tape, Var};
use crate::error::{Result, XfiError};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic − numeric| / max(1e-12, |analytic| + |numeric|)` over checked entries.
    pub max_relative_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: (f64, f64),
    pub checked_entries: usize,
}

fn evaluate<F>(f: &F, params: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    tape.value(out).item()
}

/// Checks every entry of every parameter. Returns the maximum relative error.
pub fn finite_diff_gradcheck<F>(f: F, params: &mut ParameterStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    Ok(finite_diff_gradcheck_sampled(f, params, eps, None, 0)?.max_relative_error)
}

/// Like [`finite_diff_gradcheck`], but checks at most `max_per_param` randomly chosen
/// entries of each parameter (all entries when `None`).
pub fn finite_diff_gradcheck_sampled<F>(
    f: F,
    params: &mut ParameterStore,
    eps: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(XfiError::InvalidArgument(format!("gradcheck eps must be > 0, got {eps}")));
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(XfiError::NonDeterministic { first, second });
    }

    let mut analytic_store = params.clone();
    analytic_store.zero_grad();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, &analytic_store)?;
        tape.backward(out, &mut analytic_store)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked_entries: 0,
    };
    for name in names {
        let analytic = analytic_store
            .get(&name)?
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_default();
        let numel = params.get(&name)?.numel();
        let indices: Vec<usize> = match max_per_param {
            Some(k) if k < numel => {
                let mut idx = sample(&mut rng, numel, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        for i in indices {
            let original = params.get(&name)?.data()[i];
            let (up, down) = (original + eps, original - eps);
            params.get_mut(&name)?.data_mut()[i] = up;
            let plus = evaluate(&f, params);
            params.get_mut(&name)?.data_mut()[i] = down;
            let minus = evaluate(&f, params);
            params.get_mut(&name)?.data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            // differences at the roundoff resolution of f carry no derivative information
            let resolution = 4.0 * f64::EPSILON * plus.abs().max(minus.abs());
            let delta = if (plus - minus).abs() <= resolution { 0.0 } else { plus - minus };
            // divide by the step actually stored, not the nominal 2·eps
            let numeric = delta / (up - down);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.checked_entries += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
