use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::ParamSet;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
    pub passed: bool,
}

/// Options for [`gradient_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on coordinates probed per parameter, spread evenly.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            max_coords: None,
        }
    }
}

/// Compares reverse-mode gradients of a scalar graph with central differences.
///
/// Per parameter the error is `max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞, 1e-8)` over
/// the probed coordinates `i`.
pub fn gradient_check<F>(
    graph: F,
    params: &ParamSet,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = graph(&mut tape, params)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(
            "gradient_check",
            "graph output must be scalar",
        ));
    }
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out, None)?.params(params);

    let eval = |p: &ParamSet| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let o = graph(&mut t, p)?;
        Ok((t.scalar(o), t.kink_signature()))
    };

    let mut per_param = BTreeMap::new();
    let (mut checked, mut skipped) = (0, 0);
    let mut work = params.clone();
    for (name, g) in &grads {
        let n = g.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst_abs: f64 = 0.0;
        let mut a_inf: f64 = 0.0;
        let mut n_inf: f64 = 0.0;
        for &i in &coords {
            let orig = work[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.step;
            let (fp, sp) = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.step;
            let (fm, sm) = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let num = (fp - fm) / (2.0 * opts.step);
            let ana = g.data()[i];
            worst_abs = worst_abs.max((ana - num).abs());
            a_inf = a_inf.max(ana.abs());
            n_inf = n_inf.max(num.abs());
            checked += 1;
        }
        per_param.insert(name.clone(), worst_abs / a_inf.max(n_inf).max(1e-8));
    }
    let max_rel_error = per_param.values().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        checked,
        skipped,
        passed: max_rel_error <= opts.tolerance,
    })
}
