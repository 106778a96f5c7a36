//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it validates.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Denominator floor for relative errors. Gradients whose magnitude is
/// below this are compared absolutely against it.
pub const REL_FLOOR: f64 = 1e-7;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(label, index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, idx: usize, a: f64, n: f64) {
        let e = rel_err(a, n);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), idx, a, n));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Checks gradients with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.leaf(t.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, None));
        }
        let g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| g.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, Some(grads)))
    };
    let (_, grads) = eval(inputs, true)?;
    let grads = grads.expect("requested");
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (fp, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - h;
            let (fm, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            report.record(&format!("input{i}"), j, g.data()[j], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every scalar of the selected
/// parameters. `f` must be deterministic in the parameter values.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?.into_param_grads(store);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let value = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(s, &mut tape)?;
        Ok(tape.value(l).item())
    };
    for &id in ids {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let fp = value(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let fm = value(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            report.record(store.name(id), j, grads.get(id)[j], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}
