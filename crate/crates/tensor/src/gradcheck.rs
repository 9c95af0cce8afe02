//! Central finite-difference checks of tape gradients (f64 only).

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Values smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input or parameter index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, which: usize, idx: usize, a: f64, n: f64) {
        let e = rel_error(a, n);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((which, idx, a, n));
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst);
        }
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares autodiff against central differences for every element of every
/// input (or at most `max_per_input` evenly spaced elements of each).
pub fn check_inputs<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    max_per_input: Option<usize>,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck::new();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = match max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe, &f)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            report.record(i, j, analytic[j], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Finite-difference check of selected parameter entries of a model loss.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    picks: &[(ParamId, usize)],
    step: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    work.zero_grad();
    work.accumulate(&grads);

    let mut report = GradCheck::new();
    for &(id, j) in picks {
        let analytic = work.get(id).grad.as_ref().map_or(0.0, |g| g[j]);
        let mut probe = store.clone();
        let orig = probe.get(id).data()[j];
        probe.get_mut(id).data_mut()[j] = orig + step;
        let up = {
            let mut t = Tape::new();
            let l = f(&mut t, &probe)?;
            t.value(l).item()
        };
        probe.get_mut(id).data_mut()[j] = orig - step;
        let down = {
            let mut t = Tape::new();
            let l = f(&mut t, &probe)?;
            t.value(l).item()
        };
        report.record(id.index(), j, analytic, (up - down) / (2.0 * step));
    }
    Ok(report)
}
