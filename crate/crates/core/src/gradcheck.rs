//! Central finite-difference gradient checking against the tape.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor for the relative error, so gradients near zero are
    /// judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input (0 = all).
    pub max_per_input: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-3, max_per_input: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&vars)?.item())
}

/// Compares tape gradients of the scalar `f(inputs)` with central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&vars)?;
        let grads = tape.backward(&loss)?;
        vars.iter().map(|v| grads.tensor(v)).collect()
    };
    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let n = work[i].len();
        let stride = if cfg.max_per_input == 0 || n <= cfg.max_per_input { 1 } else { n.div_ceil(cfg.max_per_input) };
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work, &f)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check over `extra` inputs plus every parameter in `store`. The
/// closure receives a binding whose parameters are the checked leaves.
pub fn check_model_gradients<F>(store: &ParamStore, extra: &[Tensor], cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&Binding<'t, '_>, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_selected_gradients(store, extra, cfg, |_| true, f)
}

/// Like [`check_model_gradients`], but only parameters whose name passes
/// `select` are perturbed; the rest are bound as constants.
pub fn check_selected_gradients<F>(
    store: &ParamStore,
    extra: &[Tensor],
    cfg: GradCheck,
    select: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradReport>
where
    F: for<'t> Fn(&Binding<'t, '_>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let chosen: Vec<bool> = store.iter().map(|(_, name, _)| select(name)).collect();
    let n_extra = extra.len();
    let mut inputs = extra.to_vec();
    inputs.extend(store.iter().filter(|(id, _, _)| chosen[id.index()]).map(|(_, _, t)| t.clone()));
    check_gradients(&inputs, cfg, |vars| {
        let tape = vars[0].tape();
        let mut picked = vars[n_extra..].iter();
        let all: Vec<Var<'_>> = store
            .iter()
            .map(|(id, _, t)| if chosen[id.index()] { *picked.next().expect("one var per chosen parameter") } else { tape.constant(t.clone()) })
            .collect();
        let bind = Binding::from_vars(tape, store, &all);
        f(&bind, &vars[..n_extra])
    })
}
