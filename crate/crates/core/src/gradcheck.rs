//! Central-difference gradient checking in 64-bit precision.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, Mode, ModelParams};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

/// |analytic − numeric| / max(1e-8, |analytic| + |numeric|)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Which elements of a parameter to probe. `None` probes all of them.
#[derive(Clone, Debug)]
pub struct ParamSelection {
    pub name: String,
    pub elements: Option<Vec<usize>>,
}

impl ParamSelection {
    pub fn all(name: impl Into<String>) -> Self {
        Self { name: name.into(), elements: None }
    }

    pub fn some(name: impl Into<String>, elements: Vec<usize>) -> Self {
        Self { name: name.into(), elements: Some(elements) }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// (element, analytic, numeric) at the worst element.
    pub worst: (usize, f64, f64),
    /// Elements whose analytic and numeric gradients are both within the
    /// quotient's roundoff of zero; left out of `max_rel_error`.
    pub within_roundoff: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval_loss<F>(model: &ModelParams<f64>, mode: Mode, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut scratch = model.clone();
    let mut g = Graph::new(&mut scratch, mode);
    let loss = f(&mut g)?;
    let v = g.tape.value(loss)?;
    if v.numel() != 1 {
        return Err(Error::Usage("grad_check loss must be a scalar".into()));
    }
    Ok(v.data()[0])
}

/// Compares backward-pass gradients of `f` with central differences for
/// every selected parameter element. Each evaluation runs on a copy of
/// `model`, so running statistics are never disturbed.
pub fn grad_check<F>(
    model: &ModelParams<f64>,
    mode: Mode,
    f: F,
    selection: &[ParamSelection],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    grad_check_with_step(model, mode, f, selection, tolerance, Step::Fixed(FD_STEP))
}

/// How the difference step is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    Fixed(f64),
    /// Shrink from [`FD_STEP`] by factors of ten until the central
    /// differences at `h` and `h / 10` agree, so the stencil no longer
    /// straddles a ReLU or max-pool kink. Differences within the roundoff of
    /// the quotient (about `ROUNDOFF · |L| / h`) count as agreement, and a
    /// gradient that small on both sides counts as zero.
    Adaptive,
}

/// Relative roundoff assumed for one 64-bit loss evaluation.
pub const ROUNDOFF: f64 = 1e-15;
const MIN_STEP: f64 = 1e-8;

/// [`grad_check`] for deep ReLU networks, where a fixed step often
/// straddles a kink. See [`Step::Adaptive`].
pub fn grad_check_adaptive<F>(
    model: &ModelParams<f64>,
    mode: Mode,
    f: F,
    selection: &[ParamSelection],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    grad_check_with_step(model, mode, f, selection, tolerance, Step::Adaptive)
}

pub fn grad_check_with_step<F>(
    model: &ModelParams<f64>,
    mode: Mode,
    f: F,
    selection: &[ParamSelection],
    tolerance: f64,
    step: Step,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut analytic_model = model.clone();
    analytic_model.zero_grads();
    let loss_scale = {
        let mut g = Graph::new(&mut analytic_model, mode);
        let loss = f(&mut g)?;
        let v = g.tape.value(loss)?.data()[0];
        g.backward(loss)?;
        v.abs().max(1.0)
    };
    let mut entries = Vec::with_capacity(selection.len());
    for sel in selection {
        let p = model.require(&sel.name)?;
        let n = p.value.numel();
        let analytic = analytic_model
            .require(&sel.name)?
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let elements: Vec<usize> = match &sel.elements {
            Some(e) => e.clone(),
            None => (0..n).collect(),
        };
        let mut entry = GradCheckEntry {
            name: sel.name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
            within_roundoff: 0,
        };
        for &k in &elements {
            if k >= n {
                return Err(Error::Usage(format!("{} has no element {k}", sel.name)));
            }
            let base = p.value.data()[k];
            let mut probe = model.clone();
            let mut central = |h: f64| -> Result<f64> {
                probe.get_mut(&sel.name).unwrap().value.data_mut()[k] = base + h;
                let plus = eval_loss(&probe, mode, &f)?;
                probe.get_mut(&sel.name).unwrap().value.data_mut()[k] = base - h;
                let minus = eval_loss(&probe, mode, &f)?;
                Ok((plus - minus) / (2.0 * h))
            };
            let noise = |h: f64| ROUNDOFF * loss_scale / h;
            let a = analytic.data()[k];
            let (numeric, h) = match step {
                Step::Fixed(h) => (central(h)?, h),
                Step::Adaptive => {
                    let mut h = FD_STEP;
                    let mut prev = central(h)?;
                    while h / 10.0 >= MIN_STEP {
                        let cur = central(h / 10.0)?;
                        let agree = (cur - prev).abs() <= 1e-4 * (cur.abs() + prev.abs()) + noise(h / 10.0);
                        h /= 10.0;
                        prev = cur;
                        if agree {
                            break;
                        }
                    }
                    (prev, h)
                }
            };
            entry.checked += 1;
            if step == Step::Adaptive && a.abs() + numeric.abs() <= noise(h) {
                entry.within_roundoff += 1;
                continue;
            }
            let err = relative_error(a, numeric);
            if err >= entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst = (k, a, numeric);
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { tolerance, entries })
}

/// Gradient check for a function of plain tensors (no model), returning the
/// maximum relative error over every input element.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = tape.value(out)?.data()[0];
        let mut grads = Vec::new();
        if want_grads {
            let mut g = tape.backward(out)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(g.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((loss, grads))
    };
    let (_, analytic) = run(inputs, true)?;
    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for i in 0..values.len() {
        for k in 0..values[i].numel() {
            let base = values[i].data()[k];
            values[i].data_mut()[k] = base + FD_STEP;
            let (plus, _) = run(&values, false)?;
            values[i].data_mut()[k] = base - FD_STEP;
            let (minus, _) = run(&values, false)?;
            values[i].data_mut()[k] = base;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[k], numeric));
        }
    }
    Ok(worst)
}
