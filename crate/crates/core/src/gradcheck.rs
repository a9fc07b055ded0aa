//! Central finite-difference gradient checks in `f64`.

use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;

/// Gradients whose largest magnitude is below this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// Result of comparing one tensor's analytic gradient against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub elements: usize,
    pub max_abs_err: f64,
    /// `max|analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub rel_err: f64,
}

impl GradCheck {
    fn from_pair(name: String, analytic: &[f64], numeric: &[f64]) -> Self {
        let max_abs_err = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(numeric)
            .map(|v| v.abs())
            .fold(REL_FLOOR, f64::max);
        GradCheck {
            name,
            elements: analytic.len(),
            max_abs_err,
            rel_err: max_abs_err / scale,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

/// Reduces any output to a scalar through a fixed random projection, so that
/// every output element carries a distinct weight into the loss.
pub fn probe_loss(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y)?.to_vec();
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    let probe = Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let p = tape.leaf(probe);
    let m = tape.mul(y, p)?;
    tape.sum(m)
}

/// Checks `d loss / d input` for every input of a function built on a fresh tape.
pub fn check_function<F>(inputs: &[Tensor<f64>], f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss)?.data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        let mut work = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        out.push(GradCheck::from_pair(
            format!("input{i}"),
            &analytic,
            &numeric,
        ));
    }
    Ok(out)
}

/// Checks gradients of stored parameters. `loss` runs a forward pass on the
/// session (always in training mode) and returns a scalar. Running
/// statistics are restored afterwards.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    loss: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let snapshot = store.clone();
    store.zero_grads();
    let mut sess = Session::new(store, true);
    let l = loss(&mut sess)?;
    sess.backward(l)?;
    let mut out = Vec::new();
    for &id in ids {
        let t = store.get(id)?;
        let analytic = t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id)?.data()[j];
            let mut at = |v: f64| -> Result<f64> {
                store.get_mut(id)?.data_mut()[j] = v;
                let mut sess = Session::new(store, true);
                let l = loss(&mut sess)?;
                Ok(sess.value(l)?.data()[0])
            };
            let up = at(orig + FD_STEP)?;
            let down = at(orig - FD_STEP)?;
            at(orig)?;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        out.push(GradCheck::from_pair(
            store.name(id)?.to_string(),
            &analytic,
            &numeric,
        ));
    }
    store.copy_values_from(&snapshot)?;
    store.zero_grads();
    Ok(out)
}
