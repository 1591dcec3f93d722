//! Central finite-difference verification of tape gradients.

use crate::autodiff::{AutodiffError, Eval, Graph, Tape};
use crate::params::{Bound, ParamStore};

/// A scalar function of the parameters in a [`ParamStore`], evaluable on
/// any [`Graph`].
pub trait Objective {
    fn eval<G: Graph>(&self, g: &G, params: &Bound<G::Value>) -> G::Value;
}

/// Gradients of `obj` with respect to every scalar of `store`, via one
/// backward pass. Frozen entries report zero.
pub fn analytic_gradient<O: Objective>(
    obj: &O,
    store: &ParamStore,
) -> Result<Vec<Vec<f64>>, AutodiffError> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let root = obj.eval(&tape, &bound);
    tape.backward(root)?;
    Ok(store
        .entries()
        .iter()
        .zip(&bound)
        .map(|(e, vars)| {
            if e.trainable {
                vars.iter().map(|&v| tape.grad(v)).collect()
            } else {
                vec![0.0; vars.len()]
            }
        })
        .collect())
}

/// Max over trainable scalars of `|analytic - numeric| / max(1, |numeric|)`
/// where `numeric` is the central difference with the given step.
pub fn finite_diff_check<O: Objective>(
    obj: &O,
    store: &ParamStore,
    step: f64,
) -> Result<f64, AutodiffError> {
    let analytic = analytic_gradient(obj, store)?;
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        if !store.entry(id).trainable {
            continue;
        }
        for k in 0..store.value(id).len() {
            let x0 = store.value(id)[k];
            probe.value_mut(id)[k] = x0 + step;
            let up = obj.eval(&Eval, &probe.bind(&Eval));
            probe.value_mut(id)[k] = x0 - step;
            let down = obj.eval(&Eval, &probe.bind(&Eval));
            probe.value_mut(id)[k] = x0;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[id][k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
