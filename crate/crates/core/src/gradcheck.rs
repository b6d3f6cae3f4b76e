//! Central finite-difference checks for tape gradients.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric derivatives at a few coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor so that near-zero pairs do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / scale
}

/// Checks `d f(x) / d x[coord]` for each coordinate, where `f` builds a
/// scalar on a fresh tape from the leaf it is handed.
pub fn check_scalar_fn<F>(f: F, x: &Tensor, coords: &[usize], step: f64) -> GradCheck
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf);
    let grads = tape.backward(out);
    let g = grads.tensor(leaf);
    let eval = |t: &Tensor| {
        let mut tape = Tape::new();
        let leaf = tape.constant(t.clone());
        let out = f(&mut tape, leaf);
        tape.scalar(out)
    };
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_err: f64 = 0.0;
    for &c in coords {
        let mut plus = x.clone();
        plus.data_mut()[c] += step;
        let mut minus = x.clone();
        minus.data_mut()[c] -= step;
        let n = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let a = g.data()[c];
        max_rel_err = max_rel_err.max(rel_err(a, n));
        analytic.push(a);
        numeric.push(n);
    }
    GradCheck { coords: coords.to_vec(), analytic, numeric, max_rel_err }
}

/// Evenly spread coordinate picks over `len` entries.
pub fn spread_coords(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len).max(1);
    (0..count).map(|i| (i * len) / count + (len / count) / 2).map(|c| c.min(len - 1)).collect()
}
