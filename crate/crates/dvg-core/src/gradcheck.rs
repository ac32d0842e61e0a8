//! Finite-difference verification of the reverse pass.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between analytic and central-difference
/// gradients of a scalar-valued function over the given points.
///
/// `f` must be a pure function of the point values: it is re-evaluated many
/// times on fresh tapes, so any randomness inside must be frozen by the
/// caller. Relative error uses `|a - n| / max(1, |a|, |n|)`.
///
/// Panics if `f` returns a non-scalar.
pub fn grad_check<F>(f: F, points: &[Tensor], h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |pts: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars);
        assert_eq!(out.shape(), vec![1], "grad_check needs a scalar function");
        out.item()
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars);
        assert_eq!(out.shape(), vec![1], "grad_check needs a scalar function");
        let grads = tape.backward(out).expect("reverse pass failed");
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for j in 0..point.numel() {
            let orig = point.data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[j];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}
