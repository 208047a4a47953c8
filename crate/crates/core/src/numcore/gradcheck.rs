//! Central finite-difference verification of tape gradients. The relative
//! error uses an absolute floor so near-zero gradients are compared on an
//! absolute scale instead of blowing up the ratio.

use alloc::vec::Vec;

use rand::Rng;

use super::tape::{Tape, Var};
use super::{NumError, Tensor};

/// Perturbation size for central differences.
pub const GRADCHECK_H: f64 = 1e-5;
/// Absolute floor in the relative-error denominator.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Outcome of a finite-difference sweep over every input component.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Replays `f` with each input component nudged by `±h` and compares the
/// central difference against the tape gradient. `f` must be a pure function
/// of the leaf values.
pub fn check_gradients<F>(inputs: &[Tensor], mut f: F) -> Result<GradCheckReport, NumError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (li, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[li], input.shape());
        for ei in 0..input.len() {
            let mut eval = |delta: f64| -> Result<f64, NumError> {
                let mut shifted: Vec<Tensor> = inputs.to_vec();
                shifted[li].data_mut()[ei] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = shifted.into_iter().map(|x| t.leaf(x)).collect();
                let l = f(&mut t, &vs)?;
                Ok(t.value(l).item())
            };
            let numeric = (eval(GRADCHECK_H)? - eval(-GRADCHECK_H)?) / (2.0 * GRADCHECK_H);
            max_rel_err = max_rel_err.max(rel_err(analytic.data()[ei], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}

/// Tensor with independent uniform entries in `[lo, hi)`.
pub fn uniform_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
}

/// Tensor with independent normal entries, mean zero.
pub fn normal_tensor<R: Rng>(shape: &[usize], sigma: f64, rng: &mut R) -> Tensor {
    let dist = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(dist)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
}
