//! Central finite-difference verification of tape gradients.
//!
//! Used by the test suites to pin every analytic backward rule against an
//! independent numeric derivative.

use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor2;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

/// Relative error with an absolute floor: below gradient magnitude 1e-4 the
/// measure degrades to an absolute comparison at 1e-8, which is the noise
/// floor of f64 central differences at step 1e-5.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

/// Checks analytic gradients of `build` (a tape graph over `env` returning a
/// scalar loss) against central finite differences with the given `step`.
///
/// Every entry of every environment tensor is perturbed. Returns the worst
/// relative error observed.
pub fn check_gradients<T: Real>(
    env: &[Tensor2<T>],
    step: f64,
    build: impl Fn(&mut Tape<'_, T>) -> NodeId,
) -> GradCheckReport {
    let analytic = {
        let mut tape = Tape::new(env);
        let loss = build(&mut tape);
        tape.backward(loss).expect("scalar loss expected")
    };

    let eval = |env: &[Tensor2<T>]| -> f64 {
        let mut tape = Tape::new(env);
        let loss = build(&mut tape);
        tape.value(loss).item().as_f64()
    };

    let mut perturbed: Vec<Tensor2<T>> = env.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut entries_checked = 0usize;
    let h = T::cast(step);
    for slot in 0..env.len() {
        for idx in 0..env[slot].len() {
            let original = perturbed[slot].data()[idx];
            perturbed[slot].data_mut()[idx] = original + h;
            let plus = eval(&perturbed);
            perturbed[slot].data_mut()[idx] = original - h;
            let minus = eval(&perturbed);
            perturbed[slot].data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[slot].data()[idx].as_f64();
            let rel = relative_error(a, numeric);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            entries_checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        entries_checked,
    }
}
