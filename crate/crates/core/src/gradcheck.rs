//! Central finite-difference verification of tape gradients.
//!
//! The check perturbs every element of every input, re-runs the forward pass
//! on a fresh tape, and compares (f(x+e) - f(x-e)) / 2e against the recorded
//! gradient. Non-scalar outputs are reduced with a fixed random projection so
//! one scalar probes the whole Jacobian.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with the usual guarded denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Verify tape gradients for `build` against central finite differences.
///
/// `build` receives leaves for each entry of `inputs` and returns the value
/// to differentiate. Every input element is checked; fails if any relative
/// error exceeds `tol`.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    build: F,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Val]) -> Result<Val>,
{
    let mut rng = StdRng::seed_from_u64(seed);
    let mut projection: Option<Tensor> = None;

    let eval = |tensors: &[Tensor], proj: &mut Option<Tensor>, rng: &mut StdRng| -> Result<(Tape, Vec<Val>, Val, f64)> {
        let mut tape = Tape::new();
        let leaves: Vec<Val> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        let scalar = if tape.value(out).is_scalar() {
            out
        } else {
            let shape = tape.value(out).shape();
            // Signed weights with magnitude bounded away from zero keep the
            // projected gradient components large enough for finite
            // differences to resolve at eps = 1e-4.
            let proj_t = proj
                .get_or_insert_with(|| {
                    Tensor::from_fn(shape, |_, _, _, _| {
                        let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                        sign * rng.random_range(0.5..1.5)
                    })
                })
                .clone();
            let p = tape.leaf(proj_t);
            let prod = tape.hadamard(out, p)?;
            tape.sum(prod)?
        };
        let value = tape.value(scalar).data()[0];
        Ok((tape, leaves, scalar, value))
    };

    let (mut tape, leaves, scalar, _) = eval(inputs, &mut projection, &mut rng)?;
    tape.backward(scalar)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.data().len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += eps;
            let (_, _, _, f_plus) = eval(&plus, &mut projection, &mut rng)?;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= eps;
            let (_, _, _, f_minus) = eval(&minus, &mut projection, &mut rng)?;
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let an = if analytic[ti].is_empty() { 0.0 } else { analytic[ti][ei] };
            let err = rel_err(an, fd);
            if err > max_rel {
                max_rel = err;
            }
            checked += 1;
            if err > tol {
                return Err(Error::Numeric(format!(
                    "gradient check failed: input {ti} element {ei}: analytic {an:.9e} vs finite-diff {fd:.9e} (rel err {err:.3e} > {tol:.1e})"
                )));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked })
}
