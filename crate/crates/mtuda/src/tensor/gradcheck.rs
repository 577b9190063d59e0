//! Central finite-difference gradient checking.
//!
//! This checker only re-evaluates forward passes; it never consults an op's
//! backward rule, so it is an independent oracle for `backward`.

use super::{backward, Tensor};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance for analytic vs finite-difference gradients.
pub const FD_TOL: f64 = 1e-4;

/// Checks the analytic gradients of `f` (a scalar-valued function of the
/// given leaf tensors) against central finite differences at the inputs'
/// current values. Returns a description of the first mismatch, if any.
pub fn check_grads<F>(inputs: &[Tensor], f: F) -> Result<(), String>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    // Analytic pass over fresh trainable leaves.
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.values_vec()))
        .collect();
    let loss = f(&params);
    if loss.numel() != 1 {
        return Err("gradcheck objective must be scalar".into());
    }
    backward(&loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(vals)
            .map(|(t, v)| Tensor::from_values(t.shape(), v.clone()))
            .collect();
        f(&leaves).item()
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.values_vec()).collect();
    for (pi, pbase) in base.iter().enumerate() {
        for ei in 0..pbase.len() {
            let mut plus = base.clone();
            plus[pi][ei] += FD_STEP;
            let mut minus = base.clone();
            minus[pi][ei] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let an = analytic[pi][ei];
            let denom = fd.abs().max(an.abs()).max(1.0);
            if (fd - an).abs() > FD_TOL * denom {
                return Err(format!(
                    "gradient mismatch at input {pi} element {ei}: analytic {an}, finite-diff {fd}"
                ));
            }
        }
    }
    Ok(())
}
