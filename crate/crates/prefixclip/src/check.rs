//! Finite-difference verification of analytic gradients.
//!
//! Central differences with step `h` approximate d(loss)/d(param) one
//! element at a time; the comparison uses a relative error with an absolute
//! floor so that near-zero gradients are judged on absolute terms instead of
//! amplified rounding noise.

use crate::tensor::{no_grad, Result, Tensor};

/// Perturbation step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on [`max_rel_error`].
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor; errors below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// d(loss)/d(param) for every element of every listed parameter, by running
/// the loss twice per element with the entry nudged by `±h`.
pub fn numeric_grads(
    loss: &dyn Fn() -> Result<Tensor>,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let n = p.numel();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = p.data()[i];
            p.modify_data(|d| d[i] = orig + h);
            let plus = no_grad(loss)?.item();
            p.modify_data(|d| d[i] = orig - h);
            let minus = no_grad(loss)?.item();
            p.modify_data(|d| d[i] = orig);
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Gradients from one reverse-mode sweep, in the same layout as
/// [`numeric_grads`]. Parameters untouched by the loss report zeros.
pub fn analytic_grads(
    loss: &dyn Fn() -> Result<Tensor>,
    params: &[Tensor],
) -> Result<Vec<Vec<f64>>> {
    for p in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    Ok(params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect())
}

/// Worst-case relative disagreement between reverse mode and central
/// differences over all elements of all parameters.
pub fn max_rel_error(loss: &dyn Fn() -> Result<Tensor>, params: &[Tensor], h: f64) -> Result<f64> {
    let analytic = analytic_grads(loss, params)?;
    let numeric = numeric_grads(loss, params, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max(rel_error(x, y));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradients_agree_exactly() {
        let w = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let wc = w.clone();
        let loss = move || wc.mul(&wc)?.sum_all();
        // central differences are exact for quadratics up to rounding
        let err = max_rel_error(&loss, &[w], FD_STEP).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn composite_network_gradients_agree() {
        let w = Tensor::param(&[3, 2], vec![0.3, -0.7, 0.2, 0.9, -0.4, 0.1]).unwrap();
        let b = Tensor::param(&[2], vec![0.05, -0.02]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 0.5, -0.3, -0.8, 0.2, 0.6]).unwrap();
        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        let loss = move || xc.matmul(&wc)?.add(&bc)?.gelu()?.softmax_last()?.mul(&xc.matmul(&wc)?)?.mean_all();
        let err = max_rel_error(&loss, &[w, b], FD_STEP).unwrap();
        assert!(err < FD_TOL, "err = {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // analytic grads of sum(w^2) vs numeric grads of sum(w^2) + sum(w):
        // the checker must flag the missing linear term loudly.
        let w = Tensor::param(&[2], vec![0.7, -0.3]).unwrap();
        let wc = w.clone();
        let right = move || wc.mul(&wc)?.sum_all();
        let wc2 = w.clone();
        let shifted = move || wc2.mul(&wc2)?.sum_all()?.add(&wc2.sum_all()?);
        let analytic = analytic_grads(&right, &[w.clone()]).unwrap();
        let numeric = numeric_grads(&shifted, &[w], FD_STEP).unwrap();
        let disagreement = rel_error(analytic[0][0], numeric[0][0]);
        assert!(disagreement > FD_TOL * 100.0, "disagreement = {disagreement}");
    }
}
