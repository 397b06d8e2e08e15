//! Central finite-difference check of [`backward`](super::backward).

use crate::error::Result;
use crate::nn::{backward, flatten_params, forward, mse_loss, rmse_loss, unflatten_params, MlpModel};
use crate::tensor::Matrix;

const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Rmse,
    Mse,
}

impl LossKind {
    fn eval(self, pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
        match self {
            LossKind::Rmse => rmse_loss(pred, target),
            LossKind::Mse => mse_loss(pred, target),
        }
    }
}

/// [`grad_check_with`] using the RMSE loss.
pub fn grad_check(model: &MlpModel, batch: &Matrix, target: &Matrix) -> Result<f64> {
    grad_check_with(model, batch, target, LossKind::Rmse)
}

/// Largest relative disagreement between backprop and central differences
/// (`h = 1e-5`) over every parameter, where the relative error of one entry
/// is `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
///
/// Each parameter costs two forward passes; intended for models with at most
/// a few thousand parameters.
pub fn grad_check_with(model: &MlpModel, batch: &Matrix, target: &Matrix, loss: LossKind) -> Result<f64> {
    let trace = forward(model, batch)?;
    let (_, dl) = loss.eval(trace.output(), target)?;
    let analytic = backward(model, &trace, &dl)?.flatten();

    let mut flat = flatten_params(model).into_vec();
    let mut worst = 0.0f64;
    for (i, &g_a) in analytic.iter().enumerate() {
        let orig = flat[i];
        flat[i] = orig + STEP;
        let plus = eval_loss(model, &flat, batch, target, loss)?;
        flat[i] = orig - STEP;
        let minus = eval_loss(model, &flat, batch, target, loss)?;
        flat[i] = orig;
        let g_fd = (plus - minus) / (2.0 * STEP);
        let rel = (g_a - g_fd).abs() / (g_a.abs() + g_fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn eval_loss(model: &MlpModel, flat: &[f64], batch: &Matrix, target: &Matrix, loss: LossKind) -> Result<f64> {
    let m = unflatten_params(model.specs(), flat)?;
    let out = m.predict(batch)?;
    Ok(loss.eval(&out, target)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, mlp_specs};
    use crate::rng::SeededRng;

    #[test]
    fn fresh_small_model_passes() {
        let mut rng = SeededRng::new(17);
        let m = init_model(&mlp_specs(4, &[6, 5]), &mut rng).unwrap();
        let x = rng.normal_matrix(7, 4, 0.0, 1.0);
        let y = rng.normal_matrix(7, 1, 0.0, 1.0);
        assert!(grad_check(&m, &x, &y).unwrap() < 1e-4);
    }

    #[test]
    fn linear_quadratic_is_near_exact() {
        let mut rng = SeededRng::new(18);
        let m = init_model(&mlp_specs(5, &[]), &mut rng).unwrap();
        let x = rng.normal_matrix(9, 5, 0.0, 1.0);
        let y = rng.normal_matrix(9, 1, 0.0, 1.0);
        assert!(grad_check_with(&m, &x, &y, LossKind::Mse).unwrap() < 1e-7);
    }

    #[test]
    fn zero_input_is_finite() {
        let mut rng = SeededRng::new(19);
        let m = init_model(&mlp_specs(3, &[4, 4]), &mut rng).unwrap();
        let x = Matrix::zeros(5, 3);
        let y = rng.normal_matrix(5, 1, 0.0, 1.0);
        assert!(grad_check(&m, &x, &y).unwrap().is_finite());
    }
}
