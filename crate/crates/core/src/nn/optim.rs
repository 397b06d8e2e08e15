use crate::error::{Error, Result};
use crate::nn::{Gradients, MlpModel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus running state.
///
/// Weight decay is decoupled: the update subtracts `lr * weight_decay * w`
/// in addition to the gradient step, so the loss itself is unchanged.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    first_moment: Option<Gradients>,
    second_moment: Option<Gradients>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            first_moment: None,
            second_moment: None,
            step: 0,
        }
    }

    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, weight_decay)
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::adam_default(), learning_rate, weight_decay)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Fresh state with the same hyperparameters.
    pub fn reset(&self) -> Self {
        Self::new(self.kind, self.learning_rate, self.weight_decay)
    }

    pub fn first_moment(&self) -> Option<&Gradients> {
        self.first_moment.as_ref()
    }

    pub fn second_moment(&self) -> Option<&Gradients> {
        self.second_moment.as_ref()
    }
}

fn check_grads(model: &MlpModel, grads: &Gradients) -> Result<()> {
    if grads.weights.len() != model.num_layers() || grads.biases.len() != model.num_layers() {
        return Err(Error::Shape(format!(
            "gradients for {} layers, model has {}",
            grads.weights.len(),
            model.num_layers()
        )));
    }
    for l in 0..model.num_layers() {
        if grads.weights[l].shape() != model.weights()[l].shape()
            || grads.biases[l].shape() != model.biases()[l].shape()
        {
            return Err(Error::Shape(format!(
                "layer {l} gradient shape does not match parameters"
            )));
        }
        if !grads.weights[l].is_finite() || !grads.biases[l].is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in layer {l}")));
        }
    }
    Ok(())
}

/// Applies one optimizer step to `model` in place.
pub fn apply_update(model: &mut MlpModel, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    check_grads(model, grads)?;
    opt.step += 1;
    let lr = opt.learning_rate;
    let decay = lr * opt.weight_decay;
    match opt.kind {
        OptimizerKind::Sgd => {
            let (weights, biases) = model.params_mut();
            for (p, g) in weights
                .iter_mut()
                .chain(biases.iter_mut())
                .zip(grads.weights.iter().chain(&grads.biases))
            {
                for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gv + decay * *w;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let m = opt.first_moment.get_or_insert_with(|| Gradients::zeros_like(model));
            let v = opt.second_moment.get_or_insert_with(|| Gradients::zeros_like(model));
            let t = opt.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (weights, biases) = model.params_mut();
            let params = weights.iter_mut().chain(biases.iter_mut());
            let moments = m.weights.iter_mut().chain(m.biases.iter_mut());
            let seconds = v.weights.iter_mut().chain(v.biases.iter_mut());
            let gs = grads.weights.iter().chain(&grads.biases);
            for (((p, mm), vv), g) in params.zip(moments).zip(seconds).zip(gs) {
                adam_tensor(p, mm, vv, g, lr, decay, beta1, beta2, eps, bc1, bc2);
            }
        }
    }
    for (l, (w, b)) in model.weights().iter().zip(model.biases()).enumerate() {
        if !w.is_finite() || !b.is_finite() {
            return Err(Error::Numeric(format!(
                "update left non-finite parameters in layer {l}"
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_tensor(
    p: &mut Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    g: &Matrix,
    lr: f64,
    decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    let ps = p.data_mut().iter_mut();
    let ms = m.data_mut().iter_mut();
    let vs = v.data_mut().iter_mut();
    for (((w, mi), vi), &gi) in ps.zip(ms).zip(vs).zip(g.data()) {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps) + decay * *w;
    }
}
