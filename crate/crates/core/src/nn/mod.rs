//! Multilayer perceptron for scalar regression.
//!
//! Weights of layer `l` have shape `(in_dim, out_dim)` and biases `(1, out_dim)`,
//! so a batch `X` of shape `(n, in_dim)` maps to `act(X·W + b)`.
//!
//! The *penultimate* output is the activation of the layer just before the
//! scalar output layer. It must be a relu layer so its entries are
//! non-negative, which the confidence module relies on.

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{load_checkpoint, model_from_text, model_to_text, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_with, LossKind};
pub use optim::{apply_update, OptimizerKind, OptimizerState};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Relu => z.relu(),
            Activation::Identity => z.clone(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Relu hidden layers of the given widths followed by a linear scalar head.
pub fn mlp_specs(input_dim: usize, hidden: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &h in hidden {
        specs.push(LayerSpec::new(prev, h, Activation::Relu));
        prev = h;
    }
    specs.push(LayerSpec::new(prev, 1, Activation::Identity));
    specs
}

/// The default 8→64→32→16→1 regression network.
pub fn default_specs() -> Vec<LayerSpec> {
    mlp_specs(8, &[64, 32, 16])
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let last = specs
        .last()
        .ok_or_else(|| Error::Config("model needs at least one layer".into()))?;
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Config(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    if last.out_dim != 1 || last.activation != Activation::Identity {
        return Err(Error::Config(
            "final layer must be identity with a single output".into(),
        ));
    }
    if specs.len() >= 2 && specs[specs.len() - 2].activation != Activation::Relu {
        return Err(Error::Config("penultimate layer must use relu".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    specs: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// He-normal weights (stddev `sqrt(2 / in_dim)`), zero biases.
pub fn init_model(specs: &[LayerSpec], rng: &mut SeededRng) -> Result<MlpModel> {
    validate_specs(specs)?;
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    for s in specs {
        let sd = (2.0 / s.in_dim as f64).sqrt();
        weights.push(rng.normal_matrix(s.in_dim, s.out_dim, 0.0, sd));
        biases.push(Matrix::zeros(1, s.out_dim));
    }
    Ok(MlpModel {
        specs: specs.to_vec(),
        weights,
        biases,
    })
}

impl MlpModel {
    /// Builds a model from explicit parameters, checking shapes and finiteness.
    pub fn from_parts(specs: Vec<LayerSpec>, weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        validate_specs(&specs)?;
        if weights.len() != specs.len() || biases.len() != specs.len() {
            return Err(Error::Shape(format!(
                "{} specs but {} weights and {} biases",
                specs.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (i, s) in specs.iter().enumerate() {
            if weights[i].shape() != (s.in_dim, s.out_dim) || biases[i].shape() != (1, s.out_dim) {
                return Err(Error::Shape(format!(
                    "layer {i}: weights {:?} / bias {:?} do not match {}→{}",
                    weights[i].shape(),
                    biases[i].shape(),
                    s.in_dim,
                    s.out_dim
                )));
            }
            if !weights[i].is_finite() || !biases[i].is_finite() {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { specs, weights, biases })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    /// Width of the penultimate output (the input width for a one-layer model).
    pub fn penultimate_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].in_dim
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.in_dim * s.out_dim + s.out_dim).sum()
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [Matrix], &mut [Matrix]) {
        (&mut self.weights, &mut self.biases)
    }

    /// Scalar predictions, shape `(batch, 1)`.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(forward(self, batch)?.output().clone())
    }

    pub fn same_architecture(&self, other: &MlpModel) -> bool {
        self.specs == other.specs
    }
}

/// Everything computed in one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre_activations
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.activations
    }

    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("at least one layer")
    }

    /// Activation output of layer `L-1`; for a single-layer model, the input.
    pub fn penultimate(&self) -> &Matrix {
        let n = self.activations.len();
        if n >= 2 {
            &self.activations[n - 2]
        } else {
            &self.input
        }
    }

    pub fn into_penultimate(mut self) -> Matrix {
        let n = self.activations.len();
        if n >= 2 {
            self.activations.swap_remove(n - 2)
        } else {
            self.input
        }
    }
}

pub fn forward(model: &MlpModel, batch: &Matrix) -> Result<ForwardTrace> {
    forward_layers(model, batch, model.num_layers())
}

/// Forward pass through the first `depth` layers only.
pub(crate) fn forward_layers(model: &MlpModel, batch: &Matrix, depth: usize) -> Result<ForwardTrace> {
    if batch.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features but model expects {}",
            batch.cols(),
            model.input_dim()
        )));
    }
    let mut pre_activations = Vec::with_capacity(depth);
    let mut activations: Vec<Matrix> = Vec::with_capacity(depth);
    for l in 0..depth {
        let a_prev = if l == 0 { batch } else { &activations[l - 1] };
        let z = matmul(a_prev, &model.weights[l])?.add_row(&model.biases[l])?;
        activations.push(model.specs[l].activation.apply(&z));
        pre_activations.push(z);
    }
    Ok(ForwardTrace {
        input: batch.clone(),
        pre_activations,
        activations,
    })
}

/// Penultimate output only; skips the final layer.
pub fn penultimate_output(model: &MlpModel, batch: &Matrix) -> Result<Matrix> {
    let depth = model.num_layers() - 1;
    Ok(forward_layers(model, batch, depth)?.into_penultimate_at(depth))
}

impl ForwardTrace {
    fn into_penultimate_at(mut self, depth: usize) -> Matrix {
        if depth == 0 {
            self.input
        } else {
            self.activations.swap_remove(depth - 1)
        }
    }
}

/// Parameter gradients, shaped like the model's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| Matrix::zeros(1, b.cols())).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .flat_map(|m| m.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened in the same order as [`flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }
}

/// Reverse-mode gradients of a scalar loss whose gradient with respect to
/// the model output is `output_grad`.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, output_grad: &Matrix) -> Result<Gradients> {
    if output_grad.shape() != trace.output().shape() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            output_grad.shape(),
            trace.output().shape()
        )));
    }
    backward_from(model, trace, model.num_layers() - 1, output_grad)
}

/// Backpropagates `act_grad`, the gradient with respect to the activation of
/// layer `top`, down to the input. Layers above `top` get zero gradients.
pub fn backward_from(model: &MlpModel, trace: &ForwardTrace, top: usize, act_grad: &Matrix) -> Result<Gradients> {
    if top >= trace.activations.len() {
        return Err(Error::Shape(format!(
            "trace covers {} layers, cannot start backward at layer {top}",
            trace.activations.len()
        )));
    }
    if act_grad.shape() != trace.activations[top].shape() {
        return Err(Error::Shape(format!(
            "activation gradient {:?} does not match layer {top} output {:?}",
            act_grad.shape(),
            trace.activations[top].shape()
        )));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut upstream = act_grad.clone();
    for l in (0..=top).rev() {
        let delta = match model.specs[l].activation {
            Activation::Relu => upstream.hadamard(&trace.pre_activations[l].relu_grad())?,
            Activation::Identity => upstream,
        };
        let a_prev = if l == 0 {
            &trace.input
        } else {
            &trace.activations[l - 1]
        };
        grads.weights[l] = matmul_tn(a_prev, &delta)?;
        grads.biases[l] = delta.column_sums();
        if l > 0 {
            upstream = matmul_nt(&delta, &model.weights[l])?;
        } else {
            break;
        }
    }
    Ok(grads)
}

fn check_loss_args(pred: &Matrix, target: &Matrix) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("loss over zero elements".into()));
    }
    Ok(())
}

/// Root-mean-square error over all elements and its gradient with respect
/// to `pred`. At zero loss the gradient is defined as zero.
pub fn rmse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    check_loss_args(pred, target)?;
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let loss = (diff.data().iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let grad = if loss == 0.0 {
        Matrix::zeros(pred.rows(), pred.cols())
    } else {
        diff.scale(1.0 / (n * loss))
    };
    Ok((loss, grad))
}

/// Mean squared error and its gradient `2(pred - target)/N`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    check_loss_args(pred, target)?;
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// All parameters as a `(1, P)` row: layer by layer, each layer's weights
/// (row-major) followed by its biases.
pub fn flatten_params(model: &MlpModel) -> Matrix {
    let mut flat = Vec::with_capacity(model.param_count());
    for (w, b) in model.weights.iter().zip(&model.biases) {
        flat.extend_from_slice(w.data());
        flat.extend_from_slice(b.data());
    }
    Matrix::from_vec(1, flat.len(), flat).expect("models have at least one parameter")
}

/// Inverse of [`flatten_params`] for the given architecture.
pub fn unflatten_params(specs: &[LayerSpec], flat: &[f64]) -> Result<MlpModel> {
    validate_specs(specs)?;
    let expected: usize = specs.iter().map(|s| s.in_dim * s.out_dim + s.out_dim).sum();
    if flat.len() != expected {
        return Err(Error::Shape(format!(
            "flat parameter vector has {} entries, architecture needs {expected}",
            flat.len()
        )));
    }
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    let mut offset = 0;
    for s in specs {
        let nw = s.in_dim * s.out_dim;
        weights.push(Matrix::from_vec(
            s.in_dim,
            s.out_dim,
            flat[offset..offset + nw].to_vec(),
        )?);
        offset += nw;
        biases.push(Matrix::from_vec(
            1,
            s.out_dim,
            flat[offset..offset + s.out_dim].to_vec(),
        )?);
        offset += s.out_dim;
    }
    MlpModel::from_parts(specs.to_vec(), weights, biases)
}
