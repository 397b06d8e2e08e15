//! Server-side aggregation: parameter averaging and the two distillation
//! schemes.
//!
//! Both distillation schemes start the student from the uniform parameter
//! average of the freshly returned local models and then take `T` plain
//! gradient steps that pull the student's penultimate output toward a
//! teacher target on unlabeled public batches. They differ only in how the
//! target is built:
//!
//! * mean-teacher (`feddf`): the elementwise mean of all clients' penultimate
//!   outputs;
//! * confidence (`confidence_distill`): per sample, the penultimate row of
//!   the client with the lowest entropy.
//!
//! Only the layers up to the penultimate one are updated; the output layer
//! keeps the averaged weights.
//!
//! Aggregation only ever sees models and public batches, never client data.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::confidence::{assemble_targets, select_teachers, EntropyMode};
use crate::error::{Error, Result};
use crate::nn::{
    apply_update, backward_from, flatten_params, forward_layers, penultimate_output, rmse_loss, unflatten_params,
    MlpModel, OptimizerState,
};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggregationKind {
    FedAvg,
    FedDf,
    ConfidenceDistill,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 3] = [
        AggregationKind::FedAvg,
        AggregationKind::FedDf,
        AggregationKind::ConfidenceDistill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationKind::FedAvg => "fedavg",
            AggregationKind::FedDf => "feddf",
            AggregationKind::ConfidenceDistill => "confidence_distill",
        }
    }

    pub fn distills(self) -> bool {
        !matches!(self, AggregationKind::FedAvg)
    }
}

impl fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationMethod {
    pub kind: AggregationKind,
    /// Distillation steps per round; `None` means one pass over the public batches.
    pub distill_steps: Option<usize>,
    pub distill_lr: f64,
    pub distill_batch: usize,
    pub entropy_mode: EntropyMode,
}

impl AggregationMethod {
    pub fn new(kind: AggregationKind) -> Self {
        Self {
            kind,
            distill_steps: None,
            distill_lr: 1e-4,
            distill_batch: 50,
            entropy_mode: EntropyMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.distills() {
            if self.distill_steps == Some(0) {
                return Err(Error::Config("distill_steps must be at least 1".into()));
            }
            if !(self.distill_lr > 0.0) || !self.distill_lr.is_finite() {
                return Err(Error::Config("distill_lr must be positive".into()));
            }
            if self.distill_batch == 0 {
                return Err(Error::Config("distill_batch must be at least 1".into()));
            }
            if !(self.entropy_mode.epsilon > 0.0) {
                return Err(Error::Config("entropy epsilon must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of distillation steps given how many public batches exist.
    pub fn steps_for(&self, n_batches: usize) -> usize {
        self.distill_steps.unwrap_or(n_batches)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistillReport {
    /// Post-step distillation loss, one per step.
    pub losses: Vec<f64>,
    /// Samples won by each client, summed over steps (all zero for mean-teacher).
    pub histogram: Vec<usize>,
}

/// Weighted parameter average. Weights must be non-negative and sum to 1.
pub fn fedavg_average(models: &[MlpModel], weights: &[f64]) -> Result<MlpModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("cannot average zero models".into()))?;
    if weights.len() != models.len() {
        return Err(Error::Config(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if let Some(k) = models.iter().position(|m| !m.same_architecture(first)) {
        return Err(Error::Config(format!("model {k} has a different architecture")));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("averaging weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("averaging weights sum to {total}, expected 1")));
    }
    // Anchored at the first model: p0 + Σ w_k (p_k - p0). Equal to Σ w_k p_k
    // when the weights sum to one, and exact when all models agree.
    let anchor = flatten_params(first).into_vec();
    let mut acc = anchor.clone();
    for (m, &w) in models.iter().zip(weights).skip(1) {
        for ((a, p), p0) in acc.iter_mut().zip(flatten_params(m).data()).zip(&anchor) {
            *a += w * (p - p0);
        }
    }
    unflatten_params(first.specs(), &acc)
}

/// Uniform `1/K` average.
pub fn uniform_average(models: &[MlpModel]) -> Result<MlpModel> {
    let w = vec![1.0 / models.len().max(1) as f64; models.len()];
    fedavg_average(models, &w)
}

/// One plain gradient step pulling the student's penultimate output on
/// `batch` toward `teacher_targets` under RMSE. Returns the loss after the
/// step.
pub fn distill_step(student: &mut MlpModel, teacher_targets: &Matrix, batch: &Matrix, lr: f64) -> Result<f64> {
    let depth = student.num_layers() - 1;
    let trace = forward_layers(student, batch, depth)?;
    let own = if depth == 0 {
        trace.input()
    } else {
        &trace.activations()[depth - 1]
    };
    if own.shape() != teacher_targets.shape() {
        return Err(Error::Shape(format!(
            "teacher targets {:?} vs student penultimate {:?}",
            teacher_targets.shape(),
            own.shape()
        )));
    }
    let (loss, grad) = rmse_loss(own, teacher_targets)?;
    if depth == 0 || lr == 0.0 || loss == 0.0 {
        return Ok(loss);
    }
    let grads = backward_from(student, &trace, depth - 1, &grad)?;
    apply_update(student, &grads, &mut OptimizerState::sgd(lr, 0.0))?;
    let after = penultimate_output(student, batch)?;
    Ok(rmse_loss(&after, teacher_targets)?.0)
}

fn client_penultimates(models: &[MlpModel], batch: &Matrix) -> Result<Vec<Matrix>> {
    models.par_iter().map(|m| penultimate_output(m, batch)).collect()
}

/// Elementwise mean, anchored at the first matrix so that identical inputs
/// give back that matrix exactly.
fn mean_of(mats: &[Matrix]) -> Result<Matrix> {
    let anchor = &mats[0];
    let inv = 1.0 / mats.len() as f64;
    let mut acc = anchor.clone();
    for m in &mats[1..] {
        acc = acc.add(&m.sub(anchor)?.scale(inv))?;
    }
    Ok(acc)
}

fn check_distill_inputs(
    local_models: &[MlpModel],
    public_batches: &[Matrix],
    method: &AggregationMethod,
) -> Result<()> {
    method.validate()?;
    if local_models.is_empty() {
        return Err(Error::Config("distillation needs at least one local model".into()));
    }
    if public_batches.is_empty() {
        return Err(Error::Config("distillation needs a non-empty public pool".into()));
    }
    Ok(())
}

/// Mean-teacher distillation adapted to regression: the target for each
/// sample is the mean of all clients' penultimate rows.
pub fn feddf_aggregate(
    local_models: &[MlpModel],
    public_batches: &[Matrix],
    method: &AggregationMethod,
) -> Result<(MlpModel, DistillReport)> {
    check_distill_inputs(local_models, public_batches, method)?;
    let mut student = uniform_average(local_models)?;
    let steps = method.steps_for(public_batches.len());
    let mut report = DistillReport {
        losses: Vec::with_capacity(steps),
        histogram: vec![0; local_models.len()],
    };
    for j in 0..steps {
        let batch = &public_batches[j % public_batches.len()];
        let targets = mean_of(&client_penultimates(local_models, batch)?)?;
        report
            .losses
            .push(distill_step(&mut student, &targets, batch, method.distill_lr)?);
    }
    Ok((student, report))
}

/// Confidence-based distillation: per sample, the lowest-entropy client's
/// penultimate row supervises the student.
pub fn confidence_distill_aggregate(
    local_models: &[MlpModel],
    public_batches: &[Matrix],
    method: &AggregationMethod,
) -> Result<(MlpModel, DistillReport)> {
    check_distill_inputs(local_models, public_batches, method)?;
    let mut student = uniform_average(local_models)?;
    let steps = method.steps_for(public_batches.len());
    let mut report = DistillReport {
        losses: Vec::with_capacity(steps),
        histogram: vec![0; local_models.len()],
    };
    for j in 0..steps {
        let batch = &public_batches[j % public_batches.len()];
        let pens = client_penultimates(local_models, batch)?;
        let selection = select_teachers(&pens, method.entropy_mode)?;
        let targets = assemble_targets(&pens, &selection)?;
        for (h, c) in report.histogram.iter_mut().zip(&selection.histogram) {
            *h += c;
        }
        report
            .losses
            .push(distill_step(&mut student, &targets, batch, method.distill_lr)?);
    }
    Ok((student, report))
}

/// Dispatches on `method.kind`. Averaging ignores the public batches and
/// returns no report.
pub fn aggregate(
    local_models: &[MlpModel],
    public_batches: &[Matrix],
    method: &AggregationMethod,
) -> Result<(MlpModel, Option<DistillReport>)> {
    match method.kind {
        AggregationKind::FedAvg => Ok((uniform_average(local_models)?, None)),
        AggregationKind::FedDf => feddf_aggregate(local_models, public_batches, method).map(|(m, r)| (m, Some(r))),
        AggregationKind::ConfidenceDistill => {
            confidence_distill_aggregate(local_models, public_batches, method).map(|(m, r)| (m, Some(r)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, mlp_specs, Activation, LayerSpec};
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn models(seed: u64, k: usize) -> Vec<MlpModel> {
        let mut rng = SeededRng::new(seed);
        (0..k)
            .map(|_| init_model(&mlp_specs(4, &[6, 5]), &mut rng).unwrap())
            .collect()
    }

    fn batches(seed: u64, n: usize) -> Vec<Matrix> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| rng.normal_matrix(8, 4, 0.0, 1.0)).collect()
    }

    fn method(kind: AggregationKind, lr: f64) -> AggregationMethod {
        AggregationMethod {
            distill_lr: lr,
            ..AggregationMethod::new(kind)
        }
    }

    fn max_abs_diff(a: &MlpModel, b: &MlpModel) -> f64 {
        flatten_params(a)
            .data()
            .iter()
            .zip(flatten_params(b).data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn average_of_identical_models() {
        let m = models(1, 1).remove(0);
        let avg = uniform_average(&vec![m.clone(); 5]).unwrap();
        assert!(max_abs_diff(&avg, &m) <= 1e-15);
    }

    #[test]
    fn midpoint_of_zeros_and_twos() {
        let specs = mlp_specs(3, &[2]);
        let n = 3 * 2 + 2 + 2 + 1;
        let zeros = unflatten_params(&specs, &vec![0.0; n]).unwrap();
        let twos = unflatten_params(&specs, &vec![2.0; n]).unwrap();
        let avg = fedavg_average(&[zeros, twos], &[0.5, 0.5]).unwrap();
        assert!(flatten_params(&avg).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn weighted_average_matches_scalar_loop() {
        let ms = models(2, 3);
        let w = [0.5, 0.3, 0.2];
        let avg = fedavg_average(&ms, &w).unwrap();
        let flats: Vec<Vec<f64>> = ms.iter().map(|m| flatten_params(m).into_vec()).collect();
        for (i, &got) in flatten_params(&avg).data().iter().enumerate() {
            let mut want = 0.0;
            for k in 0..3 {
                want += w[k] * flats[k][i];
            }
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn average_rejects_bad_inputs() {
        let ms = models(3, 2);
        assert!(matches!(fedavg_average(&ms, &[0.5, 0.6]), Err(Error::Config(_))));
        assert!(matches!(fedavg_average(&ms, &[1.5, -0.5]), Err(Error::Config(_))));
        let other = init_model(&mlp_specs(4, &[3]), &mut SeededRng::new(0)).unwrap();
        assert!(matches!(
            fedavg_average(&[ms[0].clone(), other], &[0.5, 0.5]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distill_toward_own_output_is_fixed_point() {
        let mut m = models(4, 1).remove(0);
        let before = m.clone();
        let b = &batches(5, 1)[0];
        let own = penultimate_output(&m, b).unwrap();
        let loss = distill_step(&mut m, &own, b, 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(m, before);
    }

    #[test]
    fn zero_lr_leaves_model_and_reports_pre_loss() {
        let ms = models(6, 2);
        let b = &batches(7, 1)[0];
        let target = penultimate_output(&ms[1], b).unwrap();
        let mut s = ms[0].clone();
        let pre = rmse_loss(&penultimate_output(&s, b).unwrap(), &target).unwrap().0;
        let loss = distill_step(&mut s, &target, b, 0.0).unwrap();
        assert_eq!(s, ms[0]);
        assert_eq!(loss, pre);
    }

    #[test]
    fn distill_step_leaves_output_layer_alone() {
        let ms = models(8, 2);
        let b = &batches(9, 1)[0];
        let target = penultimate_output(&ms[1], b).unwrap();
        let mut s = ms[0].clone();
        distill_step(&mut s, &target, b, 0.1).unwrap();
        let last = s.num_layers() - 1;
        assert_eq!(s.weights()[last], ms[0].weights()[last]);
        assert_eq!(s.biases()[last], ms[0].biases()[last]);
        assert_ne!(s.weights()[0], ms[0].weights()[0]);
    }

    #[test]
    fn distill_step_shape_mismatch() {
        let mut s = models(10, 1).remove(0);
        let b = &batches(11, 1)[0];
        assert!(matches!(
            distill_step(&mut s, &Matrix::zeros(8, 3), b, 0.1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn feddf_consensus_fixed_point() {
        let m = models(12, 1).remove(0);
        let locals = vec![m.clone(); 3];
        let (out, rep) = feddf_aggregate(&locals, &batches(13, 4), &method(AggregationKind::FedDf, 0.1)).unwrap();
        assert!(max_abs_diff(&out, &m) < 1e-12);
        assert_eq!(rep.losses.len(), 4);
        assert!(rep.losses.iter().all(|&l| l <= 1e-10));
    }

    #[test]
    fn feddf_target_is_rowwise_mean() {
        let ms = models(14, 2);
        let b = &batches(15, 1)[0];
        let pens = client_penultimates(&ms, b).unwrap();
        let mean = mean_of(&pens).unwrap();
        for r in 0..b.rows() {
            for c in 0..mean.cols() {
                let want = (pens[0].get(r, c) + pens[1].get(r, c)) / 2.0;
                assert!((mean.get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_client_methods_coincide() {
        let ms = models(16, 1);
        let bs = batches(17, 3);
        let (a, ra) = feddf_aggregate(&ms, &bs, &method(AggregationKind::FedDf, 0.1)).unwrap();
        let (b, rb) = confidence_distill_aggregate(&ms, &bs, &method(AggregationKind::ConfidenceDistill, 0.1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(rb.histogram, vec![3 * 8]);
    }

    #[test]
    fn dominant_client_wins_everything() {
        // Client 0's penultimate is a point mass on every sample (only one
        // unit can fire); client 1 spreads activation across units.
        let specs = vec![
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(3, 1, Activation::Identity),
        ];
        let c0 = MlpModel::from_parts(
            specs.clone(),
            vec![
                Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap(),
                Matrix::filled(3, 1, 1.0),
            ],
            vec![Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(), Matrix::zeros(1, 1)],
        )
        .unwrap();
        let c1 = MlpModel::from_parts(
            specs,
            vec![Matrix::zeros(2, 3), Matrix::filled(3, 1, 1.0)],
            vec![Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), Matrix::zeros(1, 1)],
        )
        .unwrap();
        let locals = [c0.clone(), c1];
        let mut rng = SeededRng::new(18);
        let bs: Vec<Matrix> = (0..2).map(|_| rng.normal_matrix(3, 2, 0.0, 1.0)).collect();
        let m = AggregationMethod {
            distill_steps: Some(2),
            ..method(AggregationKind::ConfidenceDistill, 0.1)
        };
        let pens: Vec<Matrix> = locals.iter().map(|l| penultimate_output(l, &bs[0]).unwrap()).collect();
        let sel = select_teachers(&pens, m.entropy_mode).unwrap();
        assert_eq!(assemble_targets(&pens, &sel).unwrap(), pens[0]);
        let (_, rep) = confidence_distill_aggregate(&locals, &bs, &m).unwrap();
        assert_eq!(rep.histogram, vec![6, 0]);
    }

    #[test]
    fn selection_matches_brute_force_oracle() {
        // 3 clients, 2 samples, 4-unit penultimate with hand-chosen activations.
        let pens = [
            Matrix::from_rows(&[vec![0.9, 0.1, 0.0, 0.0], vec![0.25, 0.25, 0.25, 0.25]]).unwrap(),
            Matrix::from_rows(&[vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 2.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0, 1.0, 1.0], vec![0.7, 0.2, 0.1, 0.0]]).unwrap(),
        ];
        let sel = select_teachers(&pens, EntropyMode::default()).unwrap();
        for r in 0..2 {
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, p) in pens.iter().enumerate() {
                let row = p.row(r);
                let s: f64 = row.iter().sum();
                let h = -row
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|v| v / s * (v / s).ln())
                    .sum::<f64>();
                if h < best.0 {
                    best = (h, k);
                }
            }
            assert_eq!(sel.chosen[r], best.1);
        }
        assert_eq!(sel.chosen, vec![0, 1]);
    }

    #[test]
    fn empty_public_pool_is_config_error() {
        let ms = models(19, 2);
        let r = confidence_distill_aggregate(&ms, &[], &method(AggregationKind::ConfidenceDistill, 0.1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn vanishing_lr_converges_to_average() {
        let ms = models(20, 3);
        let avg = uniform_average(&ms).unwrap();
        for kind in [AggregationKind::FedDf, AggregationKind::ConfidenceDistill] {
            let (out, _) = aggregate(&ms, &batches(21, 5), &method(kind, 1e-12)).unwrap();
            assert!(max_abs_diff(&out, &avg) < 1e-9);
        }
    }

    #[test]
    fn histogram_total_is_steps_times_batch() {
        let ms = models(22, 4);
        let m = AggregationMethod {
            distill_steps: Some(7),
            ..method(AggregationKind::ConfidenceDistill, 0.01)
        };
        let (_, rep) = confidence_distill_aggregate(&ms, &batches(23, 3), &m).unwrap();
        assert_eq!(rep.losses.len(), 7);
        assert_eq!(rep.histogram.iter().sum::<usize>(), 7 * 8);
    }

    #[test]
    fn aggregation_is_deterministic() {
        let ms = models(24, 3);
        let bs = batches(25, 3);
        let m = method(AggregationKind::ConfidenceDistill, 0.05);
        assert_eq!(aggregate(&ms, &bs, &m).unwrap(), aggregate(&ms, &bs, &m).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tiny_distill_step_descends(seed in any::<u64>()) {
            let ms = models(seed, 2);
            let b = &batches(seed ^ 0xabc, 1)[0];
            let target = penultimate_output(&ms[1], b).unwrap();
            let mut s = ms[0].clone();
            let depth = s.num_layers() - 1;
            let trace = forward_layers(&s, b, depth).unwrap();
            let (pre, grad) = rmse_loss(&trace.activations()[depth - 1], &target).unwrap();
            let g = backward_from(&s, &trace, depth - 1, &grad).unwrap();
            prop_assume!(g.norm() > 1e-8);
            let post = distill_step(&mut s, &target, b, 1e-6).unwrap();
            prop_assert!(post < pre);
        }

        #[test]
        fn average_is_permutation_invariant(seed in any::<u64>()) {
            let ms = models(seed, 3);
            let w = [0.2, 0.3, 0.5];
            let a = fedavg_average(&ms, &w).unwrap();
            let b = fedavg_average(&[ms[2].clone(), ms[0].clone(), ms[1].clone()], &[0.5, 0.2, 0.3]).unwrap();
            prop_assert!(max_abs_diff(&a, &b) < 1e-15);
        }
    }
}
