//! Round-based federated training.
//!
//! Each round: sample clients, let every sampled client copy the global
//! model and train locally, aggregate the returned models, and evaluate the
//! aggregated model on the test pool.
//!
//! All randomness is keyed by `(seed, round, client_id)` through
//! [`SeededRng::split`], so results do not depend on the order in which
//! clients execute or on the degree of parallelism.

use std::time::Instant;

use rayon::prelude::*;

use crate::aggregation::{aggregate, AggregationKind, AggregationMethod};
use crate::error::{Error, Result};
use crate::nn::{
    apply_update, backward, default_specs, forward, init_model, rmse_loss, validate_specs, LayerSpec, MlpModel,
    OptimizerKind, OptimizerState,
};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

/// How client random streams are keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClientStreams {
    /// One stream per `(client, round)`.
    #[default]
    PerClient,
    /// Every client uses the same stream in a round. Only useful for
    /// controlled-equality experiments.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    pub clients: usize,
    pub participation_fraction: f64,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub local_lr: f64,
    pub local_weight_decay: f64,
    pub local_optimizer: OptimizerKind,
    pub method: AggregationMethod,
    pub specs: Vec<LayerSpec>,
    pub seed: u64,
    pub eval_every: usize,
    pub client_streams: ClientStreams,
    /// Record wall-clock time per round. Off by default so that metrics are
    /// reproducible bit for bit.
    pub record_wall_time: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            clients: 5,
            participation_fraction: 1.0,
            local_epochs: 5,
            local_batch: 64,
            local_lr: 1e-4,
            local_weight_decay: 1e-5,
            local_optimizer: OptimizerKind::adam_default(),
            method: AggregationMethod::new(AggregationKind::ConfidenceDistill),
            specs: default_specs(),
            seed: 0,
            eval_every: 1,
            client_streams: ClientStreams::PerClient,
            record_wall_time: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("clients", self.clients),
            ("local_epochs", self.local_epochs),
            ("local_batch", self.local_batch),
            ("eval_every", self.eval_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "participation_fraction must be in (0, 1], got {}",
                self.participation_fraction
            )));
        }
        if !(self.local_lr >= 0.0) || !(self.local_weight_decay >= 0.0) {
            return Err(Error::Config(
                "local_lr and local_weight_decay must be non-negative".into(),
            ));
        }
        validate_specs(&self.specs)?;
        self.method.validate()
    }

    fn local_optimizer(&self) -> OptimizerState {
        OptimizerState::new(self.local_optimizer, self.local_lr, self.local_weight_decay)
    }
}

/// One client's private labeled data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl ClientData {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() || targets.cols() != 1 {
            return Err(Error::Shape(format!(
                "client inputs {:?} and targets {:?} do not pair up",
                inputs.shape(),
                targets.shape()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a federation run needs: private client data plus the shared
/// unlabeled public pool and the labeled test pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub clients: Vec<ClientData>,
    pub public: Matrix,
    pub test_inputs: Matrix,
    pub test_targets: Matrix,
}

/// A client between rounds: its data, and the model and optimizer it trains
/// with during a round.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub data: ClientData,
    pub model: MlpModel,
    pub optimizer: OptimizerState,
}

impl ClientState {
    pub fn new(client_id: usize, data: ClientData, global: &MlpModel, cfg: &FedConfig) -> Self {
        Self {
            client_id,
            data,
            model: global.clone(),
            optimizer: cfg.local_optimizer(),
        }
    }
}

/// Copies the global model into the client, resets its optimizer, and runs
/// `local_epochs` epochs of shuffled mini-batch training on RMSE. The last
/// mini-batch of an epoch may be smaller than `local_batch`.
///
/// Returns the mean mini-batch loss of the final epoch.
pub fn client_update(state: &mut ClientState, global: &MlpModel, cfg: &FedConfig, rng: &mut SeededRng) -> Result<f64> {
    if state.data.is_empty() {
        return Err(Error::Config(format!("client {} has no private data", state.client_id)));
    }
    if !global.same_architecture(&state.model) {
        return Err(Error::Config(format!(
            "global model architecture differs from client {}",
            state.client_id
        )));
    }
    state.model = global.clone();
    state.optimizer = cfg.local_optimizer();
    let n = state.data.len();
    let mut last_epoch_loss = 0.0;
    for _ in 0..cfg.local_epochs {
        let order = rng.permutation(n);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.local_batch) {
            let x = state.data.inputs.select_rows(chunk)?;
            let y = state.data.targets.select_rows(chunk)?;
            let trace = forward(&state.model, &x)?;
            let (loss, dl) = rmse_loss(trace.output(), &y)?;
            let grads = backward(&state.model, &trace, &dl)?;
            apply_update(&mut state.model, &grads, &mut state.optimizer)?;
            total += loss;
            batches += 1;
        }
        last_epoch_loss = total / batches as f64;
    }
    Ok(last_epoch_loss)
}

/// `ceil(fraction * k)` distinct client indices, sorted ascending.
pub fn sample_clients(k: usize, fraction: f64, rng: &mut SeededRng) -> Vec<usize> {
    let m = ((fraction * k as f64) - 1e-9).ceil().clamp(1.0, k as f64) as usize;
    if m == k {
        return (0..k).collect();
    }
    let mut chosen = rng.permutation(k);
    chosen.truncate(m);
    chosen.sort_unstable();
    chosen
}

/// Test-pool RMSE of the model's scalar predictions.
pub fn evaluate(model: &MlpModel, test_inputs: &Matrix, test_targets: &Matrix) -> Result<f64> {
    if test_inputs.rows() == 0 || test_targets.rows() == 0 {
        return Err(Error::Config("empty test pool".into()));
    }
    let pred = model.predict(test_inputs)?;
    Ok(rmse_loss(&pred, test_targets)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub method: AggregationKind,
    pub seed: u64,
    pub test_rmse: f64,
    /// Final-epoch mean training loss of each sampled client, by client id.
    pub client_losses: Vec<f64>,
    /// Samples won per client during distillation (empty for averaging).
    pub teacher_histogram: Vec<usize>,
    pub wall_ms: u64,
}

/// Result of one round before evaluation.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub global: MlpModel,
    pub sampled: Vec<usize>,
    pub client_losses: Vec<f64>,
    pub teacher_histogram: Vec<usize>,
}

fn client_rng(root: &SeededRng, cfg: &FedConfig, client: usize, round: usize) -> SeededRng {
    match cfg.client_streams {
        ClientStreams::PerClient => root.split(&format!("client/{client}/round/{round}")),
        ClientStreams::Shared => root.split(&format!("client/shared/round/{round}")),
    }
}

/// Splits the public pool into batches of `batch` rows after a seeded shuffle.
pub fn public_batches(public: &Matrix, batch: usize, rng: &mut SeededRng) -> Result<Vec<Matrix>> {
    let order = rng.permutation(public.rows());
    order.chunks(batch.max(1)).map(|c| public.select_rows(c)).collect()
}

/// Runs one communication round.
///
/// `execution_order`, when given, forces clients to train sequentially in
/// that order; otherwise they train in parallel. The outcome is identical
/// either way.
pub fn run_round(
    global: &MlpModel,
    states: &mut [ClientState],
    public: &Matrix,
    cfg: &FedConfig,
    round: usize,
    execution_order: Option<&[usize]>,
) -> Result<RoundOutcome> {
    let root = SeededRng::new(cfg.seed);
    let sampled = sample_clients(
        states.len(),
        cfg.participation_fraction,
        &mut root.split(&format!("round/{round}/sample")),
    );

    let train = |state: &mut ClientState| -> Result<f64> {
        let mut rng = client_rng(&root, cfg, state.client_id, round);
        client_update(state, global, cfg, &mut rng)
    };

    let mut losses = vec![f64::NAN; states.len()];
    match execution_order {
        Some(order) => {
            for &k in order.iter().filter(|k| sampled.contains(k)) {
                losses[k] = train(&mut states[k])?;
            }
        }
        None => {
            let results: Vec<(usize, Result<f64>)> = states
                .par_iter_mut()
                .filter(|s| sampled.contains(&s.client_id))
                .map(|s| (s.client_id, train(s)))
                .collect();
            for (k, r) in results {
                losses[k] = r?;
            }
        }
    }

    let locals: Vec<MlpModel> = sampled.iter().map(|&k| states[k].model.clone()).collect();
    let batches = if cfg.method.kind.distills() {
        public_batches(
            public,
            cfg.method.distill_batch,
            &mut root.split(&format!("round/{round}/public")),
        )?
    } else {
        Vec::new()
    };
    let (new_global, report) = aggregate(&locals, &batches, &cfg.method)?;
    Ok(RoundOutcome {
        global: new_global,
        client_losses: sampled.iter().map(|&k| losses[k]).collect(),
        sampled,
        teacher_histogram: report.map(|r| r.histogram).unwrap_or_default(),
    })
}

fn is_eval_round(round: usize, cfg: &FedConfig) -> bool {
    round.is_multiple_of(cfg.eval_every) || round == cfg.rounds
}

/// Runs `cfg.rounds` rounds from a seeded initial model and returns the
/// final global model with one metrics record per evaluated round.
pub fn run_federation(data: &FederatedData, cfg: &FedConfig) -> Result<(MlpModel, Vec<RoundMetrics>)> {
    let init = init_model(&cfg.specs, &mut SeededRng::new(cfg.seed).split("init"))?;
    run_federation_from(data, cfg, init)
}

/// As [`run_federation`] but starting from a given global model.
pub fn run_federation_from(
    data: &FederatedData,
    cfg: &FedConfig,
    init: MlpModel,
) -> Result<(MlpModel, Vec<RoundMetrics>)> {
    cfg.validate()?;
    if data.clients.len() != cfg.clients {
        return Err(Error::Config(format!(
            "config expects {} clients, data has {}",
            cfg.clients,
            data.clients.len()
        )));
    }
    if let Some(k) = data.clients.iter().position(ClientData::is_empty) {
        return Err(Error::Config(format!("client {k} has no private data")));
    }
    let mut global = init;
    let mut states: Vec<ClientState> = data
        .clients
        .iter()
        .enumerate()
        .map(|(k, d)| ClientState::new(k, d.clone(), &global, cfg))
        .collect();
    let mut metrics = Vec::new();
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let outcome = run_round(&global, &mut states, &data.public, cfg, round, None)?;
        global = outcome.global;
        if is_eval_round(round, cfg) {
            let test_rmse = evaluate(&global, &data.test_inputs, &data.test_targets)?;
            if !test_rmse.is_finite() {
                return Err(Error::Numeric(format!("test RMSE is {test_rmse} after round {round}")));
            }
            metrics.push(RoundMetrics {
                round,
                method: cfg.method.kind,
                seed: cfg.seed,
                test_rmse,
                client_losses: outcome.client_losses,
                teacher_histogram: outcome.teacher_histogram,
                wall_ms: if cfg.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
        }
    }
    Ok((global, metrics))
}
