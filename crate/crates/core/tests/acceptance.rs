//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (bypassing output capture) and then asserts its criterion.
//!
//! Tests take a shared lock so that the runtime limits are measured without
//! competing work.

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use fedconf::aggregation::{
    aggregate, confidence_distill_aggregate, feddf_aggregate, uniform_average, AggregationKind, AggregationMethod,
};
use fedconf::confidence::{entropy, select_teachers, selection_from_entropies, EntropyMode};
use fedconf::datagen::{generate_default, partition, GeneratorConfig, PartitionMode};
use fedconf::experiment::{self, results, ExperimentConfig, SummaryEntry};
use fedconf::federation::{public_batches, run_round, ClientState};
use fedconf::nn::{
    backward, flatten_params, forward, grad_check, init_model, mlp_specs, mse_loss, penultimate_output,
    unflatten_params, Activation, LayerSpec, MlpModel,
};
use fedconf::rng::SeededRng;
use fedconf::tensor::Matrix;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} - {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_gradient_correctness() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    let trials = 24;
    for _ in 0..trials {
        let input = 1 + rng.below(5);
        let depth = rng.below(4);
        let hidden: Vec<usize> = (0..depth).map(|_| 2 + rng.below(6)).collect();
        // Random weights and biases: zero-initialized biases put relu units
        // exactly on their kink whenever a whole input row is inactive.
        let specs = mlp_specs(input, &hidden);
        let p = init_model(&specs, &mut rng).unwrap().param_count();
        let flat = rng.normal_matrix(1, p, 0.0, 0.7);
        let model = unflatten_params(&specs, flat.data()).unwrap();
        let n = 3 + rng.below(6);
        let x = rng.normal_matrix(n, input, 0.0, 1.0);
        let y = rng.normal_matrix(n, 1, 0.0, 1.0);
        worst = worst.max(grad_check(&model, &x, &y).unwrap());
    }

    // Linear model y = x w + b under MSE: dL/dw = 2/N xᵀ(p - y), dL/db = 2/N Σ(p - y).
    let (n, d) = (7, 4);
    let lin = init_model(&[LayerSpec::new(d, 1, Activation::Identity)], &mut rng).unwrap();
    let x = rng.normal_matrix(n, d, 0.0, 1.0);
    let y = rng.normal_matrix(n, 1, 0.0, 1.0);
    let w = lin.weights()[0].data().to_vec();
    let b = lin.biases()[0].get(0, 0);
    let resid: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|j| x.get(i, j) * w[j]).sum::<f64>() + b - y.get(i, 0))
        .collect();
    let mut closed: Vec<f64> = (0..d)
        .map(|j| 2.0 / n as f64 * (0..n).map(|i| x.get(i, j) * resid[i]).sum::<f64>())
        .collect();
    closed.push(2.0 / n as f64 * resid.iter().sum::<f64>());
    let trace = forward(&lin, &x).unwrap();
    let (_, dl) = mse_loss(trace.output(), &y).unwrap();
    let analytic = backward(&lin, &trace, &dl).unwrap().flatten();
    let linear_err = max_abs_diff(&analytic, &closed);

    let elapsed = started.elapsed();
    let ok = worst < 1e-4 && linear_err < 1e-7 && elapsed < Duration::from_secs(30);
    report(
        1,
        ok,
        &format!(
            "max grad_check error {worst:.2e} over {trials} MLPs (< 1e-4), linear closed-form error {linear_err:.2e} (< 1e-7), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

fn divergence() -> &'static (experiment::DivergenceReport, Duration) {
    static CELL: OnceLock<(experiment::DivergenceReport, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let cfg = ExperimentConfig::default();
        let data = generate_default(&cfg.generator, cfg.seed).unwrap();
        let report = experiment::validate_entropy(&data, &cfg).unwrap();
        (report, started.elapsed())
    })
}

#[test]
fn criterion_2_loss_matrix_diagonal() {
    let _g = serial();
    let (rep, elapsed) = divergence();
    let hits = rep.diagonal_minimal().iter().filter(|&&b| b).count();
    let ok = hits == 5 && *elapsed < Duration::from_secs(300);
    report(
        2,
        ok,
        &format!(
            "{hits}/5 loss columns diagonal-minimal (need 5/5), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok, "{}", rep.summary_text());
}

#[test]
fn criterion_3_entropy_tracks_loss() {
    let _g = serial();
    let (rep, elapsed) = divergence();
    let hits = rep.entropy_matches(false).iter().filter(|&&b| b).count();
    let raw = rep.entropy_matches(true).iter().filter(|&&b| b).count();
    let ok = hits >= 4 && *elapsed < Duration::from_secs(300);
    report(
        3,
        ok,
        &format!("normalized entropy argmin matches loss argmin in {hits}/5 columns (need >= 4; raw mode {raw}/5)"),
    );
    assert!(ok, "{}", rep.summary_text());
}

/// Default configuration (5 seeds, 100 rounds, both modes); only the final
/// round is evaluated since nothing else is scored.
fn comparison() -> &'static (Vec<SummaryEntry>, usize, Duration) {
    static CELL: OnceLock<(Vec<SummaryEntry>, usize, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let mut cfg = ExperimentConfig::default();
        cfg.fed.eval_every = cfg.fed.rounds;
        let data = generate_default(&cfg.generator, cfg.seed).unwrap();
        let out = experiment::compare(&data, &cfg).unwrap();
        (out.summary, cfg.fed.rounds, started.elapsed())
    })
}

fn mean_of(summary: &[SummaryEntry], method: &str, mode: &str) -> f64 {
    summary
        .iter()
        .find(|e| e.method == method && e.mode == mode)
        .unwrap()
        .mean_final_rmse
}

#[test]
fn criterion_4_non_iid_ordering() {
    let _g = serial();
    let (summary, rounds, elapsed) = comparison();
    let seeds = summary[0].seeds;
    let (avg, df, conf) = (
        mean_of(summary, "fedavg", "non_iid"),
        mean_of(summary, "feddf", "non_iid"),
        mean_of(summary, "confidence_distill", "non_iid"),
    );
    let ok = seeds >= 5 && *rounds >= 50 && conf < avg && conf < df && *elapsed < Duration::from_secs(1800);
    report(
        4,
        ok,
        &format!(
            "non-iid mean final RMSE over {seeds} seeds, {rounds} rounds: confidence_distill {conf:.6}, fedavg {avg:.6} ({:+.2}%), feddf {df:.6} ({:+.2}%), {:.0}s",
            100.0 * (avg - conf) / avg,
            100.0 * (df - conf) / df,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok, "{}", results::summary_to_text(summary));
}

#[test]
fn criterion_5_iid_parity() {
    let _g = serial();
    let (summary, _, _) = comparison();
    let means: Vec<(&str, f64)> = ["fedavg", "feddf", "confidence_distill"]
        .iter()
        .map(|m| (*m, mean_of(summary, m, "iid")))
        .collect();
    let best = means.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let worst_gap = means.iter().map(|(_, v)| (v - best) / best).fold(0.0, f64::max);
    let ok = worst_gap <= 0.10;
    let listed: Vec<String> = means.iter().map(|(m, v)| format!("{m} {v:.6}")).collect();
    report(
        5,
        ok,
        &format!(
            "iid means {} ; largest gap to best {:.2}% (need <= 10%)",
            listed.join(", "),
            100.0 * worst_gap
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_algebraic_invariants() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = SeededRng::new(66);
    let specs = mlp_specs(5, &[8, 6]);
    let mut failures: Vec<&str> = Vec::new();

    // fedavg of K identical models is that model.
    let m = init_model(&specs, &mut rng).unwrap();
    let avg = uniform_average(&vec![m.clone(); 4]).unwrap();
    if max_abs_diff(flatten_params(&avg).data(), flatten_params(&m).data()) > 1e-15 {
        failures.push("fedavg fixed point");
    }

    // K = 1: both distillation methods coincide.
    let public = rng.normal_matrix(60, 5, 0.0, 1.0);
    let batches = public_batches(&public, 16, &mut rng.split("batches")).unwrap();
    let method = |kind| AggregationMethod {
        distill_lr: 0.01,
        ..AggregationMethod::new(kind)
    };
    let solo = vec![init_model(&specs, &mut rng).unwrap()];
    let (a, _) = feddf_aggregate(&solo, &batches, &method(AggregationKind::FedDf)).unwrap();
    let (b, _) = confidence_distill_aggregate(&solo, &batches, &method(AggregationKind::ConfidenceDistill)).unwrap();
    if a != b {
        failures.push("K=1 equivalence");
    }

    // eta -> 0: distillation stays at the average.
    let locals: Vec<MlpModel> = (0..3).map(|_| init_model(&specs, &mut rng).unwrap()).collect();
    let base = uniform_average(&locals).unwrap();
    for kind in [AggregationKind::FedDf, AggregationKind::ConfidenceDistill] {
        let tiny = AggregationMethod {
            distill_lr: 1e-12,
            ..AggregationMethod::new(kind)
        };
        let (out, _) = aggregate(&locals, &batches, &tiny).unwrap();
        if max_abs_diff(flatten_params(&out).data(), flatten_params(&base).data()) >= 1e-9 {
            failures.push("eta -> 0 convergence");
        }
    }

    // Entropy scale invariance.
    let pen = penultimate_output(&locals[0], &public).unwrap();
    let mut scale_err = 0.0f64;
    for r in 0..pen.rows() {
        let row = pen.row(r);
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let h = entropy(row, EntropyMode::default()).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = row.iter().map(|v| v * c).collect();
            scale_err = scale_err.max((entropy(&scaled, EntropyMode::default()).unwrap() - h).abs());
        }
    }
    if scale_err > 1e-12 {
        failures.push("entropy scale invariance");
    }

    // Ties go to the lowest client index, every time.
    let tied = Matrix::from_rows(&[vec![0.3, 0.3, 0.9], vec![f64::INFINITY; 3], vec![0.7, 0.2, 0.2]]).unwrap();
    let first = selection_from_entropies(tied.clone()).unwrap();
    let again = selection_from_entropies(tied).unwrap();
    if first.chosen != vec![0, 0, 1] || first != again {
        failures.push("tie-break determinism");
    }
    let same = vec![pen.clone(), pen.clone()];
    if select_teachers(&same, EntropyMode::default()).unwrap().histogram != vec![pen.rows(), 0] {
        failures.push("tie-break determinism (identical clients)");
    }

    // flatten / unflatten round trip.
    for m in &locals {
        if &unflatten_params(m.specs(), flatten_params(m).data()).unwrap() != m {
            failures.push("flatten round trip");
        }
    }

    let elapsed = started.elapsed();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(60);
    let detail = if failures.is_empty() {
        format!("all invariants hold, {:.2}s", elapsed.as_secs_f64())
    } else {
        format!("violated: {}", failures.join(", "))
    };
    report(6, ok, &detail);
    assert!(ok);
}

#[test]
fn criterion_7_determinism() {
    let _g = serial();
    let text = "rounds = 3\nseeds = 0,1\nsamples_per_trip = 150\nlocal_epochs = 2\n";
    let mut cfg = ExperimentConfig::from_text(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        cfg.out_dir = dir.path().join(run);
        experiment::cmd_compare(&cfg, None).unwrap();
        outputs.push(std::fs::read(cfg.out_dir.join("metrics.csv")).unwrap());
    }
    let csv_identical = outputs[0] == outputs[1] && !outputs[0].is_empty();

    let data = generate_default(
        &GeneratorConfig {
            samples_per_trip: 150,
            ..GeneratorConfig::default()
        },
        3,
    )
    .unwrap();
    let part = partition(&data, PartitionMode::NonIid, 5, &mut SeededRng::new(3)).unwrap();
    let mut order_identical = true;
    for kind in AggregationKind::ALL {
        let mut fc = cfg.fed_config(kind, 9);
        fc.local_epochs = 1;
        let init = init_model(&fc.specs, &mut SeededRng::new(9).split("init")).unwrap();
        let round1 = |order: Option<&[usize]>| {
            let mut states: Vec<ClientState> = part
                .data
                .clients
                .iter()
                .enumerate()
                .map(|(k, d)| ClientState::new(k, d.clone(), &init, &fc))
                .collect();
            run_round(&init, &mut states, &part.data.public, &fc, 1, order)
                .unwrap()
                .global
        };
        let forward_order = flatten_params(&round1(Some(&[0, 1, 2, 3, 4]))).into_vec();
        for order in [Some(&[4usize, 3, 2, 1, 0][..]), Some(&[2, 0, 4, 1, 3][..]), None] {
            let other = flatten_params(&round1(order)).into_vec();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            order_identical &= bits(&other) == bits(&forward_order);
        }
    }

    let ok = csv_identical && order_identical;
    report(
        7,
        ok,
        &format!(
            "compare metrics CSVs byte-identical: {csv_identical}; round-1 parameters bit-identical under client order permutation: {order_identical}"
        ),
    );
    assert!(ok);
}
