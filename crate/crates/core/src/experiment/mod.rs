//! Experiment commands behind the `fedconf` binary.
//!
//! Each `cmd_*` function writes its outputs into `cfg.out_dir` (created if
//! needed) together with the resolved configuration as `config.txt`. All
//! files are written atomically.
//!
//! | command | files |
//! |---|---|
//! | [`cmd_gen_data`] | `dataset.csv`, `manifest.txt` |
//! | [`cmd_validate_entropy`] | `loss_matrix.csv`, `entropy_matrix.csv`, `entropy_matrix_raw.csv`, `validate_summary.txt` |
//! | [`cmd_compare`] | `metrics.csv`, `summary.csv`, `summary.txt` |
//! | [`cmd_plotdata`] | `curve_<method>_<mode>.csv` per group |

pub mod config;
pub mod results;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::ExperimentConfig;
pub use results::{MetricRow, PlotSeries, SummaryEntry};

use crate::aggregation::AggregationKind;
use crate::confidence::{row_entropies, EntropyMode};
use crate::datagen::{
    generate_default, largest_remainder, load_dataset, partition, save_dataset, write_atomic, Dataset, PartitionMode,
    Sample,
};
use crate::error::{Error, Result};
use crate::federation::{client_update, evaluate, run_federation, ClientData, ClientState};
use crate::nn::{init_model, penultimate_output, MlpModel};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(dir)
}

/// Loads `path`, or generates the dataset described by the config when no
/// path is given.
pub fn resolve_dataset(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => load_dataset(p),
        None => generate_default(&cfg.generator, cfg.seed),
    }
}

pub fn manifest_text(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<String> {
    let g = &cfg.generator;
    let f = g.target_function(&SeededRng::new(cfg.seed));
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut out = String::from("# fedconf dataset manifest\n");
    let _ = writeln!(out, "seed = {}", cfg.seed);
    let _ = writeln!(out, "samples = {}", dataset.samples.len());
    let _ = writeln!(out, "input_dim = {}", dataset.input_dim);
    let _ = writeln!(out, "trips = {}", g.trips);
    let _ = writeln!(out, "target = {} * sin(w . x)", f.scale);
    let _ = writeln!(out, "target_projection = {}", join(&f.projection));
    for t in g.trip_specs()? {
        use crate::datagen::Split::*;
        let _ = writeln!(
            out,
            "trip {}: mean={} stddev={} samples={} noise={} train={} test={} public={}",
            t.trip_id,
            join(&t.cluster_mean),
            t.cluster_stddev,
            t.n_samples,
            t.noise_stddev,
            dataset.count(t.trip_id, Train),
            dataset.count(t.trip_id, Test),
            dataset.count(t.trip_id, Public),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub samples: usize,
}

/// Generates the configured dataset with `cfg.seed`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenDataOutput> {
    let dataset = generate_default(&cfg.generator, cfg.seed)?;
    let dir = prepare_out_dir(cfg)?;
    let out = GenDataOutput {
        dataset: dir.join("dataset.csv"),
        manifest: dir.join("manifest.txt"),
        samples: dataset.samples.len(),
    };
    save_dataset(&dataset, &out.dataset)?;
    write_atomic(&out.manifest, &manifest_text(cfg, &dataset)?)?;
    Ok(out)
}

/// Loss and entropy matrices of per-trip models, indexed `[model][public]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub trips: Vec<usize>,
    /// RMSE of model `i` on trip `j`'s public rows.
    pub loss: Vec<Vec<f64>>,
    /// Mean normalized entropy over rows with finite entropy.
    pub entropy: Vec<Vec<f64>>,
    pub entropy_raw: Vec<Vec<f64>>,
    /// Rows excluded from each entropy mean because their entropy is `+inf`.
    pub excluded: Vec<Vec<usize>>,
    pub excluded_raw: Vec<Vec<usize>>,
}

fn argmin_col(m: &[Vec<f64>], j: usize) -> usize {
    let col: Vec<f64> = m.iter().map(|r| r[j]).collect();
    crate::confidence::argmin_lowest_index(&col)
}

impl DivergenceReport {
    /// Columns whose minimum lies on the diagonal.
    pub fn diagonal_minimal(&self) -> Vec<bool> {
        (0..self.trips.len()).map(|j| argmin_col(&self.loss, j) == j).collect()
    }

    /// Columns where the entropy argmin equals the loss argmin.
    pub fn entropy_matches(&self, raw: bool) -> Vec<bool> {
        let h = if raw { &self.entropy_raw } else { &self.entropy };
        (0..self.trips.len())
            .map(|j| argmin_col(h, j) == argmin_col(&self.loss, j))
            .collect()
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let (h1, h2, h2r) = (
            self.diagonal_minimal(),
            self.entropy_matches(false),
            self.entropy_matches(true),
        );
        let yn = |b: bool| if b { "yes" } else { "no" };
        let _ = writeln!(
            out,
            "column     loss_argmin  diagonal_min  entropy_argmin  match  raw_entropy_argmin  raw_match  excluded  excluded_raw"
        );
        for j in 0..self.trips.len() {
            let ex: usize = self.excluded.iter().map(|r| r[j]).sum();
            let exr: usize = self.excluded_raw.iter().map(|r| r[j]).sum();
            let _ = writeln!(
                out,
                "Public_{j:<3} Model_{:<6} {:<13} Model_{:<9} {:<6} Model_{:<13} {:<10} {:<9} {}",
                argmin_col(&self.loss, j),
                yn(h1[j]),
                argmin_col(&self.entropy, j),
                yn(h2[j]),
                argmin_col(&self.entropy_raw, j),
                yn(h2r[j]),
                ex,
                exr,
            );
        }
        let count = |v: &[bool]| v.iter().filter(|&&b| b).count();
        let n = self.trips.len();
        let _ = writeln!(out, "diagonal-minimal loss columns: {}/{n}", count(&h1));
        let _ = writeln!(out, "entropy argmin == loss argmin (normalized): {}/{n}", count(&h2));
        let _ = writeln!(out, "entropy argmin == loss argmin (raw): {}/{n}", count(&h2r));
        out
    }
}

struct TripSplit {
    private: ClientData,
    public_x: Matrix,
    public_y: Matrix,
}

fn stack(samples: &[&Sample], dim: usize) -> Result<(Matrix, Matrix)> {
    let x: Vec<f64> = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
    let y: Vec<f64> = samples
        .iter()
        .map(|s| {
            s.target
                .ok_or_else(|| Error::Internal(format!("sample {} has no label", s.id)))
        })
        .collect::<Result<_>>()?;
    Ok((
        Matrix::from_vec(samples.len(), dim, x)?,
        Matrix::from_vec(samples.len(), 1, y)?,
    ))
}

/// 90/10 private/public split of a trip's labeled rows.
fn split_trip(dataset: &Dataset, trip: usize, rng: &mut SeededRng) -> Result<TripSplit> {
    let labeled: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.trip_id == trip && s.target.is_some())
        .collect();
    let counts = largest_remainder(labeled.len(), &[9, 1])?;
    if counts.contains(&0) {
        return Err(Error::Config(format!(
            "trip {trip} has {} labeled samples, too few for a 90/10 split",
            labeled.len()
        )));
    }
    let order = rng.permutation(labeled.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| labeled[i]).collect::<Vec<_>>();
    let (px, py) = stack(&pick(&order[..counts[0]]), dataset.input_dim)?;
    let (public_x, public_y) = stack(&pick(&order[counts[0]..]), dataset.input_dim)?;
    Ok(TripSplit {
        private: ClientData::new(px, py)?,
        public_x,
        public_y,
    })
}

fn mean_finite(values: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = values.len() - finite.len();
    if finite.is_empty() {
        return (f64::INFINITY, excluded);
    }
    (finite.iter().sum::<f64>() / finite.len() as f64, excluded)
}

/// Trains one model per trip on 90% of its labeled rows, from a shared
/// initialization, and scores every model on every trip's held-out 10%.
pub fn validate_entropy(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<DivergenceReport> {
    let trips = dataset.trip_ids();
    if trips.len() < 2 {
        return Err(Error::Config(format!(
            "divergence validation needs at least 2 trips, dataset has {}",
            trips.len()
        )));
    }
    let mut fc = cfg.fed_config(AggregationKind::FedAvg, cfg.seed);
    fc.specs = crate::nn::mlp_specs(dataset.input_dim, &cfg.hidden);
    fc.local_epochs = cfg.validate_epochs;
    fc.local_lr = cfg.validate_lr;
    let root = SeededRng::new(cfg.seed);
    let splits: Vec<TripSplit> = trips
        .iter()
        .map(|&t| split_trip(dataset, t, &mut root.split(&format!("validate/split/{t}"))))
        .collect::<Result<_>>()?;
    let init = init_model(&fc.specs, &mut root.split("validate/init"))?;
    let models: Vec<MlpModel> = splits
        .par_iter()
        .zip(trips.par_iter())
        .map(|(s, &t)| {
            let mut state = ClientState::new(t, s.private.clone(), &init, &fc);
            client_update(&mut state, &init, &fc, &mut root.split(&format!("validate/train/{t}")))?;
            Ok(state.model)
        })
        .collect::<Result<_>>()?;

    let n = trips.len();
    let mut report = DivergenceReport {
        trips: trips.clone(),
        loss: vec![vec![0.0; n]; n],
        entropy: vec![vec![0.0; n]; n],
        entropy_raw: vec![vec![0.0; n]; n],
        excluded: vec![vec![0; n]; n],
        excluded_raw: vec![vec![0; n]; n],
    };
    let normalized = EntropyMode {
        normalize: true,
        ..cfg.fed.method.entropy_mode
    };
    let raw = EntropyMode {
        normalize: false,
        ..normalized
    };
    for (i, model) in models.iter().enumerate() {
        for (j, s) in splits.iter().enumerate() {
            report.loss[i][j] = evaluate(model, &s.public_x, &s.public_y)?;
            let pen = penultimate_output(model, &s.public_x)?;
            (report.entropy[i][j], report.excluded[i][j]) = mean_finite(&row_entropies(&pen, normalized)?);
            (report.entropy_raw[i][j], report.excluded_raw[i][j]) = mean_finite(&row_entropies(&pen, raw)?);
        }
    }
    Ok(report)
}

/// Runs [`validate_entropy`] and writes the matrices and summary.
pub fn cmd_validate_entropy(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<DivergenceReport> {
    let dataset = resolve_dataset(cfg, data)?;
    let report = validate_entropy(&dataset, cfg)?;
    let dir = prepare_out_dir(cfg)?;
    write_atomic(&dir.join("loss_matrix.csv"), &results::grid_to_csv(&report.loss))?;
    write_atomic(&dir.join("entropy_matrix.csv"), &results::grid_to_csv(&report.entropy))?;
    write_atomic(
        &dir.join("entropy_matrix_raw.csv"),
        &results::grid_to_csv(&report.entropy_raw),
    )?;
    write_atomic(&dir.join("validate_summary.txt"), &report.summary_text())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutput {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryEntry>,
}

/// One federation run per (mode, method, seed). Runs are independent and
/// execute in parallel; rows come back in that nesting order. All methods
/// of a (mode, seed) pair see the same client partition.
pub fn compare(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<CompareOutput> {
    let mut runs: Vec<(PartitionMode, AggregationKind, u64)> = Vec::new();
    for &mode in &cfg.modes {
        for &kind in &cfg.methods {
            for &seed in &cfg.seeds {
                runs.push((mode, kind, seed));
            }
        }
    }
    let per_run: Vec<Vec<MetricRow>> = runs
        .par_iter()
        .map(|&(mode, kind, seed)| {
            let mut fc = cfg.fed_config(kind, seed);
            fc.specs = crate::nn::mlp_specs(dataset.input_dim, &cfg.hidden);
            let part = partition(dataset, mode, fc.clients, &mut SeededRng::new(seed).split("partition"))?;
            let (_, metrics) = run_federation(&part.data, &fc)?;
            let label = results::run_label(kind.name(), mode.name());
            Ok(metrics
                .into_iter()
                .map(|m| MetricRow {
                    round: m.round,
                    method: label.clone(),
                    seed,
                    test_rmse: m.test_rmse,
                    wall_ms: m.wall_ms,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MetricRow> = per_run.into_iter().flatten().collect();
    let summary = results::summarize(&rows);
    Ok(CompareOutput { rows, summary })
}

/// Runs [`compare`] and writes `metrics.csv`, `summary.csv` and `summary.txt`.
pub fn cmd_compare(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<CompareOutput> {
    let dataset = resolve_dataset(cfg, data)?;
    let out = compare(&dataset, cfg)?;
    let dir = prepare_out_dir(cfg)?;
    write_atomic(&dir.join("metrics.csv"), &results::metrics_to_csv(&out.rows))?;
    write_atomic(&dir.join("summary.csv"), &results::summary_to_csv(&out.summary))?;
    write_atomic(&dir.join("summary.txt"), &results::summary_to_text(&out.summary))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    /// Set when the metrics file has no data rows.
    pub warning: Option<String>,
}

/// Writes one learning-curve file per `<method>/<mode>` group in `metrics`.
pub fn cmd_plotdata(cfg: &ExperimentConfig, metrics: &Path) -> Result<PlotOutput> {
    let text = fs::read_to_string(metrics).map_err(|e| Error::io(metrics, e))?;
    let rows = results::metrics_from_csv(&text)?;
    let dir = prepare_out_dir(cfg)?;
    if rows.is_empty() {
        return Ok(PlotOutput {
            files: Vec::new(),
            warning: Some(format!("{} has no data rows; nothing written", metrics.display())),
        });
    }
    let mut files = Vec::new();
    for s in results::plot_series(&rows) {
        let path = dir.join(s.file_name());
        write_atomic(&path, &s.to_csv())?;
        files.push(path);
    }
    Ok(PlotOutput { files, warning: None })
}
