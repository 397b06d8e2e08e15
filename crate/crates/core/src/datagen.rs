//! Synthetic multi-trip regression data.
//!
//! Each trip is a Gaussian cluster of inputs around its own mean; all trips
//! share one target function `scale · sin(w · x)` plus Gaussian noise. This
//! gives pure covariate shift between trips.
//!
//! Every trip's samples are split train:test:public (7:2:1 by default) with
//! largest-remainder rounding on integer ratio parts, so split sizes are
//! exact and deterministic.
//!
//! # Dataset file
//!
//! ```text
//! # fedconf-dataset v1
//! # input_dim=<d> samples=<n>
//! sample_id,trip_id,split,x0,...,x<d-1>,target
//! 0,0,train,0.123,...,-0.52
//! 7,0,public,0.981,...,NA
//! ```
//!
//! `split` is one of `train`, `test`, `public`. Public rows carry the
//! literal target `NA`. Floats are written in shortest round-trip form, so
//! loading a saved dataset reproduces every value exactly. The file must end
//! with a newline.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::federation::{ClientData, FederatedData};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TripSpec {
    pub trip_id: usize,
    pub input_dim: usize,
    pub cluster_mean: Vec<f64>,
    pub cluster_stddev: f64,
    pub n_samples: usize,
    pub noise_stddev: f64,
}

/// `scale · sin(projection · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFunction {
    pub projection: Vec<f64>,
    pub scale: f64,
}

impl TargetFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let z: f64 = self.projection.iter().zip(x).map(|(w, v)| w * v).sum();
        self.scale * z.sin()
    }
}

/// Knobs for the default trip layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    pub trips: usize,
    pub samples_per_trip: usize,
    pub cluster_stddev: f64,
    /// Trip `k` is centred at `cluster_scale · e_k`.
    pub cluster_scale: f64,
    pub noise_stddev: f64,
    pub target_scale: f64,
    /// Euclidean norm of the target projection vector.
    pub target_frequency: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            trips: 5,
            samples_per_trip: 2000,
            cluster_stddev: 0.5,
            cluster_scale: 2.0,
            noise_stddev: 0.05,
            target_scale: 1.0,
            target_frequency: 1.5,
        }
    }
}

impl GeneratorConfig {
    pub fn trip_specs(&self) -> Result<Vec<TripSpec>> {
        if self.trips == 0 || self.input_dim == 0 {
            return Err(Error::Config("need at least one trip and one input dimension".into()));
        }
        if self.trips > self.input_dim {
            return Err(Error::Config(format!(
                "{} trips need at least as many input dimensions, got {}",
                self.trips, self.input_dim
            )));
        }
        let specs: Vec<TripSpec> = (0..self.trips)
            .map(|k| {
                let mut mean = vec![0.0; self.input_dim];
                mean[k] = self.cluster_scale;
                TripSpec {
                    trip_id: k,
                    input_dim: self.input_dim,
                    cluster_mean: mean,
                    cluster_stddev: self.cluster_stddev,
                    n_samples: self.samples_per_trip,
                    noise_stddev: self.noise_stddev,
                }
            })
            .collect();
        validate_trips(&specs)?;
        Ok(specs)
    }

    /// Projection vector drawn from the `target` child stream, rescaled to
    /// `target_frequency`.
    pub fn target_function(&self, rng: &SeededRng) -> TargetFunction {
        let mut r = rng.split("target");
        let raw: Vec<f64> = (0..self.input_dim).map(|_| r.standard_normal()).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        TargetFunction {
            projection: raw.iter().map(|x| x / norm * self.target_frequency).collect(),
            scale: self.target_scale,
        }
    }
}

/// Checks dimensions and that distinct cluster means are at least
/// `4 · cluster_stddev` apart.
pub fn validate_trips(specs: &[TripSpec]) -> Result<()> {
    for s in specs {
        if s.cluster_mean.len() != s.input_dim {
            return Err(Error::Config(format!("trip {} mean has wrong dimension", s.trip_id)));
        }
        if s.n_samples < 10 {
            return Err(Error::Config(format!("trip {} needs at least 10 samples", s.trip_id)));
        }
        if !(s.cluster_stddev >= 0.0) || !(s.noise_stddev >= 0.0) {
            return Err(Error::Config(format!("trip {} has a negative stddev", s.trip_id)));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let d = a
                .cluster_mean
                .iter()
                .zip(&b.cluster_mean)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let needed = 4.0 * a.cluster_stddev.max(b.cluster_stddev);
            if d < needed {
                return Err(Error::Config(format!(
                    "trips {} and {} are {d:.3} apart, need at least {needed:.3}",
                    a.trip_id, b.trip_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripData {
    pub trip_id: usize,
    pub inputs: Matrix,
    pub targets: Matrix,
}

/// Draws `n_samples` inputs around the trip's mean and labels them.
pub fn generate_trip(spec: &TripSpec, f: &TargetFunction, rng: &mut SeededRng) -> Result<TripData> {
    if spec.n_samples < 10 {
        return Err(Error::Config(format!(
            "trip {} needs at least 10 samples",
            spec.trip_id
        )));
    }
    let d = spec.input_dim;
    let mut inputs = Vec::with_capacity(spec.n_samples * d);
    let mut targets = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let start = inputs.len();
        for mu in &spec.cluster_mean {
            inputs.push(mu + spec.cluster_stddev * rng.standard_normal());
        }
        let y = f.eval(&inputs[start..]) + spec.noise_stddev * rng.standard_normal();
        targets.push(y);
    }
    Ok(TripData {
        trip_id: spec.trip_id,
        inputs: Matrix::from_vec(spec.n_samples, d, inputs)?,
        targets: Matrix::from_vec(spec.n_samples, 1, targets)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    Public,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Public => "public",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "public" => Ok(Split::Public),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionMode {
    Iid,
    NonIid,
}

impl PartitionMode {
    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::Iid => "iid",
            PartitionMode::NonIid => "non_iid",
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            "non_iid" => Ok(PartitionMode::NonIid),
            other => Err(Error::Config(format!("unknown partition mode `{other}`"))),
        }
    }
}

/// Split ratios as integer parts, e.g. `[7, 2, 1]` for train:test:public.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub ratios: [u32; 3],
}

impl PartitionPlan {
    pub fn new(mode: PartitionMode) -> Self {
        Self {
            mode,
            ratios: [7, 2, 1],
        }
    }

    /// Ratios as fractions summing to one.
    pub fn fractions(&self) -> [f64; 3] {
        let total: u32 = self.ratios.iter().sum();
        self.ratios.map(|r| f64::from(r) / f64::from(total))
    }
}

/// Largest-remainder apportionment of `n` items to integer `parts`.
/// Remainder ties go to the earlier part.
pub fn largest_remainder(n: usize, parts: &[u32]) -> Result<Vec<usize>> {
    let total: u64 = parts.iter().map(|&p| u64::from(p)).sum();
    if total == 0 {
        return Err(Error::Config("split ratios must not all be zero".into()));
    }
    let n64 = n as u64;
    let mut counts: Vec<usize> = parts.iter().map(|&p| (n64 * u64::from(p) / total) as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(n64 * u64::from(parts[i]) % total));
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub trip_id: usize,
    pub split: Split,
    pub features: Vec<f64>,
    /// `None` for public samples.
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn trip_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.trip_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn count(&self, trip: usize, split: Split) -> usize {
        self.samples
            .iter()
            .filter(|s| s.trip_id == trip && s.split == split)
            .count()
    }
}

/// Generates every trip and assigns each sample a split. Sample ids run
/// consecutively in trip order.
pub fn generate_dataset(
    trips: &[TripSpec],
    f: &TargetFunction,
    plan: &PartitionPlan,
    rng: &SeededRng,
) -> Result<Dataset> {
    validate_trips(trips)?;
    let input_dim = trips
        .first()
        .ok_or_else(|| Error::Config("need at least one trip".into()))?
        .input_dim;
    if trips.iter().any(|t| t.input_dim != input_dim) {
        return Err(Error::Config("trips disagree on input_dim".into()));
    }
    let mut samples = Vec::new();
    for spec in trips {
        let data = generate_trip(spec, f, &mut rng.split(&format!("trip/{}", spec.trip_id)))?;
        let splits = assign_splits(spec.n_samples, plan, &mut rng.split(&format!("split/{}", spec.trip_id)))?;
        for (r, split) in splits.into_iter().enumerate() {
            samples.push(Sample {
                id: samples.len(),
                trip_id: spec.trip_id,
                split,
                features: data.inputs.row(r).to_vec(),
                target: (split != Split::Public).then(|| data.targets.get(r, 0)),
            });
        }
    }
    Ok(Dataset { input_dim, samples })
}

/// Default dataset for a generator config and seed.
pub fn generate_default(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    let rng = SeededRng::new(seed);
    let trips = cfg.trip_specs()?;
    let f = cfg.target_function(&rng);
    generate_dataset(&trips, &f, &PartitionPlan::new(PartitionMode::NonIid), &rng)
}

fn assign_splits(n: usize, plan: &PartitionPlan, rng: &mut SeededRng) -> Result<Vec<Split>> {
    let counts = largest_remainder(n, &plan.ratios)?;
    let mut out = vec![Split::Train; n];
    let order = rng.permutation(n);
    let (n_train, n_test) = (counts[0], counts[1]);
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_test {
            Split::Test
        } else {
            Split::Public
        };
    }
    Ok(out)
}

/// [`FederatedData`] plus the sample ids behind every row, in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub data: FederatedData,
    pub client_ids: Vec<Vec<usize>>,
    pub public_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

fn rows_of(samples: &[&Sample]) -> Result<(Matrix, Matrix)> {
    let dim = samples
        .first()
        .ok_or_else(|| Error::Config("empty partition".into()))?
        .features
        .len();
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

/// Distributes training samples to `n_clients` clients and collects the
/// shared public (unlabeled) and test pools.
///
/// * `NonIid`: trip `t` goes to client `t mod n_clients`.
/// * `Iid`: all training samples are pooled, shuffled, and dealt round-robin.
pub fn partition(dataset: &Dataset, mode: PartitionMode, n_clients: usize, rng: &mut SeededRng) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let trips = dataset.trip_ids();
    if trips.is_empty() {
        return Err(Error::Config("dataset has no trips".into()));
    }
    let train: Vec<&Sample> = dataset.samples.iter().filter(|s| s.split == Split::Train).collect();
    let mut buckets: Vec<Vec<&Sample>> = vec![Vec::new(); n_clients];
    match mode {
        PartitionMode::NonIid => {
            if trips.len() < n_clients {
                return Err(Error::Config(format!(
                    "non-iid partition needs at least {n_clients} trips, dataset has {}",
                    trips.len()
                )));
            }
            for s in &train {
                let pos = trips.binary_search(&s.trip_id).expect("trip id listed");
                buckets[pos % n_clients].push(s);
            }
        }
        PartitionMode::Iid => {
            for (i, &j) in rng.permutation(train.len()).iter().enumerate() {
                buckets[i % n_clients].push(train[j]);
            }
        }
    }
    let mut clients = Vec::with_capacity(n_clients);
    for (k, b) in buckets.iter().enumerate() {
        if b.is_empty() {
            return Err(Error::Config(format!("client {k} received no training samples")));
        }
        let (x, y) = rows_of(b)?;
        clients.push(ClientData::new(x, y)?);
    }

    let public: Vec<&Sample> = dataset.samples.iter().filter(|s| s.split == Split::Public).collect();
    let test: Vec<&Sample> = dataset.samples.iter().filter(|s| s.split == Split::Test).collect();
    if public.is_empty() || test.is_empty() {
        return Err(Error::Config("dataset needs public and test samples".into()));
    }
    let public_x: Vec<f64> = public.iter().flat_map(|s| s.features.iter().copied()).collect();
    let (test_inputs, test_targets) = rows_of(&test)?;
    Ok(Partition {
        data: FederatedData {
            clients,
            public: Matrix::from_vec(public.len(), dataset.input_dim, public_x)?,
            test_inputs,
            test_targets,
        },
        client_ids: buckets.iter().map(|b| b.iter().map(|s| s.id).collect()).collect(),
        public_ids: public.iter().map(|s| s.id).collect(),
        test_ids: test.iter().map(|s| s.id).collect(),
    })
}

const MAGIC: &str = "# fedconf-dataset v1";

pub fn dataset_to_text(d: &Dataset) -> String {
    let mut out = String::with_capacity(d.samples.len() * (20 + d.input_dim * 22));
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "# input_dim={} samples={}", d.input_dim, d.samples.len());
    out.push_str("sample_id,trip_id,split");
    for i in 0..d.input_dim {
        let _ = write!(out, ",x{i}");
    }
    out.push_str(",target\n");
    for s in &d.samples {
        let _ = write!(out, "{},{},{}", s.id, s.trip_id, s.split);
        for v in &s.features {
            let _ = write!(out, ",{v}");
        }
        match s.target {
            Some(t) => {
                let _ = writeln!(out, ",{t}");
            }
            None => out.push_str(",NA\n"),
        }
    }
    out
}

pub fn dataset_from_text(text: &str) -> Result<Dataset> {
    let mut lines = text.split_inclusive('\n').enumerate().map(|(i, l)| (i + 1, l));
    let header_err = || Error::Format(format!("missing `{MAGIC}` header"));
    let (_, magic) = lines.next().ok_or_else(header_err)?;
    if magic.trim_end() != MAGIC {
        return Err(header_err());
    }
    let (_, meta) = lines.next().ok_or_else(header_err)?;
    let meta = meta.trim_end();
    let mut input_dim = None;
    let mut declared = None;
    for kv in meta.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("input_dim", v)) => input_dim = v.parse::<usize>().ok(),
            Some(("samples", v)) => declared = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (input_dim, declared) = match (input_dim, declared) {
        (Some(d), Some(n)) if d > 0 => (d, n),
        _ => return Err(Error::Format(format!("bad metadata line `{meta}`"))),
    };
    let (_, columns) = lines.next().ok_or_else(header_err)?;
    if !columns.starts_with("sample_id,trip_id,split") {
        return Err(Error::Format("missing column header".into()));
    }

    let n_fields = 4 + input_dim;
    let mut samples = Vec::with_capacity(declared);
    let mut last_complete = 3;
    for (ln, raw) in lines {
        let err = |msg: String| Error::Parse {
            line: ln,
            msg: format!("{msg} (last complete line is {last_complete})"),
        };
        let Some(line) = raw.strip_suffix('\n') else {
            return Err(err("line is not newline-terminated; file looks truncated".into()));
        };
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_fields {
            return Err(err(format!("expected {n_fields} fields, found {}", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("bad integer `{s}`: {e}")));
        let float = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number `{s}`: {e}")));
        let split: Split = fields[2]
            .parse()
            .map_err(|_| err(format!("unknown split `{}`", fields[2])))?;
        let features = fields[3..3 + input_dim]
            .iter()
            .map(|s| float(s))
            .collect::<Result<Vec<_>>>()?;
        let target = match (fields[n_fields - 1], split) {
            ("NA", Split::Public) => None,
            ("NA", _) => return Err(err("labeled split with NA target".into())),
            (_, Split::Public) => return Err(err("public rows must carry NA targets".into())),
            (t, _) => Some(float(t)?),
        };
        samples.push(Sample {
            id: int(fields[0])?,
            trip_id: int(fields[1])?,
            split,
            features,
            target,
        });
        last_complete = ln;
    }
    if samples.len() != declared {
        return Err(Error::Parse {
            line: last_complete,
            msg: format!(
                "header declares {declared} samples but file holds {}; truncated after line {last_complete}",
                samples.len()
            ),
        });
    }
    let mut ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Format("duplicate sample ids".into()));
    }
    Ok(Dataset { input_dim, samples })
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_text(d))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_text(&text)
}
