//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Every key is optional; [`ExperimentConfig::default`]
//! documents the defaults and [`ExperimentConfig::to_text`] writes the fully
//! resolved configuration back in the same format.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | `0` | dataset seed (`gen-data`, and in-memory data for other commands); seed of `validate-entropy` |
//! | `seeds` | `0,1,2,3,4` | run seeds for `compare` |
//! | `input_dim` | `8` | feature count |
//! | `trips` | `5` | number of trips |
//! | `samples_per_trip` | `2000` | |
//! | `cluster_stddev` | `0.5` | |
//! | `cluster_scale` | `2.0` | trip `k` is centred at `cluster_scale · e_k` |
//! | `noise_stddev` | `0.05` | |
//! | `target_scale` | `1.0` | |
//! | `target_frequency` | `1.5` | norm of the target projection |
//! | `hidden` | `64,32,16` | hidden widths; the last is the penultimate width |
//! | `rounds` | `100` | |
//! | `clients` | `5` | |
//! | `participation_fraction` | `1.0` | |
//! | `local_epochs` | `5` | |
//! | `local_batch` | `64` | |
//! | `local_lr` | `1e-4` | |
//! | `local_weight_decay` | `1e-5` | |
//! | `optimizer` | `adam` | `adam` or `sgd` |
//! | `eval_every` | `1` | |
//! | `client_streams` | `per_client` | `per_client` or `shared` |
//! | `record_wall_time` | `false` | when false `wall_ms` is written as 0 |
//! | `methods` | `fedavg,feddf,confidence_distill` | |
//! | `modes` | `iid,non_iid` | |
//! | `distill_steps` | `auto` | `auto` is one pass over the public pool |
//! | `distill_lr` | `1e-4` | |
//! | `distill_batch` | `50` | |
//! | `entropy_mode` | `normalized` | `normalized` or `raw` |
//! | `entropy_epsilon` | `1e-12` | |
//! | `validate_epochs` | `20` | local epochs for each per-trip model |
//! | `validate_lr` | `1e-3` | |
//! | `out_dir` | `out` | |

use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::{AggregationKind, AggregationMethod};
use crate::datagen::{GeneratorConfig, PartitionMode};
use crate::error::{Error, Result};
use crate::federation::{ClientStreams, FedConfig};
use crate::nn::{mlp_specs, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
    pub hidden: Vec<usize>,
    /// Federation settings. `specs` and `seed` are filled in per run.
    pub fed: FedConfig,
    pub methods: Vec<AggregationKind>,
    pub modes: Vec<PartitionMode>,
    pub validate_epochs: usize,
    pub validate_lr: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            generator: GeneratorConfig::default(),
            hidden: vec![64, 32, 16],
            fed: FedConfig::default(),
            methods: AggregationKind::ALL.to_vec(),
            modes: vec![PartitionMode::Iid, PartitionMode::NonIid],
            validate_epochs: 20,
            validate_lr: 1e-3,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T>(line: usize, key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Parse {
        line,
        msg: format!("bad value `{value}` for `{key}`: {e}"),
    })
}

fn parse_list<T>(line: usize, key: &str, value: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Parse {
            line,
            msg: format!("`{key}` needs at least one entry"),
        });
    }
    Ok(items)
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn optimizer_name(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam { .. } => "adam",
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (key, value) = l.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got `{l}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("config key `{key}` given twice (line {line})")));
            }
            cfg.set(line, key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let g = &mut self.generator;
        let f = &mut self.fed;
        let m = &mut f.method;
        match key {
            "seed" => self.seed = parse_value(line, key, v)?,
            "seeds" => self.seeds = parse_list(line, key, v)?,
            "input_dim" => g.input_dim = parse_value(line, key, v)?,
            "trips" => g.trips = parse_value(line, key, v)?,
            "samples_per_trip" => g.samples_per_trip = parse_value(line, key, v)?,
            "cluster_stddev" => g.cluster_stddev = parse_value(line, key, v)?,
            "cluster_scale" => g.cluster_scale = parse_value(line, key, v)?,
            "noise_stddev" => g.noise_stddev = parse_value(line, key, v)?,
            "target_scale" => g.target_scale = parse_value(line, key, v)?,
            "target_frequency" => g.target_frequency = parse_value(line, key, v)?,
            "hidden" => self.hidden = parse_list(line, key, v)?,
            "rounds" => f.rounds = parse_value(line, key, v)?,
            "clients" => f.clients = parse_value(line, key, v)?,
            "participation_fraction" => f.participation_fraction = parse_value(line, key, v)?,
            "local_epochs" => f.local_epochs = parse_value(line, key, v)?,
            "local_batch" => f.local_batch = parse_value(line, key, v)?,
            "local_lr" => f.local_lr = parse_value(line, key, v)?,
            "local_weight_decay" => f.local_weight_decay = parse_value(line, key, v)?,
            "optimizer" => {
                f.local_optimizer = match v {
                    "adam" => OptimizerKind::adam_default(),
                    "sgd" => OptimizerKind::Sgd,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("unknown optimizer `{v}` (expected adam or sgd)"),
                        })
                    }
                }
            }
            "eval_every" => f.eval_every = parse_value(line, key, v)?,
            "client_streams" => {
                f.client_streams = match v {
                    "per_client" => ClientStreams::PerClient,
                    "shared" => ClientStreams::Shared,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("unknown client_streams `{v}` (expected per_client or shared)"),
                        })
                    }
                }
            }
            "record_wall_time" => f.record_wall_time = parse_value(line, key, v)?,
            "methods" => self.methods = parse_list(line, key, v)?,
            "modes" => self.modes = parse_list(line, key, v)?,
            "distill_steps" => {
                m.distill_steps = if v == "auto" {
                    None
                } else {
                    Some(parse_value(line, key, v)?)
                }
            }
            "distill_lr" => m.distill_lr = parse_value(line, key, v)?,
            "distill_batch" => m.distill_batch = parse_value(line, key, v)?,
            "entropy_mode" => {
                m.entropy_mode.normalize = match v {
                    "normalized" => true,
                    "raw" => false,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("unknown entropy_mode `{v}` (expected normalized or raw)"),
                        })
                    }
                }
            }
            "entropy_epsilon" => m.entropy_mode.epsilon = parse_value(line, key, v)?,
            "validate_epochs" => self.validate_epochs = parse_value(line, key, v)?,
            "validate_lr" => self.validate_lr = parse_value(line, key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}` (line {line})"))),
        }
        Ok(())
    }

    /// Federation config for one method and run seed.
    pub fn fed_config(&self, kind: AggregationKind, seed: u64) -> FedConfig {
        FedConfig {
            method: AggregationMethod {
                kind,
                ..self.fed.method
            },
            specs: mlp_specs(self.generator.input_dim, &self.hidden),
            seed,
            ..self.fed.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden needs at least one positive width".into()));
        }
        if self.seeds.is_empty() || self.methods.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("seeds, methods and modes must be non-empty".into()));
        }
        if self.validate_epochs == 0 || !(self.validate_lr > 0.0) {
            return Err(Error::Config("validate_epochs and validate_lr must be positive".into()));
        }
        self.generator.trip_specs()?;
        for &kind in &self.methods {
            self.fed_config(kind, 0).validate()?;
        }
        Ok(())
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let f = &self.fed;
        let m = &f.method;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("seeds", join(&self.seeds));
        kv("input_dim", g.input_dim.to_string());
        kv("trips", g.trips.to_string());
        kv("samples_per_trip", g.samples_per_trip.to_string());
        kv("cluster_stddev", g.cluster_stddev.to_string());
        kv("cluster_scale", g.cluster_scale.to_string());
        kv("noise_stddev", g.noise_stddev.to_string());
        kv("target_scale", g.target_scale.to_string());
        kv("target_frequency", g.target_frequency.to_string());
        kv("hidden", join(&self.hidden));
        kv("rounds", f.rounds.to_string());
        kv("clients", f.clients.to_string());
        kv("participation_fraction", f.participation_fraction.to_string());
        kv("local_epochs", f.local_epochs.to_string());
        kv("local_batch", f.local_batch.to_string());
        kv("local_lr", f.local_lr.to_string());
        kv("local_weight_decay", f.local_weight_decay.to_string());
        kv("optimizer", optimizer_name(f.local_optimizer).to_string());
        kv("eval_every", f.eval_every.to_string());
        let streams = match f.client_streams {
            ClientStreams::PerClient => "per_client",
            ClientStreams::Shared => "shared",
        };
        kv("client_streams", streams.to_string());
        kv("record_wall_time", f.record_wall_time.to_string());
        kv("methods", join(&self.methods));
        kv("modes", join(&self.modes));
        kv(
            "distill_steps",
            m.distill_steps.map_or_else(|| "auto".to_string(), |t| t.to_string()),
        );
        kv("distill_lr", m.distill_lr.to_string());
        kv("distill_batch", m.distill_batch.to_string());
        kv("entropy_mode", m.entropy_mode.name().to_string());
        kv("entropy_epsilon", m.entropy_mode.epsilon.to_string());
        kv("validate_epochs", self.validate_epochs.to_string());
        kv("validate_lr", self.validate_lr.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::from_text("").unwrap(), ExperimentConfig::default());
        assert_eq!(
            ExperimentConfig::from_text("# just a comment\n\n").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn resolved_text_round_trips() {
        let text = "rounds = 7\nseeds = 3, 9\nmethods = feddf\nmodes = non_iid\n\
                    distill_steps = 4\nentropy_mode = raw\noptimizer = sgd\nhidden = 12,6\n\
                    client_streams = shared\nout_dir = somewhere/else\n";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.fed.rounds, 7);
        assert_eq!(cfg.seeds, vec![3, 9]);
        assert_eq!(cfg.methods, vec![AggregationKind::FedDf]);
        assert_eq!(cfg.fed.method.distill_steps, Some(4));
        assert!(!cfg.fed.method.entropy_mode.normalize);
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_text("rounds = 3\nlearning_rat = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn bad_values_report_line() {
        match ExperimentConfig::from_text("\nrounds = many\n") {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("rounds"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(ExperimentConfig::from_text("rounds\n").is_err());
        assert!(ExperimentConfig::from_text("rounds = 0\n").is_err());
        assert!(ExperimentConfig::from_text("rounds = 2\nrounds = 3\n").is_err());
        assert!(ExperimentConfig::from_text("methods = fedprox\n").is_err());
    }

    #[test]
    fn fed_config_uses_hidden_and_seed() {
        let cfg = ExperimentConfig::from_text("hidden = 10\ninput_dim = 6\n").unwrap();
        let fc = cfg.fed_config(AggregationKind::FedAvg, 42);
        assert_eq!(fc.seed, 42);
        assert_eq!(fc.specs, mlp_specs(6, &[10]));
        assert_eq!(fc.method.kind, AggregationKind::FedAvg);
    }
}
