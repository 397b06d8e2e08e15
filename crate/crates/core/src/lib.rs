//! Deterministic federated-learning simulator for scalar regression.
//!
//! Three server aggregation strategies are implemented and compared:
//! parameter averaging ([`aggregation::AggregationKind::FedAvg`]),
//! mean-teacher distillation ([`aggregation::AggregationKind::FedDf`]) and
//! entropy-confidence distillation
//! ([`aggregation::AggregationKind::ConfidenceDistill`]), where each public
//! sample is supervised by the client whose penultimate-layer output has the
//! lowest entropy.
//!
//! Module map:
//!
//! * [`tensor`], [`rng`]: dense matrices and splittable seeded randomness.
//! * [`nn`]: MLP with manual backprop, RMSE loss, SGD/Adam, gradient check.
//! * [`confidence`]: entropy and per-sample teacher selection.
//! * [`aggregation`]: the three server strategies.
//! * [`federation`]: rounds, local training, evaluation.
//! * [`datagen`]: synthetic multi-trip data, partitioning, dataset files.
//! * [`experiment`]: configuration, experiment commands and result files.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod confidence;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
