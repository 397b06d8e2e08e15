//! Entropy-based predictive confidence.
//!
//! A client model is judged confident on a sample when its penultimate
//! output on that sample has low entropy. For each public sample the server
//! picks the lowest-entropy client and uses that client's penultimate row as
//! the distillation target.
//!
//! By default a row is first normalized to a probability vector, so entropy
//! lies in `[0, ln(dim)]` and is invariant to rescaling. Raw mode applies
//! `-Σ x ln x` to the unnormalized activations. Natural logarithms are used
//! throughout, with `0 ln 0 = 0`. A row whose sum is below `epsilon` (a
//! dead relu layer) gets `+∞`, so it never wins the selection.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyMode {
    pub normalize: bool,
    pub epsilon: f64,
}

impl Default for EntropyMode {
    fn default() -> Self {
        Self {
            normalize: true,
            epsilon: 1e-12,
        }
    }
}

impl EntropyMode {
    pub fn raw() -> Self {
        Self {
            normalize: false,
            ..Self::default()
        }
    }

    pub fn name(&self) -> &'static str {
        if self.normalize {
            "normalized"
        } else {
            "raw"
        }
    }
}

impl fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Entropy of one penultimate row. Lower means more confident.
pub fn entropy(x: &[f64], mode: EntropyMode) -> Result<f64> {
    if !(mode.epsilon > 0.0) {
        return Err(Error::Config("entropy epsilon must be positive".into()));
    }
    if let Some(bad) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!(
            "entropy needs non-negative activations, found {bad}"
        )));
    }
    let total: f64 = x.iter().sum();
    if total < mode.epsilon {
        return Ok(f64::INFINITY);
    }
    let h = if mode.normalize {
        -x.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / total;
                p * p.ln()
            })
            .sum::<f64>()
    } else {
        -x.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
    };
    // Rounding can leave a point mass at -0.0 or a hair below zero.
    Ok(if mode.normalize { h.max(0.0) } else { h })
}

/// Per-sample entropies of one client's penultimate matrix.
pub fn row_entropies(penultimate: &Matrix, mode: EntropyMode) -> Result<Vec<f64>> {
    (0..penultimate.rows())
        .map(|r| entropy(penultimate.row(r), mode))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSelection {
    /// Winning client per sample.
    pub chosen: Vec<usize>,
    /// `samples × clients` entropy table.
    pub entropies: Matrix,
    /// Number of samples won by each client.
    pub histogram: Vec<usize>,
}

/// Index of the smallest value; ties go to the lowest index and an
/// all-infinite row falls back to index 0.
pub fn argmin_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Picks, for every sample row, the client with the lowest entropy.
pub fn select_teachers(penultimates: &[Matrix], mode: EntropyMode) -> Result<TeacherSelection> {
    let first = penultimates
        .first()
        .ok_or_else(|| Error::Config("teacher selection needs at least one client".into()))?;
    if let Some((k, m)) = penultimates
        .iter()
        .enumerate()
        .find(|(_, m)| m.shape() != first.shape())
    {
        return Err(Error::Shape(format!(
            "client {k} penultimate is {:?}, client 0 is {:?}",
            m.shape(),
            first.shape()
        )));
    }
    let n = first.rows();
    let k = penultimates.len();
    let mut table = Vec::with_capacity(n * k);
    let per_client: Vec<Vec<f64>> = penultimates
        .iter()
        .map(|m| row_entropies(m, mode))
        .collect::<Result<_>>()?;
    for r in 0..n {
        table.extend(per_client.iter().map(|h| h[r]));
    }
    let entropies = Matrix::from_vec(n, k, table)?;
    selection_from_entropies(entropies)
}

/// Selection from a precomputed `samples × clients` entropy table.
pub fn selection_from_entropies(entropies: Matrix) -> Result<TeacherSelection> {
    let mut histogram = vec![0; entropies.cols()];
    let chosen: Vec<usize> = (0..entropies.rows())
        .map(|r| argmin_lowest_index(entropies.row(r)))
        .collect();
    for &c in &chosen {
        histogram[c] += 1;
    }
    Ok(TeacherSelection {
        chosen,
        entropies,
        histogram,
    })
}

/// Stitches each sample's row from its selected client into one matrix.
pub fn assemble_targets(penultimates: &[Matrix], selection: &TeacherSelection) -> Result<Matrix> {
    let first = penultimates
        .first()
        .ok_or_else(|| Error::Internal("no client penultimates to assemble".into()))?;
    if selection.chosen.len() != first.rows() {
        return Err(Error::Internal(format!(
            "selection covers {} samples, batch has {}",
            selection.chosen.len(),
            first.rows()
        )));
    }
    let mut data = Vec::with_capacity(first.len());
    for (r, &c) in selection.chosen.iter().enumerate() {
        let src = penultimates.get(c).ok_or_else(|| {
            Error::Internal(format!(
                "selected client {c} out of range for {} clients",
                penultimates.len()
            ))
        })?;
        data.extend_from_slice(src.row(r));
    }
    Matrix::from_vec(first.rows(), first.cols(), data)
}
