//! Neighboring probability matrix: pairwise cosine similarity between the
//! directional sizes a device actually uses, with small similarities
//! truncated to zero. This is the only part of the embedding that survives
//! into the deployed model; sizes outside the device's vocabulary simply
//! have probability zero against everything.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::trace::{DirectionalPacketSize, Trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborProbMatrix {
    lambda: f64,
    min_freq: u64,
    /// Vocabulary, ascending by directional size value.
    sizes: Vec<DirectionalPacketSize>,
    /// Dense n*n row-major similarity values.
    values: Vec<f64>,
}

/// Build the matrix from a trained embedding and the device trace the
/// vocabulary is counted over.
///
/// A size enters the vocabulary when it appears at least `min_freq` times
/// and its embedding row has a nonzero norm. Entries below `lambda` are
/// truncated to exactly 0; the diagonal is exactly 1.
pub fn build_matrix(
    table: &EmbeddingTable,
    device: &Trace,
    lambda: f64,
    min_freq: u64,
) -> Result<NeighborProbMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut freq: BTreeMap<DirectionalPacketSize, u64> = BTreeMap::new();
    for r in &device.records {
        *freq.entry(r.dir_size()).or_insert(0) += 1;
    }
    // BTreeMap iteration gives ascending size order for free.
    let sizes: Vec<DirectionalPacketSize> = freq
        .into_iter()
        .filter(|&(p, n)| n >= min_freq && table.norm(p) > 0.0)
        .map(|(p, _)| p)
        .collect();
    if sizes.is_empty() {
        return Err(Error::EmptyModel(format!(
            "no directional size reaches frequency {min_freq} in the device trace"
        )));
    }

    let n = sizes.len();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let cos = table.cosine(sizes[i], sizes[j]).clamp(-1.0, 1.0);
            let v = if cos >= lambda { cos } else { 0.0 };
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(NeighborProbMatrix { lambda, min_freq, sizes, values })
}

impl NeighborProbMatrix {
    /// Assemble directly from parts; used by tests and model deserialization.
    pub fn from_parts(
        lambda: f64,
        min_freq: u64,
        sizes: Vec<DirectionalPacketSize>,
        values: Vec<f64>,
    ) -> Result<NeighborProbMatrix> {
        if values.len() != sizes.len() * sizes.len() {
            return Err(Error::Model("matrix value count does not match vocabulary".into()));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Model("matrix vocabulary must be strictly ascending".into()));
        }
        Ok(NeighborProbMatrix { lambda, min_freq, sizes, values })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn min_freq(&self) -> u64 {
        self.min_freq
    }

    pub fn sizes(&self) -> &[DirectionalPacketSize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn index_of(&self, p: DirectionalPacketSize) -> Option<usize> {
        self.sizes.binary_search(&p).ok()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.sizes.len() + j]
    }

    /// Neighboring probability between two directional sizes. Either size
    /// missing from the vocabulary yields 0.
    pub fn neighbor_prob(&self, p: DirectionalPacketSize, x: DirectionalPacketSize) -> f64 {
        match (self.index_of(p), self.index_of(x)) {
            (Some(i), Some(j)) => self.entry(i, j),
            _ => 0.0,
        }
    }
}
