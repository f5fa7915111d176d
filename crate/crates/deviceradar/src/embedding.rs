//! Skip-gram embedding over directional packet sizes.
//!
//! Packet sizes play the role of words: sizes that appear in the same burst
//! of a device's traffic get similar vectors. Negative samples are drawn
//! from background (non-IoT) traffic so the model learns what the device's
//! sizes must be distinguished *from*.
//!
//! The table is a plain lookup matrix, one row per directional size bin
//! 1..=3000. f64 is used throughout: training is cheap at these scales and
//! the gradient checks in the test suite want the headroom.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypackets::burst_spans;
use crate::trace::{DirectionalPacketSize, Trace, MAX_DIR_SIZE};

/// Number of size bins: directional sizes live in 1..=3000.
pub const VOCAB_BINS: usize = MAX_DIR_SIZE as usize;

const EMBEDDING_FILE_VERSION: u32 = 1;

/// Hyperparameters for embedding training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Vector dimensionality.
    pub dim: usize,
    /// How many packets on each side of the center count as relevant.
    pub context_radius: usize,
    /// Negative samples drawn per relevant packet.
    pub negatives_per_relevant: usize,
    /// Initial learning rate; decays linearly over all steps.
    pub learning_rate: f64,
    pub epochs: usize,
    pub rng_seed: u64,
    /// Gap that ends a burst; context windows never cross burst boundaries.
    pub burst_gap_us: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            dim: 32,
            context_radius: 3,
            negatives_per_relevant: 5,
            learning_rate: 0.025,
            epochs: 20,
            rng_seed: 1,
            burst_gap_us: 1_000_000,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("embedding dim {} is too small", self.dim)));
        }
        if self.context_radius == 0 {
            return Err(Error::Config("context_radius must be at least 1".into()));
        }
        if self.negatives_per_relevant == 0 {
            return Err(Error::Config("negatives_per_relevant must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.burst_gap_us == 0 {
            return Err(Error::Config("burst_gap_us must be positive".into()));
        }
        Ok(())
    }
}

/// Dense lookup table: `rows` holds 3000 contiguous vectors of `dim` entries.
/// Bin p occupies rows[(p-1)*dim .. p*dim].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<f64>,
}

impl EmbeddingTable {
    /// Fresh table with entries uniform in [-0.5/dim, 0.5/dim].
    pub fn new_random(dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
        let half = 0.5 / dim as f64;
        let rows = (0..VOCAB_BINS * dim).map(|_| rng.gen_range(-half..half)).collect();
        EmbeddingTable { dim, rows }
    }

    /// Build from raw row-major data, one vector per size bin 1..=3000.
    pub fn from_rows(dim: usize, rows: Vec<f64>) -> Result<EmbeddingTable> {
        if dim == 0 || rows.len() != VOCAB_BINS * dim {
            return Err(Error::Model(format!(
                "embedding rows length {} does not match {VOCAB_BINS} bins x dim {dim}",
                rows.len()
            )));
        }
        Ok(EmbeddingTable { dim, rows })
    }

    /// Overwrite one bin's vector. Mostly useful for building fixtures.
    pub fn set_row(&mut self, p: DirectionalPacketSize, values: &[f64]) {
        assert_eq!(values.len(), self.dim);
        self.row_mut(p).copy_from_slice(values);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, p: DirectionalPacketSize) -> &[f64] {
        let i = (p.value() as usize - 1) * self.dim;
        &self.rows[i..i + self.dim]
    }

    fn row_mut(&mut self, p: DirectionalPacketSize) -> &mut [f64] {
        let i = (p.value() as usize - 1) * self.dim;
        &mut self.rows[i..i + self.dim]
    }

    pub fn dot(&self, a: DirectionalPacketSize, b: DirectionalPacketSize) -> f64 {
        dot(self.row(a), self.row(b))
    }

    pub fn norm(&self, p: DirectionalPacketSize) -> f64 {
        dot(self.row(p), self.row(p)).sqrt()
    }

    /// Cosine similarity between two bins; 0 when either row has zero norm.
    pub fn cosine(&self, a: DirectionalPacketSize, b: DirectionalPacketSize) -> f64 {
        let na = self.norm(a);
        let nb = self.norm(b);
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        self.dot(a, b) / (na * nb)
    }

    pub fn save(&self, cfg: &TrainingConfig, path: &Path) -> Result<()> {
        let file = EmbeddingFile {
            version: EMBEDDING_FILE_VERSION,
            bins: VOCAB_BINS,
            dim: self.dim,
            config: cfg.clone(),
            rows: self.rows.clone(),
        };
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), &file)
            .map_err(|e| Error::Model(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<(EmbeddingTable, TrainingConfig)> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let file: EmbeddingFile = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Model(format!("reading {}: {e}", path.display())))?;
        if file.version != EMBEDDING_FILE_VERSION {
            return Err(Error::Model(format!("unsupported embedding file version {}", file.version)));
        }
        if file.bins != VOCAB_BINS || file.rows.len() != file.bins * file.dim {
            return Err(Error::Model("embedding file dimensions are inconsistent".into()));
        }
        Ok((EmbeddingTable { dim: file.dim, rows: file.rows }, file.config))
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    version: u32,
    bins: usize,
    dim: usize,
    config: TrainingConfig,
    rows: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// Raw unigram sampler over background traffic: each size is drawn with
/// probability freq(size) / total. No frequency smoothing is applied.
#[derive(Clone, Debug)]
pub struct UnigramSampler {
    freq: Vec<u64>,       // indexed by bin-1
    cumulative: Vec<u64>, // cumulative[i] = sum of freq[..=i]
    total: u64,
}

/// Count directional sizes over a background trace. Errors when the trace is
/// empty: a sampler with no support cannot produce negatives.
pub fn build_sampler(background: &Trace) -> Result<UnigramSampler> {
    if background.is_empty() {
        return Err(Error::Config("background trace is empty, cannot build a sampler".into()));
    }
    let mut freq = vec![0u64; VOCAB_BINS];
    for r in &background.records {
        freq[r.dir_size().value() as usize - 1] += 1;
    }
    Ok(UnigramSampler::from_freq(freq))
}

impl UnigramSampler {
    pub fn from_freq(freq: Vec<u64>) -> UnigramSampler {
        assert_eq!(freq.len(), VOCAB_BINS);
        let mut cumulative = Vec::with_capacity(VOCAB_BINS);
        let mut acc = 0u64;
        for &f in &freq {
            acc += f;
            cumulative.push(acc);
        }
        UnigramSampler { freq, cumulative, total: acc }
    }

    pub fn frequency(&self, p: DirectionalPacketSize) -> u64 {
        self.freq[p.value() as usize - 1]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// P(p) under the raw unigram distribution.
    pub fn probability(&self, p: DirectionalPacketSize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.frequency(p) as f64 / self.total as f64
    }

    fn draw_bin(&self, rng: &mut impl Rng) -> u16 {
        let r = rng.gen_range(0..self.total);
        // First bin whose cumulative count exceeds r.
        let idx = self.cumulative.partition_point(|&c| c <= r);
        idx as u16 + 1
    }

    /// Draw `count` negatives, never producing a size in `relevant`. The
    /// excluded mass is renormalized over the remaining support, which is
    /// exactly what resampling on a hit achieves.
    pub fn sample_negatives(
        &self,
        relevant: &[DirectionalPacketSize],
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<DirectionalPacketSize>> {
        let mut excluded: Vec<u16> = relevant.iter().map(|p| p.value()).collect();
        excluded.sort_unstable();
        excluded.dedup();
        let excluded_mass: u64 =
            excluded.iter().map(|&v| self.freq[v as usize - 1]).sum();
        if self.total == 0 || excluded_mass >= self.total {
            return Err(Error::Sampling(
                "sampler support is empty after excluding the relevant set".into(),
            ));
        }

        let mut out = Vec::with_capacity(count);
        'draws: for _ in 0..count {
            // Rejection sampling. The relevant set is tiny in practice so a
            // handful of retries suffices; the fallback below keeps the exact
            // distribution even for adversarial inputs.
            for _ in 0..1000 {
                let bin = self.draw_bin(rng);
                if excluded.binary_search(&bin).is_err() {
                    out.push(DirectionalPacketSize::from_value(bin)?);
                    continue 'draws;
                }
            }
            let bin = self.draw_bin_excluding(&excluded, self.total - excluded_mass, rng);
            out.push(DirectionalPacketSize::from_value(bin)?);
        }
        Ok(out)
    }

    /// Exact draw from the renormalized distribution with `excluded` zeroed:
    /// pick the r-th unit of mass among the surviving bins.
    fn draw_bin_excluding(&self, excluded: &[u16], effective: u64, rng: &mut impl Rng) -> u16 {
        let r = rng.gen_range(0..effective);
        let mut included_cum = 0u64;
        let mut next_excl = 0usize;
        for bin in 1..=VOCAB_BINS as u16 {
            let f = self.freq[bin as usize - 1];
            while next_excl < excluded.len() && excluded[next_excl] < bin {
                next_excl += 1;
            }
            if f == 0 || (next_excl < excluded.len() && excluded[next_excl] == bin) {
                continue;
            }
            included_cum += f;
            if r < included_cum {
                return bin;
            }
        }
        unreachable!("draw_bin_excluding called with empty effective support")
    }
}

// ---------------------------------------------------------------------------
// Skip-gram with negative sampling
// ---------------------------------------------------------------------------

/// Loss for one center packet:
///
///   L = - sum over relevant r, negative n of
///         [ log sigma(e_c . e_r) + log sigma(-e_c . e_n) ]
///
/// Negatives come `k` per relevant, so each positive term is weighted by k.
/// `negatives.len()` must be a multiple of `relevants.len()`.
pub fn skipgram_loss(
    table: &EmbeddingTable,
    center: DirectionalPacketSize,
    relevants: &[DirectionalPacketSize],
    negatives: &[DirectionalPacketSize],
) -> f64 {
    if relevants.is_empty() {
        return 0.0;
    }
    debug_assert_eq!(negatives.len() % relevants.len(), 0);
    let k = (negatives.len() / relevants.len()) as f64;
    let mut loss = 0.0;
    for &r in relevants {
        loss -= k * sigmoid(table.dot(center, r)).ln();
    }
    for &n in negatives {
        loss -= sigmoid(-table.dot(center, n)).ln();
    }
    loss
}

/// Analytic gradient of `skipgram_loss` with respect to every distinct row it
/// touches. Rows appearing several times (duplicate sizes, or a relevant
/// equal to the center) accumulate each appearance's contribution, which is
/// the correct total derivative. Returned sorted by bin for determinism.
pub fn skipgram_gradients(
    table: &EmbeddingTable,
    center: DirectionalPacketSize,
    relevants: &[DirectionalPacketSize],
    negatives: &[DirectionalPacketSize],
) -> Vec<(DirectionalPacketSize, Vec<f64>)> {
    let dim = table.dim();
    if relevants.is_empty() {
        return Vec::new();
    }
    debug_assert_eq!(negatives.len() % relevants.len(), 0);
    let k = (negatives.len() / relevants.len()) as f64;

    let mut grads: Vec<(u16, Vec<f64>)> = Vec::new();
    let add = |bin: u16, scale: f64, vec: &[f64], grads: &mut Vec<(u16, Vec<f64>)>| {
        let slot = match grads.iter_mut().find(|(b, _)| *b == bin) {
            Some((_, g)) => g,
            None => {
                grads.push((bin, vec![0.0; dim]));
                &mut grads.last_mut().unwrap().1
            }
        };
        for (g, v) in slot.iter_mut().zip(vec) {
            *g += scale * v;
        }
    };

    let e_c: Vec<f64> = table.row(center).to_vec();
    for &r in relevants {
        // d/dx of -log sigma(x) is -(1 - sigma(x)); x = e_c . e_r.
        let coeff = -k * (1.0 - sigmoid(table.dot(center, r)));
        add(center.value(), coeff, table.row(r), &mut grads);
        add(r.value(), coeff, &e_c, &mut grads);
    }
    for &n in negatives {
        // d/dx of -log sigma(-x) is sigma(x); x = e_c . e_n.
        let coeff = sigmoid(table.dot(center, n));
        add(center.value(), coeff, table.row(n), &mut grads);
        add(n.value(), coeff, &e_c, &mut grads);
    }

    grads.sort_by_key(|(b, _)| *b);
    grads
        .into_iter()
        .map(|(b, g)| (DirectionalPacketSize::from_value(b).unwrap(), g))
        .collect()
}

/// One SGD step on the per-center loss: every touched row moves against its
/// analytic gradient, scaled by `lr`.
pub fn skipgram_step(
    table: &mut EmbeddingTable,
    center: DirectionalPacketSize,
    relevants: &[DirectionalPacketSize],
    negatives: &[DirectionalPacketSize],
    lr: f64,
) {
    let grads = skipgram_gradients(table, center, relevants, negatives);
    for (p, g) in grads {
        let row = table.row_mut(p);
        for (w, gi) in row.iter_mut().zip(&g) {
            *w -= lr * gi;
        }
        debug_assert!(row.iter().all(|w| w.is_finite()), "non-finite weight after update");
    }
}

/// Counters reported by `train_embedding`. `vector_updates` is the number of
/// row updates applied, which bounds the work at
/// epochs * packets * (1 + 2c * (1 + k)).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: u64,
    pub vector_updates: u64,
}

/// Train an embedding table on a device's own traffic, drawing negatives
/// from background traffic. Deterministic for a fixed `cfg.rng_seed`.
pub fn train_embedding(
    device: &Trace,
    background: &Trace,
    cfg: &TrainingConfig,
) -> Result<(EmbeddingTable, TrainStats)> {
    cfg.validate()?;
    if device.is_empty() {
        return Err(Error::Config("device trace is empty, nothing to train on".into()));
    }
    let sampler = build_sampler(background)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut table = EmbeddingTable::new_random(cfg.dim, &mut rng);
    let mut stats = TrainStats::default();

    let sizes: Vec<DirectionalPacketSize> = device.records.iter().map(|r| r.dir_size()).collect();
    let spans = burst_spans(&device.records, cfg.burst_gap_us);
    let total_steps = (cfg.epochs as u64) * (sizes.len() as u64);
    let c = cfg.context_radius;
    let k = cfg.negatives_per_relevant;

    let mut step = 0u64;
    let mut relevants: Vec<DirectionalPacketSize> = Vec::with_capacity(2 * c);
    let mut negatives: Vec<DirectionalPacketSize> = Vec::with_capacity(2 * c * k);
    let mut exclusion: Vec<DirectionalPacketSize> = Vec::with_capacity(2 * c + 1);
    for _ in 0..cfg.epochs {
        for &(lo, hi) in &spans {
            for t in lo..hi {
                // Linear decay with a small floor, standard for skip-gram SGD.
                let progress = step as f64 / total_steps as f64;
                let lr = cfg.learning_rate * (1.0 - progress).max(1e-4);
                step += 1;

                relevants.clear();
                let from = t.saturating_sub(c).max(lo);
                let to = (t + c + 1).min(hi);
                for i in from..to {
                    if i != t {
                        relevants.push(sizes[i]);
                    }
                }
                if relevants.is_empty() {
                    continue;
                }
                // The exclusion set spans the whole context window, center
                // included, so no negative ever collides with it.
                exclusion.clear();
                exclusion.extend_from_slice(&relevants);
                exclusion.push(sizes[t]);

                negatives.clear();
                for _ in 0..relevants.len() {
                    negatives.extend(sampler.sample_negatives(&exclusion, k, &mut rng)?);
                }
                debug_assert!(negatives.iter().all(|n| !exclusion.contains(n)));

                skipgram_step(&mut table, sizes[t], &relevants, &negatives, lr);
                stats.steps += 1;
                stats.vector_updates += 1 + (relevants.len() + negatives.len()) as u64;
            }
        }
    }

    Ok((table, stats))
}
