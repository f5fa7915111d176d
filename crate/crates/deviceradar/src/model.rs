//! The deployable per-device model: key packets, neighboring-probability
//! matrix, and two decision trees (one over float window features, one over
//! the quantized register sums the data plane actually accumulates), plus
//! the end-to-end training pipeline and a versioned JSON file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compiler::quantized_feature_vector;
use crate::embedding::{train_embedding, TrainStats, TrainingConfig};
use crate::error::{Error, Result};
use crate::fingerprint::{
    build_feature_vector, train_tree, windowize, DecisionTree, TreeNode, Window,
};
use crate::harness::{split_windows, EvalReport};
use crate::keypackets::{extract_key_packets, select_top_n, ExtractionConfig, KeyPacketEntry};
use crate::matrix::{build_matrix, NeighborProbMatrix};
use crate::trace::{DirectionalPacketSize, PacketRecord, Trace};

pub const MODEL_VERSION: u32 = 1;

/// Everything needed to recognize one device, both offline (float tree)
/// and on the data plane after compilation (quantized tree).
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceFingerprintModel {
    pub device_id: String,
    /// Detection window length.
    pub t_w_us: u64,
    /// Selected key packets, the register dimensions, in selection order.
    pub key_packets: Vec<DirectionalPacketSize>,
    /// Periodicity evidence behind each selected key packet.
    pub key_details: Vec<KeyPacketEntry>,
    /// True when fewer key packets qualified than were requested.
    pub shortfall: bool,
    pub matrix: NeighborProbMatrix,
    /// Tree over exact float feature vectors.
    pub float_tree: DecisionTree,
    /// Tree over 8-bit-quantized integer feature sums; this is what
    /// compiles into inference rules.
    pub quant_tree: DecisionTree,
    pub embedding: TrainingConfig,
    pub extraction: ExtractionConfig,
}

/// Node of a tree flattened to an id-indexed list for serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatNode {
    pub id: usize,
    pub kind: FlatKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<[u64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatKind {
    Split,
    Leaf,
}

/// Serialized tree: preorder node list, node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatTree {
    pub dim: usize,
    pub nodes: Vec<FlatNode>,
}

pub fn flatten_tree(tree: &DecisionTree) -> FlatTree {
    fn walk(node: &TreeNode, nodes: &mut Vec<FlatNode>) -> usize {
        let id = nodes.len();
        nodes.push(FlatNode {
            id,
            kind: FlatKind::Leaf,
            feature: None,
            threshold: None,
            left: None,
            right: None,
            label: None,
            counts: None,
        });
        match node {
            TreeNode::Leaf { label, counts } => {
                nodes[id].label = Some(*label);
                nodes[id].counts = Some(*counts);
            }
            TreeNode::Split { feature, threshold, left, right } => {
                nodes[id].kind = FlatKind::Split;
                nodes[id].feature = Some(*feature);
                nodes[id].threshold = Some(*threshold);
                let l = walk(left, nodes);
                nodes[id].left = Some(l);
                let r = walk(right, nodes);
                nodes[id].right = Some(r);
            }
        }
        id
    }
    let mut nodes = Vec::new();
    walk(tree.root(), &mut nodes);
    FlatTree { dim: tree.dim(), nodes }
}

pub fn unflatten_tree(flat: &FlatTree) -> Result<DecisionTree> {
    let n = flat.nodes.len();
    if n == 0 {
        return Err(Error::Model("tree node list is empty".into()));
    }
    for (i, node) in flat.nodes.iter().enumerate() {
        if node.id != i {
            return Err(Error::Model(format!("node {i} carries id {}", node.id)));
        }
    }
    // `building[i]` guards against cycles, `used` against shared subtrees
    // and orphans; both would corrupt prediction.
    fn build(
        flat: &FlatTree,
        id: usize,
        building: &mut [bool],
        used: &mut [bool],
    ) -> Result<TreeNode> {
        let node = flat
            .nodes
            .get(id)
            .ok_or_else(|| Error::Model(format!("node id {id} out of range")))?;
        if building[id] {
            return Err(Error::Model(format!("node {id} is part of a cycle")));
        }
        if used[id] {
            return Err(Error::Model(format!("node {id} has two parents")));
        }
        used[id] = true;
        match node.kind {
            FlatKind::Leaf => {
                let label =
                    node.label.ok_or_else(|| Error::Model(format!("leaf {id} missing label")))?;
                let counts = node.counts.unwrap_or([0, 0]);
                Ok(TreeNode::Leaf { label, counts })
            }
            FlatKind::Split => {
                building[id] = true;
                let feature = node
                    .feature
                    .ok_or_else(|| Error::Model(format!("split {id} missing feature")))?;
                let threshold = node
                    .threshold
                    .ok_or_else(|| Error::Model(format!("split {id} missing threshold")))?;
                let left = node
                    .left
                    .ok_or_else(|| Error::Model(format!("split {id} missing left child")))?;
                let right = node
                    .right
                    .ok_or_else(|| Error::Model(format!("split {id} missing right child")))?;
                let l = build(flat, left, building, used)?;
                let r = build(flat, right, building, used)?;
                building[id] = false;
                Ok(TreeNode::Split {
                    feature,
                    threshold,
                    left: Box::new(l),
                    right: Box::new(r),
                })
            }
        }
    }
    let mut building = vec![false; n];
    let mut used = vec![false; n];
    let root = build(flat, 0, &mut building, &mut used)?;
    if let Some(orphan) = used.iter().position(|&u| !u) {
        return Err(Error::Model(format!("node {orphan} is unreachable from the root")));
    }
    DecisionTree::new(flat.dim, root)
}

/// On-disk JSON form of [`DeviceFingerprintModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub device_id: String,
    pub t_w_us: u64,
    pub key_packets: Vec<DirectionalPacketSize>,
    pub key_details: Vec<KeyPacketEntry>,
    pub shortfall: bool,
    pub matrix: NeighborProbMatrix,
    pub float_tree: FlatTree,
    pub quant_tree: FlatTree,
    pub embedding: TrainingConfig,
    pub extraction: ExtractionConfig,
}

impl DeviceFingerprintModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_VERSION,
            device_id: self.device_id.clone(),
            t_w_us: self.t_w_us,
            key_packets: self.key_packets.clone(),
            key_details: self.key_details.clone(),
            shortfall: self.shortfall,
            matrix: self.matrix.clone(),
            float_tree: flatten_tree(&self.float_tree),
            quant_tree: flatten_tree(&self.quant_tree),
            embedding: self.embedding.clone(),
            extraction: self.extraction.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Model(format!("model serialization failed: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<DeviceFingerprintModel> {
        let file: ModelFile = serde_json::from_str(text)
            .map_err(|e| Error::parse(origin, e.line(), e.to_string()))?;
        if file.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                file.version
            )));
        }
        if file.key_packets.len() != file.key_details.len() {
            return Err(Error::Model(format!(
                "{} key packets but {} detail entries",
                file.key_packets.len(),
                file.key_details.len()
            )));
        }
        Ok(DeviceFingerprintModel {
            device_id: file.device_id,
            t_w_us: file.t_w_us,
            key_packets: file.key_packets,
            key_details: file.key_details,
            shortfall: file.shortfall,
            matrix: file.matrix,
            float_tree: unflatten_tree(&file.float_tree)?,
            quant_tree: unflatten_tree(&file.quant_tree)?,
            embedding: file.embedding,
            extraction: file.extraction,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DeviceFingerprintModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DeviceFingerprintModel::from_json(&text, &path.display().to_string())
    }

    /// Exact float feature vector of a window, the control-plane view.
    pub fn float_features(&self, window: &Window, trace: &Trace) -> Vec<f64> {
        build_feature_vector(&window.sizes(trace), &self.key_packets, &self.matrix)
    }

    /// Register sums the data plane would accumulate for a window.
    pub fn quant_features(&self, window: &Window, trace: &Trace) -> Result<Vec<u32>> {
        quantized_feature_vector(&window.sizes(trace), &self.key_packets, &self.matrix)
    }
}

/// All knobs of the training pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub t_w_us: u64,
    /// Number of key packets to select (register dimensions).
    pub n_keys: usize,
    /// Similarity floor below which matrix entries truncate to zero.
    pub lambda: f64,
    /// Minimum occurrences for a size to enter the matrix vocabulary.
    pub min_freq: u64,
    pub max_leaves: usize,
    /// Seed for the train/validation/test window shuffle.
    pub split_seed: u64,
    pub embedding: TrainingConfig,
    pub extraction: ExtractionConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            t_w_us: 1_000_000,
            n_keys: 16,
            lambda: 0.4,
            min_freq: 10,
            max_leaves: 500,
            split_seed: 1,
            embedding: TrainingConfig::default(),
            extraction: ExtractionConfig::default(),
        }
    }
}

/// What training observed, for operators and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub vocab_size: usize,
    pub key_count: usize,
    pub shortfall: bool,
    pub float_leaves: usize,
    pub quant_leaves: usize,
    /// Train/validation/test window counts.
    pub windows: (usize, usize, usize),
    /// Confusion of the quantized tree on its own training windows.
    pub train_report: EvalReport,
    /// Confusion of the quantized tree on held-out validation windows.
    pub val_report: EvalReport,
    pub embed_stats: TrainStats,
}

/// Overlay the device's packets on background traffic so training windows
/// mix both. If the two traces cover overlapping absolute time spans they
/// are merged on the shared clock; otherwise each is first rebased to its
/// own start so the device does not land outside the background entirely.
/// Device packets are (re)labelled with `device_id`; ties in timestamp
/// order keep device packets first.
fn merge_for_training(device: &Trace, background: &Trace, device_id: &str) -> Trace {
    fn abs_span(t: &Trace) -> Option<(u64, u64)> {
        let first = t.records.first()?.timestamp_us;
        let last = t.records.last()?.timestamp_us;
        Some((t.epoch_us + first, t.epoch_us + last))
    }
    let overlap = match (abs_span(device), abs_span(background)) {
        (Some((d0, d1)), Some((b0, b1))) => d0.max(b0) <= d1.min(b1),
        _ => true, // one side empty: offsets are irrelevant
    };

    let base = if overlap { device.epoch_us.min(background.epoch_us) } else { 0 };
    let shift = |t: &Trace, r: &PacketRecord| -> u64 {
        if overlap {
            t.epoch_us - base + r.timestamp_us
        } else {
            r.timestamp_us - t.records.first().map_or(0, |f| f.timestamp_us)
        }
    };

    let mut dev: Vec<PacketRecord> = device
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.timestamp_us = shift(device, &r);
            r.device_label = Some(device_id.to_string());
            r
        })
        .collect();
    let mut bg: Vec<PacketRecord> = background
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.timestamp_us = shift(background, &r);
            r
        })
        .collect();
    dev.sort_by_key(|r| r.timestamp_us);
    bg.sort_by_key(|r| r.timestamp_us);

    let mut merged = Trace::new(Vec::new());
    merged.epoch_us = base;
    merged.records.reserve(dev.len() + bg.len());
    let (mut i, mut j) = (0, 0);
    while i < dev.len() && j < bg.len() {
        if dev[i].timestamp_us <= bg[j].timestamp_us {
            merged.records.push(dev[i].clone());
            i += 1;
        } else {
            merged.records.push(bg[j].clone());
            j += 1;
        }
    }
    merged.records.extend_from_slice(&dev[i..]);
    merged.records.extend_from_slice(&bg[j..]);
    merged
}

/// Train a complete device model: embedding on the device's traffic with
/// negatives from the background, neighboring-probability matrix, key
/// packet selection, then float and quantized decision trees on windowed
/// features of the merged traffic. Fully deterministic for fixed seeds.
pub fn train_device_model(
    device_id: &str,
    device: &Trace,
    background: &Trace,
    params: &TrainParams,
) -> Result<(DeviceFingerprintModel, TrainSummary)> {
    if device_id.is_empty() {
        return Err(Error::Config("device id is empty".into()));
    }
    if params.n_keys == 0 {
        return Err(Error::Config("n_keys must be at least 1".into()));
    }

    let (table, embed_stats) = train_embedding(device, background, &params.embedding)?;
    let matrix = build_matrix(&table, device, params.lambda, params.min_freq)?;

    let key_set = extract_key_packets(device, &params.extraction)?;
    let selection = select_top_n(&key_set, params.n_keys)?;
    let key_details: Vec<KeyPacketEntry> = selection
        .packets
        .iter()
        .map(|&p| {
            key_set
                .entries
                .iter()
                .find(|e| e.size == p)
                .cloned()
                .expect("selected key packet always comes from the extracted set")
        })
        .collect();

    let merged = merge_for_training(device, background, device_id);
    let windows = windowize(&merged, params.t_w_us)?;
    if windows.is_empty() {
        return Err(Error::Training("merged trace produced no windows".into()));
    }

    let mut float_samples = Vec::with_capacity(windows.len());
    let mut quant_samples = Vec::with_capacity(windows.len());
    for w in &windows {
        let label = u8::from(w.contains_device(&merged, device_id));
        let sizes = w.sizes(&merged);
        float_samples.push((build_feature_vector(&sizes, &selection.packets, &matrix), label));
        let q = quantized_feature_vector(&sizes, &selection.packets, &matrix)?;
        // u32 -> f64 is exact, so quantized training sees the true sums.
        quant_samples.push((q.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>(), label));
    }

    let idx: Vec<usize> = (0..windows.len()).collect();
    let (train_idx, val_idx, test_idx) = split_windows(idx, (4, 3, 3), params.split_seed)?;
    if train_idx.is_empty() {
        return Err(Error::Training("train split is empty".into()));
    }

    let pick = |idx: &[usize], s: &[(Vec<f64>, u8)]| -> Vec<(Vec<f64>, u8)> {
        idx.iter().map(|&i| s[i].clone()).collect()
    };
    let float_tree = train_tree(&pick(&train_idx, &float_samples), params.max_leaves)?;
    let quant_tree = train_tree(&pick(&train_idx, &quant_samples), params.max_leaves)?;

    let report = |idx: &[usize]| -> Result<EvalReport> {
        let pairs = idx
            .iter()
            .map(|&i| {
                let (v, label) = &quant_samples[i];
                Ok((quant_tree.predict(v)? == 1, *label == 1))
            })
            .collect::<Result<Vec<(bool, bool)>>>()?;
        Ok(EvalReport::from_pairs(device_id, pairs))
    };
    let train_report = report(&train_idx)?;
    let val_report = report(&val_idx)?;

    let summary = TrainSummary {
        vocab_size: matrix.len(),
        key_count: selection.packets.len(),
        shortfall: selection.shortfall,
        float_leaves: float_tree.leaf_count(),
        quant_leaves: quant_tree.leaf_count(),
        windows: (train_idx.len(), val_idx.len(), test_idx.len()),
        train_report,
        val_report,
        embed_stats,
    };
    let model = DeviceFingerprintModel {
        device_id: device_id.to_string(),
        t_w_us: params.t_w_us,
        key_packets: selection.packets,
        key_details,
        shortfall: selection.shortfall,
        matrix,
        float_tree,
        quant_tree,
        embedding: params.embedding.clone(),
        extraction: params.extraction.clone(),
    };
    Ok((model, summary))
}
