//! Window feature vectors and the per-device binary decision tree.
//!
//! A device model scores one time window at a time: every packet in the
//! window adds its neighboring probability toward each key packet, so the
//! feature vector has one dimension per key packet regardless of window
//! size. A small CART tree trained on labelled windows then separates the
//! device's windows from background windows.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::NeighborProbMatrix;
use crate::trace::{DirectionalPacketSize, Trace};

/// Feature vector of one closed window. `v[j]` is the summed neighboring
/// probability of every observed packet toward key packet `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub v: Vec<f64>,
    pub window_start_us: u64,
    /// Source host the window belongs to (IPv4 address as an integer).
    pub ip_key: u32,
}

/// Sum each packet's neighboring probability toward every key packet.
/// Sizes outside the matrix vocabulary contribute nothing; an empty window
/// yields the zero vector.
pub fn build_feature_vector(
    packets: &[DirectionalPacketSize],
    keys: &[DirectionalPacketSize],
    matrix: &NeighborProbMatrix,
) -> Vec<f64> {
    let mut v = vec![0.0; keys.len()];
    for &p in packets {
        for (j, &key) in keys.iter().enumerate() {
            v[j] += matrix.neighbor_prob(p, key);
        }
    }
    v
}

/// Gini impurity `1 - sum(P_i^2)` of a node's class counts.
pub fn gini(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Training("impurity of an empty node is undefined".into()));
    }
    Ok(gini_of(counts, total))
}

fn gini_of(counts: &[u64], total: u64) -> f64 {
    let t = total as f64;
    let mut s = 0.0;
    for &c in counts {
        let p = c as f64 / t;
        s += p * p;
    }
    1.0 - s
}

/// One node of the binary tree. Internal nodes route `v[feature] <= threshold`
/// to the left child; leaves carry the training class counts they absorbed.
#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
    Leaf { label: u8, counts: [u64; 2] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    dim: usize,
    root: TreeNode,
}

impl DecisionTree {
    /// Wrap a hand-built or deserialized tree, checking feature indices,
    /// thresholds, and leaf labels against the declared dimension.
    pub fn new(dim: usize, root: TreeNode) -> Result<DecisionTree> {
        fn check(node: &TreeNode, dim: usize) -> Result<()> {
            match node {
                TreeNode::Leaf { label, .. } => {
                    if *label > 1 {
                        return Err(Error::Contract(format!("leaf label {label} is not binary")));
                    }
                    Ok(())
                }
                TreeNode::Split { feature, threshold, left, right } => {
                    if *feature >= dim {
                        return Err(Error::Contract(format!(
                            "split on feature {feature} but the tree has {dim} dimensions"
                        )));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::Contract("non-finite split threshold".into()));
                    }
                    check(left, dim)?;
                    check(right, dim)
                }
            }
        }
        check(&root, dim)?;
        Ok(DecisionTree { dim, root })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn leaf_count(&self) -> usize {
        fn count(node: &TreeNode) -> usize {
            match node {
                TreeNode::Leaf { .. } => 1,
                TreeNode::Split { left, right, .. } => count(left) + count(right),
            }
        }
        count(&self.root)
    }

    /// Route a feature vector to its leaf and return the leaf label.
    pub fn predict(&self, v: &[f64]) -> Result<u8> {
        if v.len() != self.dim {
            return Err(Error::Contract(format!(
                "feature vector has {} dimensions, tree expects {}",
                v.len(),
                self.dim
            )));
        }
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { label, .. } => return Ok(*label),
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if v[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }
}

enum ArenaNode {
    Leaf { label: u8, counts: [u64; 2] },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

struct Candidate {
    slot: usize,
    seq: usize,
    feature: usize,
    threshold: f64,
    decrease: f64,
    indices: Vec<u32>,
}

/// Grow a binary CART tree by repeatedly splitting the frontier leaf with
/// the largest weighted impurity decrease (best-first), stopping at
/// `max_leaves`, pure nodes, or when no candidate split improves.
///
/// Candidate thresholds are midpoints of consecutive distinct observed
/// values of each feature. A tie in impurity decrease keeps the lower
/// feature index, then the lower threshold; ties between frontier leaves
/// expand the earlier-created leaf first.
pub fn train_tree(samples: &[(Vec<f64>, u8)], max_leaves: usize) -> Result<DecisionTree> {
    if samples.is_empty() {
        return Err(Error::Training("cannot train a tree on zero samples".into()));
    }
    if max_leaves == 0 {
        return Err(Error::Config("max_leaves must be at least 1".into()));
    }
    let dim = samples[0].0.len();
    for (v, label) in samples {
        if v.len() != dim {
            return Err(Error::Training(format!(
                "inconsistent feature dimensions: {} vs {}",
                v.len(),
                dim
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Training("non-finite feature value".into()));
        }
        if *label > 1 {
            return Err(Error::Training(format!("label {label} is not binary")));
        }
    }

    let all: Vec<u32> = (0..samples.len() as u32).collect();
    let mut arena = vec![leaf_node(samples, &all)];
    let mut leaves = 1usize;
    let mut seq = 0usize;
    let mut pending: Vec<Candidate> = Vec::new();
    if let Some((feature, threshold, decrease)) = best_split(samples, &all, dim) {
        pending.push(Candidate { slot: 0, seq, feature, threshold, decrease, indices: all });
    }

    while leaves < max_leaves && !pending.is_empty() {
        let mut best = 0;
        for i in 1..pending.len() {
            let (a, b) = (&pending[i], &pending[best]);
            if a.decrease > b.decrease || (a.decrease == b.decrease && a.seq < b.seq) {
                best = i;
            }
        }
        let cand = pending.swap_remove(best);
        let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = cand
            .indices
            .iter()
            .copied()
            .partition(|&i| samples[i as usize].0[cand.feature] <= cand.threshold);
        debug_assert!(!left_idx.is_empty() && !right_idx.is_empty());
        let left_slot = arena.len();
        arena.push(leaf_node(samples, &left_idx));
        let right_slot = arena.len();
        arena.push(leaf_node(samples, &right_idx));
        arena[cand.slot] = ArenaNode::Split {
            feature: cand.feature,
            threshold: cand.threshold,
            left: left_slot,
            right: right_slot,
        };
        leaves += 1;
        for (slot, indices) in [(left_slot, left_idx), (right_slot, right_idx)] {
            if let Some((feature, threshold, decrease)) = best_split(samples, &indices, dim) {
                seq += 1;
                pending.push(Candidate { slot, seq, feature, threshold, decrease, indices });
            }
        }
    }

    DecisionTree::new(dim, materialize(&arena, 0))
}

fn leaf_node(samples: &[(Vec<f64>, u8)], indices: &[u32]) -> ArenaNode {
    let mut counts = [0u64; 2];
    for &i in indices {
        counts[samples[i as usize].1 as usize] += 1;
    }
    // Majority label; an exact tie resolves to 0 (background).
    let label = u8::from(counts[1] > counts[0]);
    ArenaNode::Leaf { label, counts }
}

/// Score every (feature, midpoint-threshold) candidate on the subset and
/// return the one with the largest weighted decrease `m*I - mL*IL - mR*IR`,
/// or None when nothing strictly improves. Features are scanned in
/// ascending index order and thresholds in ascending value order, so
/// keeping only strict improvements realizes the documented tie-break.
fn best_split(samples: &[(Vec<f64>, u8)], indices: &[u32], dim: usize) -> Option<(usize, f64, f64)> {
    let mut parent = [0u64; 2];
    for &i in indices {
        parent[samples[i as usize].1 as usize] += 1;
    }
    let m = indices.len();
    let parent_impurity = gini_of(&parent, m as u64);
    if parent_impurity == 0.0 {
        return None;
    }
    let m_f = m as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    let mut column: Vec<(f64, u8)> = Vec::with_capacity(m);
    for feature in 0..dim {
        column.clear();
        column.extend(indices.iter().map(|&i| {
            let (v, label) = &samples[i as usize];
            (v[feature], *label)
        }));
        column.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0u64; 2];
        let mut right = parent;
        for w in 0..m - 1 {
            left[column[w].1 as usize] += 1;
            right[column[w].1 as usize] -= 1;
            let (a, b) = (column[w].0, column[w + 1].0);
            if a == b {
                continue;
            }
            // Midpoint threshold; if rounding pushes it up to b, fall back to
            // a so that `value <= threshold` reproduces this exact partition.
            let mut threshold = (a + b) / 2.0;
            if threshold >= b {
                threshold = a;
            }
            let n_left = (w + 1) as u64;
            let n_right = (m - w - 1) as u64;
            let decrease = m_f * parent_impurity
                - n_left as f64 * gini_of(&left, n_left)
                - n_right as f64 * gini_of(&right, n_right);
            if decrease <= 0.0 {
                continue;
            }
            if best.is_none_or(|(_, _, d)| decrease > d) {
                best = Some((feature, threshold, decrease));
            }
        }
    }
    best
}

fn materialize(arena: &[ArenaNode], slot: usize) -> TreeNode {
    match &arena[slot] {
        ArenaNode::Leaf { label, counts } => TreeNode::Leaf { label: *label, counts: *counts },
        ArenaNode::Split { feature, threshold, left, right } => TreeNode::Split {
            feature: *feature,
            threshold: *threshold,
            left: Box::new(materialize(arena, *left)),
            right: Box::new(materialize(arena, *right)),
        },
    }
}

/// A closed per-host window: indices into the source trace of every packet
/// that fell inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub ip_key: u32,
    pub start_us: u64,
    pub packets: Vec<usize>,
}

impl Window {
    pub fn sizes(&self, trace: &Trace) -> Vec<DirectionalPacketSize> {
        self.packets.iter().map(|&i| trace.records[i].dir_size()).collect()
    }

    /// True when the window holds at least one packet of the named device.
    pub fn contains_device(&self, trace: &Trace, device_id: &str) -> bool {
        self.packets
            .iter()
            .any(|&i| trace.records[i].device_label.as_deref() == Some(device_id))
    }
}

/// Cut a trace (already in timestamp order) into per-source-host tumbling
/// windows of length `t_w_us`.
///
/// A host's first packet opens its window at that packet's timestamp; a
/// packet arriving at or past `start + t_w` closes the window and opens the
/// next one at its own timestamp. Re-aligning to the triggering packet
/// instead of ticking through idle gaps mirrors the data-plane register
/// reset, keeping offline windows identical to the simulator's. Windows
/// still open at end of trace are emitted as-is. Output is sorted by
/// (ip_key, start).
pub fn windowize(trace: &Trace, t_w_us: u64) -> Result<Vec<Window>> {
    if t_w_us == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let mut open: BTreeMap<u32, Window> = BTreeMap::new();
    let mut closed: Vec<Window> = Vec::new();
    for (i, r) in trace.records.iter().enumerate() {
        let key = u32::from(r.src_ip);
        match open.get_mut(&key) {
            None => {
                open.insert(
                    key,
                    Window { ip_key: key, start_us: r.timestamp_us, packets: vec![i] },
                );
            }
            Some(w) => {
                if r.timestamp_us >= w.start_us + t_w_us {
                    let done = std::mem::replace(
                        w,
                        Window { ip_key: key, start_us: r.timestamp_us, packets: vec![i] },
                    );
                    closed.push(done);
                } else {
                    w.packets.push(i);
                }
            }
        }
    }
    closed.extend(open.into_values());
    closed.sort_by(|a, b| (a.ip_key, a.start_us).cmp(&(b.ip_key, b.start_us)));
    Ok(closed)
}

/// Feature vector of one window of a trace.
pub fn window_feature(
    window: &Window,
    trace: &Trace,
    keys: &[DirectionalPacketSize],
    matrix: &NeighborProbMatrix,
) -> FeatureVector {
    let sizes = window.sizes(trace);
    FeatureVector {
        v: build_feature_vector(&sizes, keys, matrix),
        window_start_us: window.start_us,
        ip_key: window.ip_key,
    }
}
