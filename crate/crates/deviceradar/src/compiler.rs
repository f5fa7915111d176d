//! Compile a trained device model into switch-style match-action tables: a
//! direction table, an 8-bit quantized probability table, the stateful
//! register layout, and per-leaf range-match inference rules — everything
//! the data-plane simulator executes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{DecisionTree, TreeNode};
use crate::matrix::NeighborProbMatrix;
use crate::model::DeviceFingerprintModel;
use crate::trace::{Direction, DirectionalPacketSize, DIRECTION_OFFSET};

/// Single-stage rule budget; a tree with more leaves cannot be deployed.
pub const MAX_INFERENCE_RULES: usize = 500;
/// Host slots per register array: one 16-bit hash of the source address.
pub const IP_SIZE: usize = 65536;
pub const REGISTER_WIDTH_BITS: u32 = 32;

/// Map a probability in [0, 1] to 8 bits by scaling to 255 and rounding
/// down; the error introduced is strictly below 1/255.
pub fn quantize_prob(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
    }
    Ok((p * 255.0).floor() as u8)
}

/// Quantized probability-table row for one directional size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedProbRow {
    pub dir_size: DirectionalPacketSize,
    pub probs: Vec<u8>,
}

/// One leaf of the quantized tree as an inclusive range match per register
/// dimension, fired only when the window-timeout flag is set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRule {
    pub priority: u32,
    pub ranges: Vec<(u32, u32)>,
    /// Exact match on the timeout metadata bit; always 1.
    pub timeout_match: u8,
    pub label: u8,
}

impl InferenceRule {
    /// Inclusive hyper-rectangle membership test.
    pub fn matches(&self, v: &[u32]) -> bool {
        v.len() == self.ranges.len()
            && v.iter().zip(&self.ranges).all(|(x, (lo, hi))| lo <= x && x <= hi)
    }
}

/// Direction-table entry: packets with direction code `dir` get `offset`
/// added to their IP length. Metadata-only in the simulator, kept for
/// structural fidelity to the hardware pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionRule {
    pub dir: u8,
    pub offset: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterSpec {
    pub width_bits: u32,
    pub dims: usize,
    pub ip_slots: usize,
}

/// Everything one device needs on the data plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompiledTableSet {
    pub device_id: String,
    pub t_w_us: u64,
    pub direction_rules: [DirectionRule; 2],
    /// One row per vocabulary size, ascending; lookups outside the
    /// vocabulary hit the implicit all-zero default row.
    pub prob_rows: Vec<QuantizedProbRow>,
    pub inference_rules: Vec<InferenceRule>,
    pub register_spec: RegisterSpec,
}

impl CompiledTableSet {
    /// Probability-table lookup with the all-zero default on a miss.
    pub fn quantized_probs(&self, p: DirectionalPacketSize) -> Vec<u8> {
        match self.prob_rows.binary_search_by_key(&p, |r| r.dir_size) {
            Ok(i) => self.prob_rows[i].probs.clone(),
            Err(_) => vec![0; self.register_spec.dims],
        }
    }

    /// Label of the unique inference rule matching the snapshot, if any.
    pub fn match_label(&self, v: &[u32]) -> Option<u8> {
        self.inference_rules.iter().find(|r| r.matches(v)).map(|r| r.label)
    }
}

/// One quantized row per matrix-vocabulary size:
/// `probs[j] = floor(255 * M[p, key_j])`.
pub fn compile_probability_table(
    matrix: &NeighborProbMatrix,
    keys: &[DirectionalPacketSize],
) -> Result<Vec<QuantizedProbRow>> {
    matrix
        .sizes()
        .iter()
        .map(|&p| {
            let probs = keys
                .iter()
                .map(|&k| quantize_prob(matrix.neighbor_prob(p, k)))
                .collect::<Result<Vec<u8>>>()?;
            Ok(QuantizedProbRow { dir_size: p, probs })
        })
        .collect()
}

/// Translate each root-to-leaf path into a range rule. A comparison
/// `v[j] <= t` tightens the left child's upper bound to floor(t) and the
/// right child's lower bound to floor(t)+1 — exact, because deployed
/// features are integer register values. Unconstrained dimensions span the
/// full 32-bit range.
pub fn tree_to_rules(tree: &DecisionTree) -> Result<Vec<InferenceRule>> {
    let leaves = tree.leaf_count();
    if leaves > MAX_INFERENCE_RULES {
        return Err(Error::Compile(format!(
            "tree has {leaves} leaves, over the {MAX_INFERENCE_RULES}-rule stage budget"
        )));
    }
    fn walk(node: &TreeNode, ranges: &mut [(u32, u32)], out: &mut Vec<InferenceRule>) -> Result<()> {
        match node {
            TreeNode::Leaf { label, .. } => {
                out.push(InferenceRule {
                    priority: out.len() as u32 + 1,
                    ranges: ranges.to_vec(),
                    timeout_match: 1,
                    label: *label,
                });
                Ok(())
            }
            TreeNode::Split { feature, threshold, left, right } => {
                let j = *feature;
                let t = threshold.floor();
                let (lo, hi) = ranges[j];
                // Left: v[j] <= floor(t).
                if t < 0.0 {
                    return Err(Error::Compile(format!(
                        "threshold {threshold} leaves no unsigned values on the left"
                    )));
                }
                let left_hi = if t >= u32::MAX as f64 { u32::MAX } else { t as u32 };
                if left_hi < lo {
                    return Err(Error::Compile("unreachable left leaf region".into()));
                }
                ranges[j] = (lo, left_hi.min(hi));
                walk(left, ranges, out)?;
                // Right: v[j] >= floor(t) + 1.
                if left_hi == u32::MAX {
                    return Err(Error::Compile("unreachable right leaf region".into()));
                }
                let right_lo = left_hi + 1;
                if right_lo > hi {
                    return Err(Error::Compile("unreachable right leaf region".into()));
                }
                ranges[j] = (right_lo.max(lo), hi);
                walk(right, ranges, out)?;
                ranges[j] = (lo, hi);
                Ok(())
            }
        }
    }
    let mut rules = Vec::with_capacity(leaves);
    let mut full = vec![(0u32, u32::MAX); tree.dim()];
    walk(tree.root(), &mut full, &mut rules)?;
    Ok(rules)
}

/// Assemble the full table set from a trained model. Pure: the
/// quantization-aware tree is already stored in the model, so compiling the
/// same model twice yields identical tables.
pub fn compile(model: &DeviceFingerprintModel) -> Result<CompiledTableSet> {
    let keys = &model.key_packets;
    if keys.is_empty() {
        return Err(Error::EmptyModel("model has no key packets".into()));
    }
    if model.quant_tree.dim() != keys.len() {
        return Err(Error::Compile(format!(
            "tree dimension {} does not match {} key packets",
            model.quant_tree.dim(),
            keys.len()
        )));
    }
    Ok(CompiledTableSet {
        device_id: model.device_id.clone(),
        t_w_us: model.t_w_us,
        direction_rules: [
            DirectionRule { dir: Direction::LanToWan.code(), offset: 0 },
            DirectionRule { dir: Direction::WanToLan.code(), offset: DIRECTION_OFFSET },
        ],
        prob_rows: compile_probability_table(&model.matrix, keys)?,
        inference_rules: tree_to_rules(&model.quant_tree)?,
        register_spec: RegisterSpec {
            width_bits: REGISTER_WIDTH_BITS,
            dims: keys.len(),
            ip_slots: IP_SIZE,
        },
    })
}

/// Control-plane reference for the register math: per-packet quantized
/// probability rows summed with wrapping 32-bit addition, exactly as the
/// data plane accumulates them.
pub fn quantized_feature_vector(
    packets: &[DirectionalPacketSize],
    keys: &[DirectionalPacketSize],
    matrix: &NeighborProbMatrix,
) -> Result<Vec<u32>> {
    let mut v = vec![0u32; keys.len()];
    for &p in packets {
        for (j, &k) in keys.iter().enumerate() {
            v[j] = v[j].wrapping_add(u32::from(quantize_prob(matrix.neighbor_prob(p, k))?));
        }
    }
    Ok(v)
}

const RULES_MAGIC: &str = "deviceradar-rules v1";

/// Render the table set in the line-oriented rule-installation format:
/// a fixed header, then one `table=... priority=... match=... action=...`
/// line per rule, in stable order.
pub fn export_rules(set: &CompiledTableSet) -> String {
    let mut out = String::new();
    out.push_str(RULES_MAGIC);
    out.push('\n');
    out.push_str(&format!("device_id={}\n", set.device_id));
    out.push_str(&format!("tw_us={}\n", set.t_w_us));
    out.push_str(&format!("n_keys={}\n", set.register_spec.dims));
    out.push_str(&format!("register_width={}\n", set.register_spec.width_bits));
    out.push_str(&format!("ip_slots={}\n", set.register_spec.ip_slots));
    for (i, d) in set.direction_rules.iter().enumerate() {
        out.push_str(&format!(
            "table=direction priority={} match=dir:{} action=set_dir_size({})\n",
            i + 1,
            d.dir,
            d.offset
        ));
    }
    for (i, row) in set.prob_rows.iter().enumerate() {
        let probs: Vec<String> = row.probs.iter().map(u8::to_string).collect();
        out.push_str(&format!(
            "table=prob priority={} match=dir_size:{} action=set_probs({})\n",
            i + 1,
            row.dir_size.value(),
            probs.join(",")
        ));
    }
    let zeros = vec!["0"; set.register_spec.dims];
    out.push_str(&format!(
        "table=prob priority={} match=default action=set_probs({})\n",
        set.prob_rows.len() + 1,
        zeros.join(",")
    ));
    for r in &set.inference_rules {
        let mut fields = vec![format!("timeout:{}", r.timeout_match)];
        for (j, (lo, hi)) in r.ranges.iter().enumerate() {
            fields.push(format!("v{j}:{lo}..{hi}"));
        }
        out.push_str(&format!(
            "table=inference priority={} match={} action=set_label({})\n",
            r.priority,
            fields.join(","),
            r.label
        ));
    }
    out
}

/// Parse text produced by [`export_rules`]. `origin` names the source in
/// errors (a path, usually).
pub fn import_rules(text: &str, origin: &str) -> Result<CompiledTableSet> {
    let err = |line: usize, msg: String| Error::parse(origin, line, msg);
    let mut lines = text.lines().enumerate();
    let (_, magic) =
        lines.next().ok_or_else(|| err(0, "empty rule file".into()))?;
    if magic != RULES_MAGIC {
        return Err(err(1, format!("bad magic line {magic:?}")));
    }

    let mut header = |expect: &str| -> Result<String> {
        let (i, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing header {expect}")))?;
        line.strip_prefix(expect)
            .and_then(|rest| rest.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| err(i + 1, format!("expected {expect}=..., got {line:?}")))
    };
    let device_id = header("device_id")?;
    let t_w_us: u64 =
        header("tw_us")?.parse().map_err(|e| err(3, format!("bad tw_us: {e}")))?;
    let dims: usize =
        header("n_keys")?.parse().map_err(|e| err(4, format!("bad n_keys: {e}")))?;
    let width_bits: u32 = header("register_width")?
        .parse()
        .map_err(|e| err(5, format!("bad register_width: {e}")))?;
    let ip_slots: usize =
        header("ip_slots")?.parse().map_err(|e| err(6, format!("bad ip_slots: {e}")))?;

    let mut direction_rules: Vec<DirectionRule> = Vec::new();
    let mut prob_rows: Vec<QuantizedProbRow> = Vec::new();
    let mut saw_default = false;
    let mut inference_rules: Vec<InferenceRule> = Vec::new();

    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut table = None;
        let mut priority = None;
        let mut matches = None;
        let mut action = None;
        for part in line.split(' ') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err(n, format!("bad token {part:?}")))?;
            match k {
                "table" => table = Some(v),
                "priority" => priority = Some(v),
                "match" => matches = Some(v),
                "action" => action = Some(v),
                _ => return Err(err(n, format!("unknown field {k:?}"))),
            }
        }
        let (Some(table), Some(priority), Some(matches), Some(action)) =
            (table, priority, matches, action)
        else {
            return Err(err(n, "rule line missing fields".into()));
        };
        let priority: u32 =
            priority.parse().map_err(|e| err(n, format!("bad priority: {e}")))?;
        let args = |name: &str| -> Result<String> {
            action
                .strip_prefix(name)
                .and_then(|rest| rest.strip_prefix('('))
                .and_then(|rest| rest.strip_suffix(')'))
                .map(str::to_string)
                .ok_or_else(|| err(n, format!("expected action {name}(...), got {action:?}")))
        };
        match table {
            "direction" => {
                let dir: u8 = matches
                    .strip_prefix("dir:")
                    .ok_or_else(|| err(n, "direction match must be dir:<code>".into()))?
                    .parse()
                    .map_err(|e| err(n, format!("bad dir: {e}")))?;
                let offset: u16 = args("set_dir_size")?
                    .parse()
                    .map_err(|e| err(n, format!("bad offset: {e}")))?;
                direction_rules.push(DirectionRule { dir, offset });
            }
            "prob" => {
                let probs = args("set_probs")?
                    .split(',')
                    .map(|s| s.parse::<u8>())
                    .collect::<std::result::Result<Vec<u8>, _>>()
                    .map_err(|e| err(n, format!("bad prob value: {e}")))?;
                if probs.len() != dims {
                    return Err(err(n, format!("row has {} probs, expected {dims}", probs.len())));
                }
                if matches == "default" {
                    if probs.iter().any(|&p| p != 0) {
                        return Err(err(n, "default row must be all zeros".into()));
                    }
                    saw_default = true;
                } else {
                    let v: u16 = matches
                        .strip_prefix("dir_size:")
                        .ok_or_else(|| err(n, "prob match must be dir_size:<value>".into()))?
                        .parse()
                        .map_err(|e| err(n, format!("bad dir_size: {e}")))?;
                    let dir_size = DirectionalPacketSize::from_value(v)
                        .map_err(|e| err(n, e.to_string()))?;
                    prob_rows.push(QuantizedProbRow { dir_size, probs });
                }
            }
            "inference" => {
                let label: u8 =
                    args("set_label")?.parse().map_err(|e| err(n, format!("bad label: {e}")))?;
                let mut timeout_match = None;
                let mut ranges = vec![(0u32, u32::MAX); dims];
                let mut seen = vec![false; dims];
                for field in matches.split(',') {
                    let (name, val) = field
                        .split_once(':')
                        .ok_or_else(|| err(n, format!("bad match field {field:?}")))?;
                    if name == "timeout" {
                        timeout_match =
                            Some(val.parse::<u8>().map_err(|e| err(n, format!("bad timeout: {e}")))?);
                        continue;
                    }
                    let j: usize = name
                        .strip_prefix('v')
                        .ok_or_else(|| err(n, format!("unknown match field {name:?}")))?
                        .parse()
                        .map_err(|e| err(n, format!("bad register index: {e}")))?;
                    if j >= dims {
                        return Err(err(n, format!("register v{j} out of range")));
                    }
                    let (lo, hi) = val
                        .split_once("..")
                        .ok_or_else(|| err(n, format!("range {val:?} must be lo..hi")))?;
                    let lo: u32 = lo.parse().map_err(|e| err(n, format!("bad lo: {e}")))?;
                    let hi: u32 = hi.parse().map_err(|e| err(n, format!("bad hi: {e}")))?;
                    ranges[j] = (lo, hi);
                    seen[j] = true;
                }
                if !seen.iter().all(|&s| s) {
                    return Err(err(n, "inference rule missing a register range".into()));
                }
                inference_rules.push(InferenceRule {
                    priority,
                    ranges,
                    timeout_match: timeout_match
                        .ok_or_else(|| err(n, "inference rule missing timeout match".into()))?,
                    label,
                });
            }
            other => return Err(err(n, format!("unknown table {other:?}"))),
        }
    }

    if direction_rules.len() != 2 {
        return Err(err(0, format!("expected 2 direction rules, got {}", direction_rules.len())));
    }
    if !saw_default {
        return Err(err(0, "missing default probability row".into()));
    }
    Ok(CompiledTableSet {
        device_id,
        t_w_us,
        direction_rules: [direction_rules[0], direction_rules[1]],
        prob_rows,
        inference_rules,
        register_spec: RegisterSpec { width_bits, dims, ip_slots },
    })
}

pub fn write_rules_file(set: &CompiledTableSet, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, export_rules(set)).map_err(|e| Error::io(path, e))
}

pub fn read_rules_file(path: &std::path::Path) -> Result<CompiledTableSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    import_rules(&text, &path.display().to_string())
}
