//! Middlebox emulation and evaluation plumbing: NAT/VPN trace mixing,
//! synthetic device and background generators, dataset splitting, packet
//! labelling, and windowed accuracy metrics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use crate::error::{Error, Result};
use crate::fingerprint::windowize;
use crate::sim::Detection;
use crate::trace::{Direction, DirectionalPacketSize, L4Proto, PacketRecord, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixMode {
    Nat,
    Vpn,
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMode::Nat => "nat",
            MixMode::Vpn => "vpn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub mode: MixMode,
    /// External address every source is rewritten to in NAT mode.
    pub nat_ip: Ipv4Addr,
    /// Bytes the tunnel adds to each packet in VPN mode; the rewritten size
    /// is capped at 1500.
    pub vpn_overhead_bytes: u16,
    /// The single 5-tuple every VPN packet is collapsed onto:
    /// (src_ip, dst_ip, src_port, dst_port, proto).
    pub vpn_tuple: (Ipv4Addr, Ipv4Addr, u16, u16, L4Proto),
    /// Offsets the NAT port-translation counter; any bijection works since
    /// ports never feed the models.
    pub rng_seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            mode: MixMode::Nat,
            nat_ip: Ipv4Addr::new(203, 0, 113, 1),
            vpn_overhead_bytes: 49,
            vpn_tuple: (
                Ipv4Addr::new(198, 51, 100, 1),
                Ipv4Addr::new(198, 51, 100, 2),
                1194,
                1194,
                L4Proto::Udp,
            ),
            rng_seed: 1,
        }
    }
}

/// Replay device traces and background through an emulated middlebox.
///
/// Every input is first shifted so its own first packet sits at t=0 (forcing
/// the streams to overlap), then merged stably by (timestamp, input order,
/// position). NAT rewrites every source to `nat_ip` with a deterministic
/// per-flow source-port translation and leaves sizes untouched; VPN collapses
/// the whole 5-tuple onto `vpn_tuple` and grows every size by the tunnel
/// overhead, capped at 1500. Ground-truth labels ride along out-of-band.
pub fn mix_traces(iot: &[Trace], background: &Trace, cfg: &MixConfig) -> Result<Trace> {
    let mut merged: Vec<(u64, usize, usize, PacketRecord)> = Vec::new();
    let streams = iot.iter().chain(std::iter::once(background));
    for (idx, tr) in streams.enumerate() {
        let base = tr.records.first().map(|r| r.timestamp_us).unwrap_or(0);
        for (pos, r) in tr.records.iter().enumerate() {
            let mut m = r.clone();
            m.timestamp_us = r.timestamp_us - base;
            merged.push((m.timestamp_us, idx, pos, m));
        }
    }
    merged.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    let mut records: Vec<PacketRecord> = merged.into_iter().map(|(_, _, _, m)| m).collect();

    match cfg.mode {
        MixMode::Nat => {
            let mut port_of: BTreeMap<(Ipv4Addr, u16, L4Proto), u16> = BTreeMap::new();
            let mut next_port: u16 = 1024u16.wrapping_add((cfg.rng_seed % 30000) as u16);
            for m in &mut records {
                let flow = (m.src_ip, m.src_port, m.l4_proto);
                let port = *port_of.entry(flow).or_insert_with(|| {
                    let p = next_port;
                    next_port = if next_port == u16::MAX { 1024 } else { next_port + 1 };
                    p
                });
                m.src_ip = cfg.nat_ip;
                m.src_port = port;
            }
        }
        MixMode::Vpn => {
            let (src_ip, dst_ip, src_port, dst_port, proto) = cfg.vpn_tuple;
            for m in &mut records {
                m.src_ip = src_ip;
                m.dst_ip = dst_ip;
                m.src_port = src_port;
                m.dst_port = dst_port;
                m.l4_proto = proto;
                m.ip_total_len =
                    (u32::from(m.ip_total_len) + u32::from(cfg.vpn_overhead_bytes)).min(1500)
                        as u16;
            }
        }
    }
    Ok(Trace::new(records))
}

/// One periodic traffic pattern of a synthetic device: a fixed run of
/// directional sizes sent to (or from) one service endpoint every period.
#[derive(Clone, Debug)]
pub struct BurstSpec {
    pub sizes: Vec<DirectionalPacketSize>,
    pub period_us: u64,
    /// Burst starts land at k*period + uniform(±jitter*period); in [0, 1).
    pub jitter: f64,
    pub service_ip: Ipv4Addr,
    pub service_port: u16,
    pub proto: L4Proto,
}

#[derive(Clone, Debug)]
pub struct DeviceSpec {
    pub device_id: String,
    pub lan_ip: Ipv4Addr,
    pub lan_port: u16,
    pub bursts: Vec<BurstSpec>,
}

/// Microseconds between packets of the same burst; far below any sane
/// burst-gap threshold so a burst is never split.
pub const INTRA_BURST_GAP_US: u64 = 2_000;

/// Emit a device's periodic bursts over `[0, duration]`. Burst starts are
/// anchored to the period grid with uniform jitter, so burst intervals keep
/// a low coefficient of variation even over long runs. Every packet carries
/// the device label.
pub fn generate_synthetic_device(
    spec: &DeviceSpec,
    duration_us: u64,
    rng: &mut impl Rng,
) -> Result<Trace> {
    for b in &spec.bursts {
        if b.period_us == 0 {
            return Err(Error::Config("burst period must be positive".into()));
        }
        if !(0.0..1.0).contains(&b.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, 1)", b.jitter)));
        }
        if b.sizes.is_empty() {
            return Err(Error::Config("burst needs at least one packet size".into()));
        }
    }
    let mut records: Vec<PacketRecord> = Vec::new();
    for b in &spec.bursts {
        let mut k: u64 = 1;
        while k.saturating_mul(b.period_us) <= duration_us {
            let grid = (k * b.period_us) as f64;
            let offset = if b.jitter > 0.0 {
                rng.gen_range(-b.jitter..=b.jitter) * b.period_us as f64
            } else {
                0.0
            };
            let start = (grid + offset).max(0.0) as u64;
            for (i, &sz) in b.sizes.iter().enumerate() {
                let ts = start + i as u64 * INTRA_BURST_GAP_US;
                let (direction, src_ip, dst_ip, src_port, dst_port) = match sz.direction() {
                    Direction::LanToWan => {
                        (Direction::LanToWan, spec.lan_ip, b.service_ip, spec.lan_port, b.service_port)
                    }
                    Direction::WanToLan => {
                        (Direction::WanToLan, b.service_ip, spec.lan_ip, b.service_port, spec.lan_port)
                    }
                };
                records.push(PacketRecord {
                    timestamp_us: ts,
                    src_ip,
                    dst_ip,
                    src_port,
                    dst_port,
                    l4_proto: b.proto,
                    ip_total_len: sz.size(),
                    direction,
                    device_label: Some(spec.device_id.clone()),
                });
            }
            k += 1;
        }
    }
    records.sort_by_key(|r| r.timestamp_us);
    Ok(Trace::new(records))
}

/// One component of the background size mixture: sizes drawn uniformly from
/// `[lo, hi]` with relative `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeBand {
    pub weight: f64,
    pub lo: u16,
    pub hi: u16,
}

/// Bimodal default imitating wide-area traffic: a strong mode of small
/// packets, a thin middle, and a strong near-MTU mode.
pub fn default_size_bands() -> Vec<SizeBand> {
    vec![
        SizeBand { weight: 0.40, lo: 40, hi: 100 },
        SizeBand { weight: 0.30, lo: 101, hi: 1399 },
        SizeBand { weight: 0.30, lo: 1400, hi: 1500 },
    ]
}

/// Poisson background traffic from a pool of LAN hosts talking to random
/// WAN endpoints, both directions, sizes drawn from the band mixture.
pub fn generate_synthetic_background(
    rate_pps: f64,
    bands: &[SizeBand],
    n_hosts: u32,
    duration_us: u64,
    rng: &mut impl Rng,
) -> Result<Trace> {
    if !(rate_pps > 0.0) || !rate_pps.is_finite() {
        return Err(Error::Config(format!("background rate {rate_pps} must be positive")));
    }
    if n_hosts == 0 {
        return Err(Error::Config("background needs at least one host".into()));
    }
    if bands.is_empty() {
        return Err(Error::Config("background needs at least one size band".into()));
    }
    let mut total_weight = 0.0;
    for b in bands {
        if !(b.weight > 0.0) || b.lo > b.hi || b.lo < 20 || b.hi > 1500 {
            return Err(Error::Config(format!(
                "bad size band: weight {} range [{}, {}]",
                b.weight, b.lo, b.hi
            )));
        }
        total_weight += b.weight;
    }

    let mut records = Vec::new();
    let mut t = 0.0f64;
    loop {
        // Exponential inter-arrival; 1-U keeps the argument away from ln(0).
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / rate_pps * 1e6;
        if !(t < duration_us as f64) {
            break;
        }
        let host_idx = rng.gen_range(0..n_hosts);
        let lan = Ipv4Addr::new(10, 200, (host_idx >> 8) as u8, (host_idx & 0xff) as u8);
        let wan = Ipv4Addr::new(93, 184, rng.gen_range(0..4u8), rng.gen_range(1..255u8));
        let mut pick = rng.gen::<f64>() * total_weight;
        let mut len = bands[bands.len() - 1].lo;
        for b in bands {
            if pick < b.weight {
                len = rng.gen_range(b.lo..=b.hi);
                break;
            }
            pick -= b.weight;
        }
        let lan_port = rng.gen_range(1024..u16::MAX);
        let wan_port = if rng.gen_bool(0.5) { 443 } else { rng.gen_range(1..1024) };
        let proto = if rng.gen_bool(0.7) { L4Proto::Tcp } else { L4Proto::Udp };
        let rec = if rng.gen_bool(0.5) {
            PacketRecord {
                timestamp_us: t as u64,
                src_ip: lan,
                dst_ip: wan,
                src_port: lan_port,
                dst_port: wan_port,
                l4_proto: proto,
                ip_total_len: len,
                direction: Direction::LanToWan,
                device_label: None,
            }
        } else {
            PacketRecord {
                timestamp_us: t as u64,
                src_ip: wan,
                dst_ip: lan,
                src_port: wan_port,
                dst_port: lan_port,
                l4_proto: proto,
                ip_total_len: len,
                direction: Direction::WanToLan,
                device_label: None,
            }
        };
        records.push(rec);
    }
    Ok(Trace::new(records))
}

/// Shuffle with the seed and split by the ratio; floor shares first, then
/// leftovers go one each to train, then validation, then test.
pub fn split_windows<T>(
    mut samples: Vec<T>,
    ratio: (u32, u32, u32),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if samples.is_empty() {
        return Err(Error::Config("cannot split an empty sample set".into()));
    }
    let total = u64::from(ratio.0) + u64::from(ratio.1) + u64::from(ratio.2);
    if total == 0 {
        return Err(Error::Config("split ratio sums to zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n = samples.len() as u64;
    let mut share =
        [n * u64::from(ratio.0) / total, n * u64::from(ratio.1) / total, n * u64::from(ratio.2) / total];
    let mut rem = n - (share[0] + share[1] + share[2]);
    for s in share.iter_mut() {
        if rem == 0 {
            break;
        }
        *s += 1;
        rem -= 1;
    }
    let test = samples.split_off((share[0] + share[1]) as usize);
    let val = samples.split_off(share[0] as usize);
    Ok((samples, val, test))
}

/// Windowed confusion counts for one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub device_id: String,
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "device_id,windows,tp,fp,tn,fn,precision,recall,fpr,base_rate";

    /// Tally (predicted, actual) pairs, one per window.
    pub fn from_pairs(device_id: &str, pairs: impl IntoIterator<Item = (bool, bool)>) -> EvalReport {
        let mut r = EvalReport {
            device_id: device_id.to_string(),
            true_pos: 0,
            false_pos: 0,
            true_neg: 0,
            false_neg: 0,
        };
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => r.true_pos += 1,
                (true, false) => r.false_pos += 1,
                (false, false) => r.true_neg += 1,
                (false, true) => r.false_neg += 1,
            }
        }
        r
    }

    pub fn windows(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// TP / (TP + FP); None when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    /// TP / (TP + FN); None when no window was actually positive.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    /// FP / (FP + TN); None when no window was actually negative.
    pub fn false_positive_rate(&self) -> Option<f64> {
        ratio(self.false_pos, self.false_pos + self.true_neg)
    }

    /// Fraction of windows that truly contain the device.
    pub fn base_rate(&self) -> Option<f64> {
        ratio(self.true_pos + self.false_neg, self.windows())
    }

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.device_id,
            self.windows(),
            self.true_pos,
            self.false_pos,
            self.true_neg,
            self.false_neg,
            cell(self.precision()),
            cell(self.recall()),
            cell(self.false_positive_rate()),
            cell(self.base_rate()),
        )
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        write!(
            f,
            "device={} windows={} tp={} fp={} tn={} fn={} precision={} recall={} fpr={} base_rate={}",
            self.device_id,
            self.windows(),
            self.true_pos,
            self.false_pos,
            self.true_neg,
            self.false_neg,
            cell(self.precision()),
            cell(self.recall()),
            cell(self.false_positive_rate()),
            cell(self.base_rate()),
        )
    }
}

/// Ground truth for one window: does it hold at least one device packet?
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthWindow {
    pub ip_key: u32,
    pub window_start_us: u64,
    pub positive: bool,
}

/// Windowize a labelled trace and mark each window positive iff it contains
/// at least one packet of the device.
pub fn ground_truth_windows(
    trace: &Trace,
    device_id: &str,
    t_w_us: u64,
) -> Result<Vec<GroundTruthWindow>> {
    Ok(windowize(trace, t_w_us)?
        .iter()
        .map(|w| GroundTruthWindow {
            ip_key: w.ip_key,
            window_start_us: w.start_us,
            positive: w.contains_device(trace, device_id),
        })
        .collect())
}

/// Recover labels for a post-middlebox capture from a labelled pre-middlebox
/// capture of the same replay (both on the same time base). A rewritten
/// packet takes the label of an unused pre-middlebox packet with the same
/// direction whose timestamp differs by less than 0.02 seconds; in VPN mode
/// the pre-middlebox packet must additionally be shorter than the rewritten
/// one (encryption only adds bytes). Nearest-in-time candidates win.
pub fn label_by_matching(pre: &Trace, post: &Trace, mode: MixMode) -> Trace {
    const TOLERANCE_US: u64 = 20_000;
    let mut used = vec![false; pre.records.len()];
    let mut out = post.clone();
    let mut lo = 0usize;
    for m in &mut out.records {
        while lo < pre.records.len()
            && pre.records[lo].timestamp_us + TOLERANCE_US <= m.timestamp_us
        {
            lo += 1;
        }
        let mut best: Option<(u64, usize)> = None;
        for (i, p) in pre.records.iter().enumerate().skip(lo) {
            if p.timestamp_us >= m.timestamp_us + TOLERANCE_US {
                break;
            }
            if used[i] || p.device_label.is_none() || p.direction != m.direction {
                continue;
            }
            if mode == MixMode::Vpn && p.ip_total_len >= m.ip_total_len {
                continue;
            }
            let dt = p.timestamp_us.abs_diff(m.timestamp_us);
            if dt < TOLERANCE_US && best.is_none_or(|(bd, _)| dt < bd) {
                best = Some((dt, i));
            }
        }
        if let Some((_, i)) = best {
            used[i] = true;
            m.device_label = pre.records[i].device_label.clone();
        }
    }
    out
}

/// Packets of one device, picked out of a labelled mixture. Timestamps and
/// epoch are preserved so the result stays aligned with the mixture.
pub fn extract_device_trace(mixed: &Trace, device_id: &str) -> Trace {
    Trace {
        records: mixed
            .records
            .iter()
            .filter(|r| r.device_label.as_deref() == Some(device_id))
            .cloned()
            .collect(),
        epoch_us: mixed.epoch_us,
    }
}

/// The unlabelled remainder of a mixture.
pub fn extract_background_trace(mixed: &Trace) -> Trace {
    Trace {
        records: mixed.records.iter().filter(|r| r.device_label.is_none()).cloned().collect(),
        epoch_us: mixed.epoch_us,
    }
}

/// Score one device's detections against ground-truth windows, aligning
/// rows by exact (ip_key, window_start_us). A truth window with no
/// detection counts as predicted-negative (the pipeline only stays silent
/// about windows it saw nothing in). Detections for other devices are
/// ignored; detections that align with no truth window at all signal that
/// the two sides came from different traces or window lengths.
pub fn evaluate(
    device_id: &str,
    detections: &[Detection],
    truth: &[GroundTruthWindow],
) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::Eval("no ground-truth windows to score against".into()));
    }
    let mut predicted: BTreeMap<(u32, u64), bool> = BTreeMap::new();
    for d in detections.iter().filter(|d| d.device_id == device_id) {
        predicted.insert((d.ip_key, d.window_start_us), d.label == 1);
    }
    if !predicted.is_empty() {
        let aligned = truth
            .iter()
            .filter(|t| predicted.contains_key(&(t.ip_key, t.window_start_us)))
            .count();
        if aligned == 0 {
            return Err(Error::Eval(format!(
                "none of the {} detections align with any of the {} truth windows; \
                 were they produced from the same trace and window length?",
                predicted.len(),
                truth.len()
            )));
        }
    }
    let pairs = truth.iter().map(|t| {
        let p = predicted.get(&(t.ip_key, t.window_start_us)).copied().unwrap_or(false);
        (p, t.positive)
    });
    Ok(EvalReport::from_pairs(device_id, pairs))
}
