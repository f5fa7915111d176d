//! Key packet extraction: find the sizes a device emits on a stable period.
//!
//! Traffic is split per destination service, cut into bursts wherever the
//! inter-packet gap exceeds a threshold, and a destination whose burst start
//! times repeat regularly (low coefficient of variation) contributes all of
//! its burst sizes as key packets, stamped with the mean repetition period.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Direction, DirectionalPacketSize, L4Proto, PacketRecord, Trace};

/// Destination service a packet belongs to. Inbound packets are mirrored
/// onto the outbound flow's tuple (their source is the service).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DestTuple {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub proto: L4Proto,
}

impl DestTuple {
    pub fn of(record: &PacketRecord) -> DestTuple {
        match record.direction {
            Direction::LanToWan => {
                DestTuple { ip: record.dst_ip, port: record.dst_port, proto: record.l4_proto }
            }
            Direction::WanToLan => {
                DestTuple { ip: record.src_ip, port: record.src_port, proto: record.l4_proto }
            }
        }
    }
}

/// A run of packets with no internal gap larger than the burst threshold.
/// `ts_us` is the timestamp of the first packet.
#[derive(Clone, Debug, PartialEq)]
pub struct Burst {
    pub ts_us: u64,
    pub pkts: Vec<DirectionalPacketSize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyPacketEntry {
    pub size: DirectionalPacketSize,
    /// Mean interval between consecutive burst starts, microseconds.
    pub period_us: f64,
    /// Coefficient of variation of those intervals (population std / mean).
    pub cv: f64,
    pub dest: DestTuple,
}

/// Key packets of one device, deduplicated across destinations: a size seen
/// at several periodic services keeps its smallest period. Sorted by size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyPacketSet {
    pub entries: Vec<KeyPacketEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Inter-packet gap that closes a burst.
    pub burst_gap_us: u64,
    /// Destinations qualify only when cv of burst intervals is below this.
    pub cv_threshold: f64,
    /// Destinations qualify only with strictly more bursts than this.
    pub min_bursts: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { burst_gap_us: 1_000_000, cv_threshold: 0.2, min_bursts: 5 }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burst_gap_us == 0 {
            return Err(Error::Config("burst_gap_us must be positive".into()));
        }
        if !(self.cv_threshold > 0.0 && self.cv_threshold.is_finite()) {
            return Err(Error::Config(format!("bad cv_threshold {}", self.cv_threshold)));
        }
        Ok(())
    }
}

/// Indices `(lo, hi)` of maximal runs where consecutive timestamps are at
/// most `gap_us` apart. Records must be in timestamp order.
pub(crate) fn burst_spans(records: &[PacketRecord], gap_us: u64) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut lo = 0usize;
    for i in 1..records.len() {
        if records[i].timestamp_us - records[i - 1].timestamp_us > gap_us {
            spans.push((lo, i));
            lo = i;
        }
    }
    if !records.is_empty() {
        spans.push((lo, records.len()));
    }
    spans
}

/// Group a trace by destination service, preserving packet order within each
/// group. BTreeMap so iteration order is stable across runs.
pub fn split_by_destination(trace: &Trace) -> BTreeMap<DestTuple, Vec<PacketRecord>> {
    let mut groups: BTreeMap<DestTuple, Vec<PacketRecord>> = BTreeMap::new();
    for r in &trace.records {
        groups.entry(DestTuple::of(r)).or_default().push(r.clone());
    }
    groups
}

/// Cut one destination's packets into bursts.
pub fn extract_bursts(records: &[PacketRecord], gap_us: u64) -> Vec<Burst> {
    burst_spans(records, gap_us)
        .into_iter()
        .map(|(lo, hi)| Burst {
            ts_us: records[lo].timestamp_us,
            pkts: records[lo..hi].iter().map(|r| r.dir_size()).collect(),
        })
        .collect()
}

fn interval_stats(bursts: &[Burst]) -> Option<(f64, f64)> {
    if bursts.len() < 2 {
        return None;
    }
    let intervals: Vec<f64> =
        bursts.windows(2).map(|w| (w[1].ts_us - w[0].ts_us) as f64).collect();
    let mean = intervals.iter().sum::<f64>() / intervals.len() as f64;
    // Burst starts are separated by more than the gap threshold, so the mean
    // is always positive here.
    let var = intervals.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>()
        / intervals.len() as f64;
    Some((mean, var.sqrt() / mean))
}

/// Mine key packets from a device's own traffic. Destinations with fewer
/// than two bursts are skipped (no interval to measure), never an error.
pub fn extract_key_packets(device: &Trace, cfg: &ExtractionConfig) -> Result<KeyPacketSet> {
    cfg.validate()?;
    let mut best: BTreeMap<DirectionalPacketSize, KeyPacketEntry> = BTreeMap::new();
    for (dest, records) in split_by_destination(device) {
        let bursts = extract_bursts(&records, cfg.burst_gap_us);
        let Some((mean, cv)) = interval_stats(&bursts) else { continue };
        if !(cv < cfg.cv_threshold && bursts.len() > cfg.min_bursts) {
            continue;
        }
        for burst in &bursts {
            for &size in &burst.pkts {
                let entry = KeyPacketEntry { size, period_us: mean, cv, dest };
                match best.get(&size) {
                    Some(existing) if existing.period_us <= mean => {}
                    _ => {
                        best.insert(size, entry);
                    }
                }
            }
        }
    }
    Ok(KeyPacketSet { entries: best.into_values().collect() })
}

/// The selected key packets, shortest period first.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySelection {
    pub packets: Vec<DirectionalPacketSize>,
    /// True when the set held fewer than the requested n.
    pub shortfall: bool,
}

/// Pick the top `n` key packets by ascending period, breaking ties by
/// ascending size. Shorter periods close detection windows sooner.
pub fn select_top_n(set: &KeyPacketSet, n: usize) -> Result<KeySelection> {
    if set.entries.is_empty() {
        return Err(Error::EmptyModel("key packet set is empty".into()));
    }
    if n == 0 {
        return Err(Error::Config("cannot select zero key packets".into()));
    }
    let mut order: Vec<&KeyPacketEntry> = set.entries.iter().collect();
    order.sort_by(|a, b| {
        a.period_us
            .partial_cmp(&b.period_us)
            .expect("periods are finite")
            .then(a.size.cmp(&b.size))
    });
    let shortfall = order.len() < n;
    let packets = order.into_iter().take(n).map(|e| e.size).collect();
    Ok(KeySelection { packets, shortfall })
}
