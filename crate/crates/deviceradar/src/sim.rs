//! Software execution of compiled table sets over packet traces. The
//! per-packet work lives in [`hot`] and is integer-only; this module owns
//! table preparation, per-device orchestration (optionally across
//! threads), detection collection, stats, CSV persistence, and an optional
//! per-window additivity cross-check against the sparse control-plane
//! probability lookup.

pub mod hot;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::compiler::CompiledTableSet;
use crate::error::{Error, Result};
use crate::trace::{PacketRecord, Trace};
use hot::{HotRule, HotStats, HotTables, RawDetection, RegisterBank, TimeoutConvention};

/// One closed window as reported upward: which device pipeline, which
/// host, when the window opened, the rule verdict, and the register
/// snapshot behind it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detection {
    pub device_id: String,
    pub ip_key: u32,
    pub window_start_us: u64,
    pub label: u8,
    pub features: Vec<u32>,
}

#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    /// Worker threads across device pipelines; 1 keeps everything serial.
    pub jobs: usize,
    pub convention: TimeoutConvention,
    /// Re-derive every window's register sums through the sparse
    /// probability rows and fail on any mismatch with the snapshot.
    pub debug_window_checks: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            jobs: 1,
            convention: TimeoutConvention::TriggerOpens,
            debug_window_checks: false,
        }
    }
}

/// Detections and counters of one device pipeline.
#[derive(Clone, Debug)]
pub struct DeviceRun {
    pub device_id: String,
    pub detections: Vec<Detection>,
    pub stats: HotStats,
}

/// Whole-run summary across pipelines.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunStats {
    pub wall_seconds: f64,
    pub total_packets: u64,
    pub throughput_pps: f64,
    pub prob_hits: u64,
    pub prob_misses: u64,
    pub collisions: u64,
    pub detections: u64,
}

impl std::fmt::Display for RunStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "packets processed:  {}", self.total_packets)?;
        writeln!(f, "prob table hits:    {}", self.prob_hits)?;
        writeln!(f, "prob table misses:  {}", self.prob_misses)?;
        writeln!(f, "register collisions: {}", self.collisions)?;
        writeln!(f, "windows closed:     {}", self.detections)?;
        writeln!(f, "wall time:          {:.3} s", self.wall_seconds)?;
        write!(f, "throughput:         {:.0} packets/s", self.throughput_pps)
    }
}

#[derive(Debug)]
pub struct RunOutput {
    /// In the same order as the table sets passed in.
    pub per_device: Vec<DeviceRun>,
    pub stats: RunStats,
}

impl RunOutput {
    /// All detections in deterministic (device, emission) order.
    pub fn merged_detections(&self) -> Vec<Detection> {
        self.per_device.iter().flat_map(|d| d.detections.iter().cloned()).collect()
    }
}

/// Flatten a compiled table set into the dense integer form the hot loop
/// wants, validating everything the hot loop assumes.
pub fn build_hot_tables(set: &CompiledTableSet, convention: TimeoutConvention) -> Result<HotTables> {
    let dims = set.register_spec.dims;
    if dims == 0 {
        return Err(Error::Config(format!("device {} has zero register dimensions", set.device_id)));
    }
    if set.t_w_us == 0 || set.t_w_us > u64::from(u32::MAX) {
        return Err(Error::Config(format!(
            "window length {} us does not fit the 32-bit switch clock",
            set.t_w_us
        )));
    }
    let mut dir_offsets = [None; 2];
    for d in &set.direction_rules {
        let slot = dir_offsets
            .get_mut(usize::from(d.dir))
            .ok_or_else(|| Error::Config(format!("direction code {} is not 0 or 1", d.dir)))?;
        *slot = Some(d.offset);
    }
    let [Some(out_off), Some(in_off)] = dir_offsets else {
        return Err(Error::Config("direction table must cover codes 0 and 1".into()));
    };
    if usize::from(out_off.max(in_off)) + 1500 >= hot::PROB_TABLE_SLOTS {
        return Err(Error::Config(format!(
            "direction offsets {out_off}/{in_off} push sizes past the probability table"
        )));
    }
    let mut rows = Vec::with_capacity(set.prob_rows.len());
    for row in &set.prob_rows {
        if row.probs.len() != dims {
            return Err(Error::Config(format!(
                "probability row for size {} has {} entries, expected {dims}",
                row.dir_size.value(),
                row.probs.len()
            )));
        }
        rows.push((row.dir_size.value(), row.probs.clone()));
    }
    let mut rules = Vec::with_capacity(set.inference_rules.len());
    for r in &set.inference_rules {
        if r.ranges.len() != dims {
            return Err(Error::Config(format!(
                "inference rule {} has {} ranges, expected {dims}",
                r.priority,
                r.ranges.len()
            )));
        }
        // The inference table is consulted only when the timeout flag is
        // set, so a rule demanding timeout == 0 can never fire.
        if r.timeout_match != 1 {
            continue;
        }
        rules.push(HotRule {
            lo: r.ranges.iter().map(|&(lo, _)| lo).collect(),
            hi: r.ranges.iter().map(|&(_, hi)| hi).collect(),
            label: u32::from(r.label),
        });
    }
    Ok(HotTables::new(dims, set.t_w_us as u32, convention, [out_off, in_off], &rows, rules))
}

/// Independent re-derivation of every open window's register sums through
/// `CompiledTableSet::quantized_probs` (binary search) instead of the hot
/// loop's dense array, with identical timeout arithmetic. Any divergence
/// between a detection snapshot and the re-derived sum is an error.
struct WindowChecker<'a> {
    set: &'a CompiledTableSet,
    convention: TimeoutConvention,
    t_w: u32,
    open: BTreeMap<usize, (u32, Vec<u32>)>,
}

fn add_row(sum: &mut [u32], row: &[u8]) {
    for (s, &p) in sum.iter_mut().zip(row) {
        *s = s.wrapping_add(u32::from(p));
    }
}

fn mismatch(device_id: &str, slot: usize, got: &[u32], want: &[u32]) -> Error {
    Error::Contract(format!(
        "window check failed for device {device_id} slot {slot}: \
         snapshot {got:?} != derived {want:?}"
    ))
}

impl<'a> WindowChecker<'a> {
    fn new(set: &'a CompiledTableSet, convention: TimeoutConvention) -> WindowChecker<'a> {
        WindowChecker { set, convention, t_w: set.t_w_us as u32, open: BTreeMap::new() }
    }

    fn observe(
        &mut self,
        r: &PacketRecord,
        ip_key: u32,
        emitted: Option<&RawDetection>,
    ) -> Result<()> {
        let slot = hot::host_slot(ip_key);
        let now = r.timestamp_us as u32;
        let row = self.set.quantized_probs(r.dir_size());
        let unexpected = |what: &str| {
            Error::Contract(format!(
                "device {} slot {slot}: {what} at {} us",
                self.set.device_id, r.timestamp_us
            ))
        };
        match self.open.get_mut(&slot) {
            None => {
                if emitted.is_some() {
                    return Err(unexpected("detection from a slot with no open window"));
                }
                let mut sum = vec![0u32; row.len()];
                add_row(&mut sum, &row);
                self.open.insert(slot, (now, sum));
            }
            Some((start, sum)) => {
                if now.wrapping_sub(*start) >= self.t_w {
                    let d = emitted
                        .ok_or_else(|| unexpected("missing detection at window timeout"))?;
                    match self.convention {
                        TimeoutConvention::TriggerOpens => {
                            if d.v != *sum {
                                return Err(mismatch(&self.set.device_id, slot, &d.v, sum));
                            }
                            *start = now;
                            sum.fill(0);
                            add_row(sum, &row);
                        }
                        TimeoutConvention::TriggerCloses => {
                            add_row(sum, &row);
                            if d.v != *sum {
                                return Err(mismatch(&self.set.device_id, slot, &d.v, sum));
                            }
                            self.open.remove(&slot);
                        }
                    }
                } else {
                    if emitted.is_some() {
                        return Err(unexpected("detection inside an open window"));
                    }
                    add_row(sum, &row);
                }
            }
        }
        Ok(())
    }

    fn check_flush(&mut self, d: &RawDetection) -> Result<()> {
        let slot = hot::host_slot(d.ip_key);
        let (_, sum) = self
            .open
            .remove(&slot)
            .ok_or_else(|| Error::Contract(format!("flushed slot {slot} was not open")))?;
        if d.v != sum {
            return Err(mismatch(&self.set.device_id, slot, &d.v, &sum));
        }
        Ok(())
    }
}

fn run_pipeline(
    trace: &Trace,
    set: &CompiledTableSet,
    tables: &HotTables,
    cfg: &SimConfig,
) -> Result<DeviceRun> {
    let mut bank = RegisterBank::new(tables.dims());
    let mut stats = HotStats::default();
    let mut raw: Vec<RawDetection> = Vec::new();
    let mut checker = cfg.debug_window_checks.then(|| WindowChecker::new(set, cfg.convention));

    for r in &trace.records {
        let ip_key = u32::from(r.src_ip);
        let d = hot::process_packet(
            &mut bank,
            tables,
            ip_key,
            r.timestamp_us,
            r.ip_total_len,
            r.direction.code(),
            &mut stats,
        );
        if let Some(c) = &mut checker {
            c.observe(r, ip_key, d.as_ref())?;
        }
        if let Some(d) = d {
            raw.push(d);
        }
    }
    // End of trace: age every remaining window out so each packet ends up
    // inside exactly one reported window.
    if let Some(last) = trace.records.last() {
        let flushed = hot::flush(&mut bank, tables, last.timestamp_us + set.t_w_us, &mut stats);
        if let Some(c) = &mut checker {
            for d in &flushed {
                c.check_flush(d)?;
            }
        }
        raw.extend(flushed);
    }
    let detections = raw
        .into_iter()
        .map(|d| Detection {
            device_id: set.device_id.clone(),
            ip_key: d.ip_key,
            window_start_us: d.window_start_us,
            label: d.label as u8,
            features: d.v,
        })
        .collect();
    Ok(DeviceRun { device_id: set.device_id.clone(), detections, stats })
}

/// Run every device pipeline over the trace. Pipelines own disjoint
/// register banks, so `cfg.jobs > 1` spreads them over threads; output
/// order follows `sets` regardless of scheduling.
pub fn run_trace(trace: &Trace, sets: &[CompiledTableSet], cfg: &SimConfig) -> Result<RunOutput> {
    let mut pipelines = Vec::with_capacity(sets.len());
    for set in sets {
        pipelines.push((set, build_hot_tables(set, cfg.convention)?));
    }

    let started = Instant::now();
    let mut results: Vec<Option<Result<DeviceRun>>> = Vec::new();
    results.resize_with(pipelines.len(), || None);
    let chunk = pipelines.len().div_ceil(cfg.jobs.max(1)).max(1);
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<Result<DeviceRun>>] = &mut results;
        for group in pipelines.chunks(chunk) {
            let (head, tail) = rest.split_at_mut(group.len());
            rest = tail;
            scope.spawn(move || {
                for (slot, (set, tables)) in head.iter_mut().zip(group) {
                    *slot = Some(run_pipeline(trace, set, tables, cfg));
                }
            });
        }
    });
    let wall_seconds = started.elapsed().as_secs_f64();

    let mut per_device = Vec::with_capacity(results.len());
    for r in results {
        per_device.push(r.expect("scheduler fills every pipeline slot")?);
    }
    let mut stats = RunStats { wall_seconds, ..RunStats::default() };
    for d in &per_device {
        stats.total_packets += d.stats.packets;
        stats.prob_hits += d.stats.prob_hits;
        stats.prob_misses += d.stats.prob_misses;
        stats.collisions += d.stats.collisions;
        stats.detections += d.stats.detections;
    }
    stats.throughput_pps =
        if wall_seconds > 0.0 { stats.total_packets as f64 / wall_seconds } else { 0.0 };
    Ok(RunOutput { per_device, stats })
}

/// Render detections as CSV. All rows must share one feature width.
pub fn detections_to_csv(detections: &[Detection]) -> Result<String> {
    let dims = detections.first().map_or(0, |d| d.features.len());
    if let Some(bad) = detections.iter().find(|d| d.features.len() != dims) {
        return Err(Error::Eval(format!(
            "detection feature widths differ: {} vs {dims}",
            bad.features.len()
        )));
    }
    let mut out = String::from("device_id,ip_key,window_start_us,label");
    for j in 0..dims {
        out.push_str(&format!(",v_{j}"));
    }
    out.push('\n');
    for d in detections {
        let mut line = format!("{},{},{},{}", d.device_id, d.ip_key, d.window_start_us, d.label);
        for v in &d.features {
            line.push_str(&format!(",{v}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_detections_csv(detections: &[Detection], path: &Path) -> Result<()> {
    let text = detections_to_csv(detections)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn parse_detections_csv(text: &str, origin: &str) -> Result<Vec<Detection>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "empty detections file".to_string()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..4] != ["device_id", "ip_key", "window_start_us", "label"] {
        return Err(Error::parse(origin, 1, format!("bad header {header:?}")));
    }
    for (j, c) in cols[4..].iter().enumerate() {
        if *c != format!("v_{j}") {
            return Err(Error::parse(origin, 1, format!("bad feature column {c:?}")));
        }
    }
    let dims = cols.len() - 4;
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + dims {
            return Err(Error::parse(
                origin,
                n,
                format!("{} fields, expected {}", fields.len(), 4 + dims),
            ));
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|e| Error::parse(origin, n, format!("bad {what}: {e}")))
        };
        out.push(Detection {
            device_id: fields[0].to_string(),
            ip_key: num(fields[1], "ip_key")? as u32,
            window_start_us: num(fields[2], "window_start_us")?,
            label: num(fields[3], "label")? as u8,
            features: fields[4..]
                .iter()
                .map(|s| num(s, "feature").map(|v| v as u32))
                .collect::<Result<Vec<u32>>>()?,
        });
    }
    Ok(out)
}

pub fn read_detections_csv(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections_csv(&text, &path.display().to_string())
}
