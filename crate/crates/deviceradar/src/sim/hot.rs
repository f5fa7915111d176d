//! The per-packet fast path of the pipeline simulator. Everything in this
//! file manipulates fixed-width unsigned integers only — no real-number
//! arithmetic of any kind — because a PISA switch cannot do otherwise.
//! An audit test scans this file to keep that discipline honest.
//!
//! Per packet, in pipeline order: the direction table folds direction into
//! the size, the window-timeout check runs against a 32-bit microsecond
//! clock (wraparound handled by modular subtraction), a closing window is
//! snapshotted and classified by range-match rules, and the probability
//! row of the packet's directional size is added into the host's register
//! cells with wrapping 32-bit addition.

use crate::compiler::IP_SIZE;

/// CRC-16/CCITT-FALSE, the checksum family switch hash engines expose.
pub fn crc16(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in data {
        crc ^= u16::from(b) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

/// Register slot of a host key: CRC-16 over its big-endian bytes.
pub fn host_slot(ip_key: u32) -> usize {
    usize::from(crc16(&ip_key.to_be_bytes()))
}

/// Stateful per-host storage: `dims` accumulator cells and a window-start
/// timestamp per slot, plus shadow state (owner key, full-width start
/// time) that exists only so reports can name hosts and absolute times;
/// the pipeline logic never branches on it.
pub struct RegisterBank {
    dims: usize,
    cells: Vec<u32>,
    window_start: Vec<u32>,
    active: Vec<u8>,
    owner_ip: Vec<u32>,
    window_start_us: Vec<u64>,
}

impl RegisterBank {
    pub fn new(dims: usize) -> RegisterBank {
        RegisterBank {
            dims,
            cells: vec![0; IP_SIZE * dims],
            window_start: vec![0; IP_SIZE],
            active: vec![0; IP_SIZE],
            owner_ip: vec![0; IP_SIZE],
            window_start_us: vec![0; IP_SIZE],
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Accumulator snapshot of one slot, for tests and debug checks.
    pub fn snapshot(&self, slot: usize) -> &[u32] {
        &self.cells[slot * self.dims..(slot + 1) * self.dims]
    }

    pub fn is_active(&self, slot: usize) -> bool {
        self.active[slot] == 1
    }

    fn open(&mut self, slot: usize, ip_key: u32, tstamp_us: u64) {
        self.active[slot] = 1;
        self.window_start[slot] = tstamp_us as u32;
        self.owner_ip[slot] = ip_key;
        self.window_start_us[slot] = tstamp_us;
    }

    fn add_row(&mut self, slot: usize, row: &[u8]) {
        let cells = &mut self.cells[slot * self.dims..(slot + 1) * self.dims];
        for (c, &p) in cells.iter_mut().zip(row) {
            *c = c.wrapping_add(u32::from(p));
        }
    }

    fn clear_cells(&mut self, slot: usize) {
        self.cells[slot * self.dims..(slot + 1) * self.dims].fill(0);
    }
}

/// One inference rule in match-ready form: inclusive bounds per register.
pub struct HotRule {
    pub lo: Vec<u32>,
    pub hi: Vec<u32>,
    pub label: u32,
}

/// Which window the timeout-triggering packet belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeoutConvention {
    /// The triggering packet's contribution opens the next window.
    TriggerOpens,
    /// The triggering packet joins the window it closes; the slot then
    /// goes idle until the host's next packet.
    TriggerCloses,
}

/// Match-action state of one device pipeline, flattened for the hot loop.
pub struct HotTables {
    dims: usize,
    t_w: u32,
    convention: TimeoutConvention,
    /// Direction-table action data: offset added to the size, by direction code.
    dir_offsets: [u16; 2],
    /// Dense probability table indexed by `dir_size * dims + j`.
    probs: Vec<u8>,
    /// 1 where an explicit table row exists (drives hit/miss stats).
    prob_hit: Vec<u8>,
    rules: Vec<HotRule>,
}

/// Directional sizes live in [20, 3000]; one dense row per possible value.
pub const PROB_TABLE_SLOTS: usize = 3001;

impl HotTables {
    /// `rows` maps directional size values to probability rows; everything
    /// else gets the all-zero miss row.
    pub fn new(
        dims: usize,
        t_w: u32,
        convention: TimeoutConvention,
        dir_offsets: [u16; 2],
        rows: &[(u16, Vec<u8>)],
        rules: Vec<HotRule>,
    ) -> HotTables {
        let mut probs = vec![0u8; PROB_TABLE_SLOTS * dims];
        let mut prob_hit = vec![0u8; PROB_TABLE_SLOTS];
        for (value, row) in rows {
            let base = usize::from(*value) * dims;
            probs[base..base + dims].copy_from_slice(row);
            prob_hit[usize::from(*value)] = 1;
        }
        HotTables { dims, t_w, convention, dir_offsets, probs, prob_hit, rules }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn t_w(&self) -> u32 {
        self.t_w
    }

    fn prob_row(&self, dir_size: u16) -> &[u8] {
        let base = usize::from(dir_size) * self.dims;
        &self.probs[base..base + self.dims]
    }

    /// First matching rule's label; compiled rule sets tile the space, so
    /// the default 0 only ever fires on hand-built partial rule sets.
    fn classify(&self, v: &[u32]) -> u32 {
        for r in &self.rules {
            let hit = r
                .lo
                .iter()
                .zip(&r.hi)
                .zip(v)
                .all(|((lo, hi), x)| lo <= x && x <= hi);
            if hit {
                return r.label;
            }
        }
        0
    }
}

/// Counters over one pipeline's run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HotStats {
    pub packets: u64,
    pub prob_hits: u64,
    pub prob_misses: u64,
    /// Packets that landed in a slot currently owned by a different host.
    pub collisions: u64,
    pub detections: u64,
}

/// A closed window: who it belonged to, when it opened, what the rules
/// said, and the register snapshot that said it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDetection {
    pub ip_key: u32,
    pub window_start_us: u64,
    pub label: u32,
    pub v: Vec<u32>,
}

fn close_window(bank: &mut RegisterBank, tables: &HotTables, slot: usize) -> RawDetection {
    let v = bank.snapshot(slot).to_vec();
    let label = tables.classify(&v);
    let d = RawDetection {
        ip_key: bank.owner_ip[slot],
        window_start_us: bank.window_start_us[slot],
        label,
        v,
    };
    bank.clear_cells(slot);
    d
}

fn accumulate(bank: &mut RegisterBank, tables: &HotTables, slot: usize, dir_size: u16, stats: &mut HotStats) {
    if usize::from(dir_size) >= PROB_TABLE_SLOTS {
        stats.prob_misses += 1;
        return;
    }
    if tables.prob_hit[usize::from(dir_size)] == 1 {
        stats.prob_hits += 1;
    } else {
        stats.prob_misses += 1;
    }
    bank.add_row(slot, tables.prob_row(dir_size));
}

/// Run one packet through one device pipeline. `size` is the IP total
/// length, `dir` the direction code; the direction table folds them into
/// the directional size. Returns a detection iff this packet's arrival
/// closed its host's window.
pub fn process_packet(
    bank: &mut RegisterBank,
    tables: &HotTables,
    ip_key: u32,
    tstamp_us: u64,
    size: u16,
    dir: u8,
    stats: &mut HotStats,
) -> Option<RawDetection> {
    stats.packets += 1;
    let dir_size = size.wrapping_add(tables.dir_offsets[usize::from(dir & 1)]);
    let slot = host_slot(ip_key);
    let now = tstamp_us as u32;

    let mut detection = None;
    if bank.active[slot] == 0 {
        bank.open(slot, ip_key, tstamp_us);
    } else {
        if bank.owner_ip[slot] != ip_key {
            stats.collisions += 1;
        }
        // Wrap-safe elapsed time on the 32-bit switch clock.
        if now.wrapping_sub(bank.window_start[slot]) >= tables.t_w {
            match tables.convention {
                TimeoutConvention::TriggerOpens => {
                    detection = Some(close_window(bank, tables, slot));
                    stats.detections += 1;
                    bank.open(slot, ip_key, tstamp_us);
                }
                TimeoutConvention::TriggerCloses => {
                    accumulate(bank, tables, slot, dir_size, stats);
                    detection = Some(close_window(bank, tables, slot));
                    stats.detections += 1;
                    bank.active[slot] = 0;
                    return detection;
                }
            }
        }
    }
    accumulate(bank, tables, slot, dir_size, stats);
    detection
}

/// Close every window that has aged past T_w as of `now_us` and leave those
/// slots idle. Slot order, so deterministic.
pub fn flush(
    bank: &mut RegisterBank,
    tables: &HotTables,
    now_us: u64,
    stats: &mut HotStats,
) -> Vec<RawDetection> {
    let now = now_us as u32;
    let mut out = Vec::new();
    for slot in 0..IP_SIZE {
        if bank.active[slot] == 1 && now.wrapping_sub(bank.window_start[slot]) >= tables.t_w {
            out.push(close_window(bank, tables, slot));
            stats.detections += 1;
            bank.active[slot] = 0;
        }
    }
    out
}
