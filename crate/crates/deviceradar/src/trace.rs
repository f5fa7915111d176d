//! Packet trace model shared by every pipeline stage.
//!
//! A trace is an ordered list of packet records as seen at the customer edge.
//! Only the fields an ISP-side monitor can observe are kept: timestamps,
//! addresses/ports, transport protocol, IP total length and flow direction.
//! Payloads never appear anywhere in this crate.
//!
//! The central encoding is the *directional packet size*: outbound packets
//! keep their IP total length, inbound packets get 1500 added, so one u16
//! carries both size and direction in the range [20, 3000].

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest IP total length accepted anywhere (a bare IPv4 header).
pub const MIN_IP_LEN: u16 = 20;
/// Largest IP total length accepted anywhere (Ethernet MTU).
pub const MAX_IP_LEN: u16 = 1500;
/// Offset added to inbound sizes by the directional encoding.
pub const DIRECTION_OFFSET: u16 = 1500;
/// Upper bound of the directional size domain.
pub const MAX_DIR_SIZE: u16 = 3000;

/// Which side of the monitored link a packet crosses toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Customer premises toward the internet. Encoded as 0 on the wire format.
    LanToWan = 0,
    /// Internet toward customer premises. Encoded as 1.
    WanToLan = 1,
}

impl Direction {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Direction> {
        match code {
            0 => Some(Direction::LanToWan),
            1 => Some(Direction::WanToLan),
            _ => None,
        }
    }
}

/// Transport protocol, collapsed to the three classes the pipeline uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum L4Proto {
    Tcp,
    Udp,
    Other,
}

impl fmt::Display for L4Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            L4Proto::Tcp => "TCP",
            L4Proto::Udp => "UDP",
            L4Proto::Other => "OTHER",
        };
        f.write_str(s)
    }
}

impl FromStr for L4Proto {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "TCP" => Ok(L4Proto::Tcp),
            "UDP" => Ok(L4Proto::Udp),
            "OTHER" => Ok(L4Proto::Other),
            _ => Err(()),
        }
    }
}

/// One observed packet. `timestamp_us` is relative to the trace epoch.
/// `device_label` is ground truth carried out-of-band for training and
/// evaluation; it is never visible to the data plane.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp_us: u64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub l4_proto: L4Proto,
    pub ip_total_len: u16,
    pub direction: Direction,
    pub device_label: Option<String>,
}

impl PacketRecord {
    /// Directional size of this record. Panics only if the record was built
    /// without going through the validating constructors/parsers.
    pub fn dir_size(&self) -> DirectionalPacketSize {
        encode_directional(self.ip_total_len, self.direction)
            .expect("record holds an ip_total_len outside [20, 1500]")
    }
}

/// Packet size and direction folded into a single value in [20, 3000]:
/// outbound sizes stay as-is, inbound sizes are shifted by 1500.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirectionalPacketSize(u16);

impl DirectionalPacketSize {
    /// Re-validate a raw value (used when loading persisted artifacts).
    /// Values in (1500, 1520) are unreachable: they would decode to an
    /// inbound size below 20.
    pub fn from_value(v: u16) -> Result<DirectionalPacketSize> {
        let ok = (MIN_IP_LEN..=MAX_IP_LEN).contains(&v)
            || (DIRECTION_OFFSET + MIN_IP_LEN..=MAX_DIR_SIZE).contains(&v);
        if ok {
            Ok(DirectionalPacketSize(v))
        } else {
            Err(Error::Contract(format!("directional size {v} is not encodable")))
        }
    }

    pub fn value(self) -> u16 {
        self.0
    }

    /// Raw IP total length this value encodes.
    pub fn size(self) -> u16 {
        if self.0 > MAX_IP_LEN {
            self.0 - DIRECTION_OFFSET
        } else {
            self.0
        }
    }

    pub fn direction(self) -> Direction {
        if self.0 > MAX_IP_LEN {
            Direction::WanToLan
        } else {
            Direction::LanToWan
        }
    }
}

impl fmt::Debug for DirectionalPacketSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dps({})", self.0)
    }
}

impl fmt::Display for DirectionalPacketSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Fold size and direction into one value: outbound keeps the size,
/// inbound adds 1500. Inverse of `DirectionalPacketSize::size`/`direction`.
pub fn encode_directional(size: u16, direction: Direction) -> Result<DirectionalPacketSize> {
    if !(MIN_IP_LEN..=MAX_IP_LEN).contains(&size) {
        return Err(Error::SizeOutOfRange(size as u32));
    }
    let v = match direction {
        Direction::LanToWan => size,
        Direction::WanToLan => size + DIRECTION_OFFSET,
    };
    Ok(DirectionalPacketSize(v))
}

/// An ordered packet trace. `epoch_us` is the absolute capture start time;
/// record timestamps are offsets from it. CSV files carry no epoch, so
/// traces parsed from CSV have `epoch_us == 0`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<PacketRecord>,
    pub epoch_us: u64,
}

impl Trace {
    pub fn new(records: Vec<PacketRecord>) -> Trace {
        Trace { records, epoch_us: 0 }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_timestamp_us(&self) -> u64 {
        self.records.last().map(|r| r.timestamp_us).unwrap_or(0)
    }

    /// Shift timestamps so the first record sits at 0. No-op when empty.
    pub fn rebase(&mut self) {
        if let Some(first) = self.records.first().map(|r| r.timestamp_us) {
            if first > 0 {
                for r in &mut self.records {
                    r.timestamp_us -= first;
                }
                self.epoch_us = self.epoch_us.saturating_add(first);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Canonical CSV format
// ---------------------------------------------------------------------------

const CSV_HEADER: &str = "timestamp_us,src_ip,dst_ip,src_port,dst_port,proto,ip_total_len,direction,label";

/// Result of a CSV import. `reordered` counts rows whose timestamp was
/// smaller than the previous row's; such traces are re-sorted rather than
/// rejected.
#[derive(Debug)]
pub struct CsvImport {
    pub trace: Trace,
    pub reordered: usize,
}

pub fn parse_csv(path: &Path) -> Result<CsvImport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_reader(BufReader::new(file), &path.display().to_string())
}

/// Parse the canonical CSV wire format. The label column is optional, both
/// in the header and per row; an empty label cell means "unlabelled".
pub fn parse_csv_reader<R: BufRead>(reader: R, path_label: &str) -> Result<CsvImport> {
    let mut records = Vec::new();
    let mut reordered = 0usize;
    let mut prev_ts = 0u64;
    let mut lines = reader.lines().enumerate();

    match lines.next() {
        None => return Ok(CsvImport { trace: Trace::new(Vec::new()), reordered: 0 }),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path_label, e))?;
            let got = line.trim_end();
            if got != CSV_HEADER && got != CSV_HEADER.trim_end_matches(",label") {
                return Err(Error::parse(
                    path_label,
                    1,
                    format!("bad header, expected \"{CSV_HEADER}\""),
                ));
            }
        }
    }

    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path_label, e))?;
        if line.is_empty() {
            continue;
        }
        let rec = parse_csv_row(&line, path_label, lineno)?;
        if rec.timestamp_us < prev_ts {
            reordered += 1;
        }
        prev_ts = rec.timestamp_us;
        records.push(rec);
    }

    if reordered > 0 {
        records.sort_by_key(|r| r.timestamp_us);
    }
    Ok(CsvImport { trace: Trace::new(records), reordered })
}

fn parse_csv_row(line: &str, path: &str, lineno: usize) -> Result<PacketRecord> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 8 && fields.len() != 9 {
        return Err(Error::parse(path, lineno, format!("expected 8 or 9 fields, got {}", fields.len())));
    }
    let err = |msg: String| Error::parse(path, lineno, msg);

    let timestamp_us: u64 =
        fields[0].parse().map_err(|_| err(format!("bad timestamp_us {:?}", fields[0])))?;
    let src_ip: Ipv4Addr =
        fields[1].parse().map_err(|_| err(format!("bad src_ip {:?}", fields[1])))?;
    let dst_ip: Ipv4Addr =
        fields[2].parse().map_err(|_| err(format!("bad dst_ip {:?}", fields[2])))?;
    let src_port: u16 =
        fields[3].parse().map_err(|_| err(format!("bad src_port {:?}", fields[3])))?;
    let dst_port: u16 =
        fields[4].parse().map_err(|_| err(format!("bad dst_port {:?}", fields[4])))?;
    let l4_proto: L4Proto =
        fields[5].parse().map_err(|_| err(format!("bad proto {:?}, want TCP|UDP|OTHER", fields[5])))?;
    let ip_total_len: u32 =
        fields[6].parse().map_err(|_| err(format!("bad ip_total_len {:?}", fields[6])))?;
    if ip_total_len < MIN_IP_LEN as u32 || ip_total_len > MAX_IP_LEN as u32 {
        return Err(err(format!("ip_total_len {ip_total_len} outside [20, 1500]")));
    }
    let direction = fields[7]
        .parse::<u8>()
        .ok()
        .and_then(Direction::from_code)
        .ok_or_else(|| err(format!("bad direction {:?}, want 0|1", fields[7])))?;
    let device_label = match fields.get(8) {
        None => None,
        Some(s) if s.is_empty() => None,
        Some(s) => Some(s.to_string()),
    };

    Ok(PacketRecord {
        timestamp_us,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        l4_proto,
        ip_total_len: ip_total_len as u16,
        direction,
        device_label,
    })
}

pub fn write_csv(trace: &Trace, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv_writer(trace, &mut w).map_err(|e| Error::io(path, e))
}

pub fn write_csv_writer<W: Write>(trace: &Trace, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in &trace.records {
        let label = r.device_label.as_deref().unwrap_or("");
        debug_assert!(
            !label.contains(',') && !label.contains('\n'),
            "device labels must be plain tokens"
        );
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.timestamp_us,
            r.src_ip,
            r.dst_ip,
            r.src_port,
            r.dst_port,
            r.l4_proto,
            r.ip_total_len,
            r.direction.code(),
            label
        )?;
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// pcap ingestion
// ---------------------------------------------------------------------------

/// IPv4 CIDR prefix, e.g. "192.168.1.0/24". Used to classify direction when
/// importing pcaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cidr {
    pub addr: Ipv4Addr,
    pub prefix_len: u8,
}

impl Cidr {
    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        if self.prefix_len == 0 {
            return true;
        }
        let mask = u32::MAX << (32 - self.prefix_len as u32);
        (u32::from(ip) & mask) == (u32::from(self.addr) & mask)
    }
}

impl FromStr for Cidr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Cidr> {
        let bad = || Error::Config(format!("bad CIDR prefix {s:?}, want a.b.c.d/len"));
        let (addr, len) = s.split_once('/').ok_or_else(bad)?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| bad())?;
        let prefix_len: u8 = len.parse().map_err(|_| bad())?;
        if prefix_len > 32 {
            return Err(bad());
        }
        Ok(Cidr { addr, prefix_len })
    }
}

/// Result of a pcap import. Non-IPv4 frames (ARP, IPv6, VLAN-tagged, ...)
/// and IPv4 packets with an implausible total length are skipped and counted,
/// never silently dropped.
#[derive(Debug)]
pub struct PcapImport {
    pub trace: Trace,
    pub skipped_non_ipv4: u64,
    pub skipped_bad_len: u64,
    pub reordered: usize,
}

const PCAP_MAGIC_US: u32 = 0xa1b2_c3d4;
const PCAP_MAGIC_NS: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;

pub fn parse_pcap(path: &Path, lan_prefixes: &[Cidr]) -> Result<PcapImport> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    parse_pcap_bytes(&buf, lan_prefixes, &path.display().to_string())
}

/// Parse a classic libpcap capture (Ethernet link type, IPv4 only).
/// Both byte orders and both microsecond/nanosecond flavors are accepted.
pub fn parse_pcap_bytes(data: &[u8], lan_prefixes: &[Cidr], path_label: &str) -> Result<PcapImport> {
    if lan_prefixes.is_empty() {
        return Err(Error::Config("pcap import needs at least one LAN prefix".into()));
    }
    if data.len() < 24 {
        return Err(Error::parse(path_label, 0, "file too short for a pcap header"));
    }

    let magic_be = u32::from_be_bytes(data[0..4].try_into().unwrap());
    let magic_le = u32::from_le_bytes(data[0..4].try_into().unwrap());
    let (little_endian, nanos) = if magic_le == PCAP_MAGIC_US {
        (true, false)
    } else if magic_le == PCAP_MAGIC_NS {
        (true, true)
    } else if magic_be == PCAP_MAGIC_US {
        (false, false)
    } else if magic_be == PCAP_MAGIC_NS {
        (false, true)
    } else {
        return Err(Error::parse(path_label, 0, "not a pcap file (bad magic)"));
    };
    let read_u32 = |b: &[u8]| -> u32 {
        let arr: [u8; 4] = b.try_into().unwrap();
        if little_endian {
            u32::from_le_bytes(arr)
        } else {
            u32::from_be_bytes(arr)
        }
    };

    let network = read_u32(&data[20..24]);
    if network != LINKTYPE_ETHERNET {
        return Err(Error::parse(
            path_label,
            0,
            format!("unsupported link type {network}, only Ethernet (1) is handled"),
        ));
    }

    let mut skipped_non_ipv4 = 0u64;
    let mut skipped_bad_len = 0u64;
    // (absolute timestamp in us, parsed record with timestamp_us not yet set)
    let mut pending: Vec<(u64, PacketRecord)> = Vec::new();

    let mut off = 24usize;
    let mut pktno = 0usize;
    while off < data.len() {
        if off + 16 > data.len() {
            return Err(Error::parse(path_label, 0, format!("truncated record header at byte {off}")));
        }
        pktno += 1;
        let ts_sec = read_u32(&data[off..off + 4]) as u64;
        let ts_sub = read_u32(&data[off + 4..off + 8]) as u64;
        let incl_len = read_u32(&data[off + 8..off + 12]) as usize;
        off += 16;
        if off + incl_len > data.len() {
            return Err(Error::parse(path_label, 0, format!("truncated packet {pktno}")));
        }
        let frame = &data[off..off + incl_len];
        off += incl_len;

        let abs_us = ts_sec * 1_000_000 + if nanos { ts_sub / 1000 } else { ts_sub };

        // Ethernet header: 6+6 MACs, 2 bytes ethertype. Anything that is not
        // plain IPv4 (0x0800) is out of scope here, including VLAN tags.
        if frame.len() < 14 + 20 {
            skipped_non_ipv4 += 1;
            continue;
        }
        let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
        if ethertype != 0x0800 {
            skipped_non_ipv4 += 1;
            continue;
        }
        let ip = &frame[14..];
        if ip[0] >> 4 != 4 {
            skipped_non_ipv4 += 1;
            continue;
        }
        let ihl = ((ip[0] & 0x0f) as usize) * 4;
        if ihl < 20 || ip.len() < ihl {
            skipped_bad_len += 1;
            continue;
        }
        let total_len = u16::from_be_bytes([ip[2], ip[3]]);
        if !(MIN_IP_LEN..=MAX_IP_LEN).contains(&total_len) {
            skipped_bad_len += 1;
            continue;
        }
        let proto_byte = ip[9];
        let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
        let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
        let l4_proto = match proto_byte {
            6 => L4Proto::Tcp,
            17 => L4Proto::Udp,
            _ => L4Proto::Other,
        };
        let (src_port, dst_port) = if matches!(l4_proto, L4Proto::Tcp | L4Proto::Udp)
            && ip.len() >= ihl + 4
        {
            (
                u16::from_be_bytes([ip[ihl], ip[ihl + 1]]),
                u16::from_be_bytes([ip[ihl + 2], ip[ihl + 3]]),
            )
        } else {
            (0, 0)
        };
        let direction = if lan_prefixes.iter().any(|p| p.contains(src_ip)) {
            Direction::LanToWan
        } else {
            Direction::WanToLan
        };

        pending.push((
            abs_us,
            PacketRecord {
                timestamp_us: 0,
                src_ip,
                dst_ip,
                src_port,
                dst_port,
                l4_proto,
                ip_total_len: total_len,
                direction,
                device_label: None,
            },
        ));
    }

    let epoch_us = pending.iter().map(|(t, _)| *t).min().unwrap_or(0);
    let mut reordered = 0usize;
    let mut prev = 0u64;
    for (i, (abs, rec)) in pending.iter_mut().enumerate() {
        rec.timestamp_us = *abs - epoch_us;
        if i > 0 && rec.timestamp_us < prev {
            reordered += 1;
        }
        prev = rec.timestamp_us;
    }
    let mut records: Vec<PacketRecord> = pending.into_iter().map(|(_, r)| r).collect();
    if reordered > 0 {
        records.sort_by_key(|r| r.timestamp_us);
    }

    Ok(PcapImport {
        trace: Trace { records, epoch_us },
        skipped_non_ipv4,
        skipped_bad_len,
        reordered,
    })
}

// ---------------------------------------------------------------------------
// ISP visibility filter
// ---------------------------------------------------------------------------

fn is_private(ip: Ipv4Addr) -> bool {
    ip.is_private() || ip.is_loopback() || ip.is_link_local()
}

fn isp_invisible(r: &PacketRecord) -> bool {
    let udp = r.l4_proto == L4Proto::Udp;
    // DHCP
    if udp && (r.src_port == 67 || r.src_port == 68 || r.dst_port == 67 || r.dst_port == 68) {
        return true;
    }
    // DNS against a resolver inside the customer network (either direction
    // of the exchange).
    if (r.dst_port == 53 && is_private(r.dst_ip)) || (r.src_port == 53 && is_private(r.src_ip)) {
        return true;
    }
    // SSDP and mDNS never leave the LAN.
    if udp && (r.src_port == 1900 || r.dst_port == 1900) {
        return true;
    }
    if udp && (r.src_port == 5353 || r.dst_port == 5353) {
        return true;
    }
    // LAN-to-LAN traffic.
    if is_private(r.src_ip) && is_private(r.dst_ip) {
        return true;
    }
    false
}

/// Drop traffic an ISP-side monitor would never see: DHCP, DNS to in-home
/// resolvers, SSDP, mDNS and LAN-to-LAN exchanges. Idempotent.
pub fn filter_isp_visible(trace: &Trace) -> Trace {
    Trace {
        records: trace.records.iter().filter(|r| !isp_invisible(r)).cloned().collect(),
        epoch_us: trace.epoch_us,
    }
}
