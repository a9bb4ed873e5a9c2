//! Deterministic simulated Internet.
//!
//! Scanner populations generate frames toward simulated sensors. Every frame
//! is driven through the sensor's real [`SensorPath`], and the generator keeps
//! its own registry of what it sent so that captures can be checked against
//! ground truth.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::addr::{any_overlap, AddressRange, PortRange};
use crate::collector::{ManifestEntry, TraceWriter};
use crate::controlplane::SensorDescriptor;
use crate::darknet::{ArpQuery, AttachmentMode, DarknetConfig};
use crate::packet::{CaptureOrigin, LinkType, Packet, PacketRecord, Proto, TcpFlags, ROUTER_MAC};
use crate::path::{PathError, SensorPath, Verdict};
use crate::responder::ResponderConfig;
use crate::time::{Timestamp, MICROS_PER_SEC};

pub const DEFAULT_START: Timestamp = Timestamp::from_secs(1_736_121_600);
const ROUTER_IP: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 1);
const ARP_SPACING_MICROS: u64 = 101_000;
const CLIENT_RTT_MICROS: u64 = 20_000;
const TICK_MICROS: u64 = MICROS_PER_SEC;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error("no reply from {0} before the dialog needed one")]
    Timeout(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("config parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScannerKind {
    UniformSweep,
    PrefixTargeted { prefixes: Vec<AddressRange> },
    /// Victims answer attack traffic whose sources were spoofed into the
    /// sensor space.
    BackscatterSpoofer { victims: Vec<Ipv4Addr> },
}

impl ScannerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ScannerKind::UniformSweep => "uniform_sweep",
            ScannerKind::PrefixTargeted { .. } => "prefix_targeted",
            ScannerKind::BackscatterSpoofer { .. } => "backscatter_spoofer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortWeight {
    pub port: u16,
    pub weight: f64,
    #[serde(default = "tcp")]
    pub proto: Proto,
}

fn tcp() -> Proto {
    Proto::Tcp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PortModel {
    Preset(String),
    Table(Vec<PortWeight>),
}

pub const PRESETS: [&str; 3] = ["ssh-telnet-iot", "bgp-prober", "es-ddos"];

pub fn preset(name: &str) -> Option<Vec<PortWeight>> {
    let w = |port, weight| PortWeight { port, weight, proto: Proto::Tcp };
    Some(match name {
        "ssh-telnet-iot" => vec![w(22, 0.45), w(23, 0.4), w(2000, 0.15)],
        "bgp-prober" => vec![w(179, 1.0)],
        "es-ddos" => vec![w(9200, 1.0)],
        _ => return None,
    })
}

impl PortModel {
    pub fn table(&self) -> Result<Vec<PortWeight>, SimError> {
        let t = match self {
            PortModel::Preset(name) => preset(name).ok_or_else(|| SimError::ConfigInvalid(format!("unknown port preset {name:?}")))?,
            PortModel::Table(t) => t.clone(),
        };
        let sum: f64 = t.iter().map(|w| w.weight).sum();
        if t.is_empty() || (sum - 1.0).abs() > 1e-9 || t.iter().any(|w| w.weight < 0.0) {
            return Err(SimError::ConfigInvalid(format!("port weights must be non-negative and sum to 1, got {sum}")));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannerProfile {
    #[serde(flatten)]
    pub kind: ScannerKind,
    pub src_ip: Ipv4Addr,
    /// Packets per second.
    pub rate: f64,
    pub port_model: PortModel,
    /// Payload sent per destination port: on UDP with the probe, on TCP
    /// after the handshake completes.
    #[serde(default)]
    pub payload_model: BTreeMap<u16, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimDarknet {
    pub mode: AttachmentMode,
    #[serde(default)]
    pub ranges: Option<Vec<AddressRange>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResponder {
    pub ip_ranges: Vec<AddressRange>,
    pub ports: Vec<PortRange>,
    #[serde(default)]
    pub max_capture_bytes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSensor {
    #[serde(flatten)]
    pub descriptor: SensorDescriptor,
    /// Defaults to a directly assigned darknet over every owned range when
    /// no responder is configured either.
    #[serde(default)]
    pub darknet: Option<SimDarknet>,
    #[serde(default)]
    pub responder: Option<SimResponder>,
}

impl SimSensor {
    pub fn darknet_config(&self) -> Option<DarknetConfig> {
        let d = match (&self.darknet, &self.responder) {
            (Some(d), _) => d.clone(),
            (None, None) => SimDarknet {
                mode: AttachmentMode::DirectAssign,
                ranges: None,
            },
            (None, Some(_)) => return None,
        };
        let ranges = d.ranges.unwrap_or_else(|| self.descriptor.address_ranges.clone());
        let mut cfg = DarknetConfig::new(ranges, d.mode);
        if d.mode == AttachmentMode::RoutedToSensor {
            cfg.sensor_ip = Some(ROUTER_IP);
        }
        Some(cfg)
    }

    pub fn responder_config(&self, seed: u64) -> Option<ResponderConfig> {
        let r = self.responder.as_ref()?;
        let mut h = Sha256::new();
        h.update(seed.to_be_bytes());
        h.update(self.descriptor.sensor_id.as_bytes());
        let mut cfg = ResponderConfig::new(r.ip_ranges.clone(), r.ports.clone(), h.finalize().into());
        if let Some(cap) = r.max_capture_bytes {
            cfg.max_capture_bytes = cap;
        }
        Some(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Simulated seconds.
    pub duration: u64,
    #[serde(default = "default_start")]
    pub start: Timestamp,
    pub sensors: Vec<SimSensor>,
    pub scanners: Vec<ScannerProfile>,
    /// Timestamps are multiples of this many microseconds.
    #[serde(default = "default_step")]
    pub clock_step: u64,
}

fn default_start() -> Timestamp {
    DEFAULT_START
}

fn default_step() -> u64 {
    1
}

impl SimConfig {
    pub fn from_yaml(text: &str) -> Result<Self, SimError> {
        serde_yaml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.sensors.is_empty() {
            return bad("no sensors".into());
        }
        if self.duration == 0 || self.clock_step == 0 {
            return bad("duration and clock_step must be positive".into());
        }
        let mut all = Vec::new();
        for s in &self.sensors {
            s.descriptor.validate().map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
            all.extend(s.descriptor.address_ranges.iter().copied());
        }
        if let Some((a, b)) = any_overlap(&all) {
            return bad(format!("sensor ranges {a} and {b} overlap"));
        }
        let mut ids: Vec<&str> = self.sensors.iter().map(|s| s.descriptor.sensor_id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate sensor id".into());
        }
        for (i, sc) in self.scanners.iter().enumerate() {
            if !(sc.rate > 0.0 && sc.rate.is_finite()) {
                return bad(format!("scanner {i}: rate must be positive"));
            }
            sc.port_model.table()?;
            match &sc.kind {
                ScannerKind::PrefixTargeted { prefixes } if prefixes.is_empty() => {
                    return bad(format!("scanner {i}: no prefixes"))
                }
                ScannerKind::BackscatterSpoofer { victims } if victims.is_empty() => {
                    return bad(format!("scanner {i}: no victims"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn end(&self) -> Timestamp {
        self.start.plus_secs(self.duration)
    }
}

/// One frame on its way to a sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub ts: Timestamp,
    pub seq: u64,
    pub frame: Vec<u8>,
    pub ingress: Option<String>,
}

/// Generator-side record of one sent packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthPacket {
    pub seq: u64,
    pub ts: Timestamp,
    pub scanner: usize,
    pub sensor: Option<String>,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_flags: TcpFlags,
    pub payload_len: u32,
    /// Which module the generator expects to capture the packet.
    pub expected: Option<CaptureOrigin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScannerTruth {
    pub index: usize,
    pub kind: String,
    pub senders: Vec<Ipv4Addr>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorTruth {
    pub generated: u64,
    pub expected_captured: u64,
    pub captured: u64,
    pub outbound_sent: u64,
    pub host_replies_blocked: u64,
    /// Outbound packets that left with a darknet source address.
    pub darknet_leaks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimHeader {
    pub seed: u64,
    pub start: Timestamp,
    pub end: Timestamp,
    pub events: u64,
    pub scanners: Vec<ScannerTruth>,
    pub sensors: BTreeMap<String, SensorTruth>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub header: SimHeader,
    pub packets: Vec<TruthPacket>,
}

impl SimReport {
    /// Header line followed by one line per generated packet.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for p in &self.packets {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SimError::Parse("empty report".into()))?;
        let header = serde_json::from_str(header).map_err(|e| SimError::Parse(e.to_string()))?;
        let packets = lines
            .map(|l| serde_json::from_str(l).map_err(|e| SimError::Parse(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(SimReport { header, packets })
    }

    /// Truth packets the generator expects `sensor` to have captured.
    pub fn expected_for<'a>(&'a self, sensor: &'a str) -> impl Iterator<Item = &'a TruthPacket> + 'a {
        self.packets
            .iter()
            .filter(move |p| p.expected.is_some() && p.sensor.as_deref() == Some(sensor))
    }
}

/// Paths for every simulated sensor. With `trace_dir` each sensor writes
/// hourly pcaps under `trace_dir/<sensor>`; otherwise records are kept in
/// memory.
pub fn build_paths(config: &SimConfig, trace_dir: Option<&Path>) -> Result<BTreeMap<String, SensorPath>, SimError> {
    config.validate()?;
    let mut out = BTreeMap::new();
    for s in &config.sensors {
        let id = &s.descriptor.sensor_id;
        let mut path = SensorPath::new(id, s.descriptor.address_ranges.clone());
        let mut manifest = Vec::new();
        if let Some(d) = s.darknet_config() {
            path.set_darknet(Some(d))?;
            manifest.push(ManifestEntry::new("darknet", env!("CARGO_PKG_VERSION"), &format!("darknet.{id}.0000")));
        }
        if let Some(r) = s.responder_config(config.seed) {
            path.set_responder(Some(r))?;
            manifest.push(ManifestEntry::new("responder", env!("CARGO_PKG_VERSION"), &format!("responder.{id}.0000")));
        }
        match trace_dir {
            Some(dir) => {
                let mut w = TraceWriter::open(&dir.join(id), id, None).map_err(|e| SimError::Io(io::Error::other(e.to_string())))?;
                w.set_active_modules(manifest);
                path.set_sink(Box::new(w));
            }
            None => path.set_sink(Box::new(Vec::<PacketRecord>::new())),
        }
        out.insert(id.clone(), path);
    }
    Ok(out)
}

struct SensorSpace {
    id: String,
    owned: Vec<AddressRange>,
    darknet: Option<DarknetConfig>,
    responder: Option<ResponderConfig>,
}

impl SensorSpace {
    fn expected(&self, pkt: &Packet) -> Option<CaptureOrigin> {
        if self.responder.as_ref().is_some_and(|r| r.covers_ip(pkt.dst_ip)) {
            Some(CaptureOrigin::Responder)
        } else if self.darknet.as_ref().is_some_and(|d| d.contains(pkt.dst_ip)) {
            Some(CaptureOrigin::Darknet)
        } else {
            None
        }
    }

    fn darknet_src(&self, ip: Ipv4Addr) -> bool {
        self.darknet.as_ref().is_some_and(|d| d.contains(ip))
    }
}

struct Scanner {
    profile: ScannerProfile,
    ports: Vec<PortWeight>,
    rng: ChaCha8Rng,
}

impl Scanner {
    fn gap_micros(&mut self) -> u64 {
        let u: f64 = 1.0 - self.rng.gen::<f64>();
        ((-u.ln() / self.profile.rate) * MICROS_PER_SEC as f64).round().max(1.0) as u64
    }

    fn port(&mut self) -> (u16, Proto) {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for w in &self.ports {
            acc += w.weight;
            if u < acc {
                return (w.port, w.proto);
            }
        }
        let last = self.ports.last().expect("validated non-empty");
        (last.port, last.proto)
    }

    fn pick(&mut self, ranges: &[AddressRange]) -> Ipv4Addr {
        let total: u64 = ranges.iter().map(|r| r.size()).sum();
        let mut i = self.rng.gen_range(0..total);
        for r in ranges {
            if i < r.size() {
                return r.nth(i).expect("index within range");
            }
            i -= r.size();
        }
        unreachable!("index below total size")
    }

    fn payload(&self, port: u16) -> Vec<u8> {
        self.profile.payload_model.get(&port).map(|s| s.as_bytes().to_vec()).unwrap_or_default()
    }

    fn next_packet(&mut self, ts: Timestamp, universe: &[AddressRange]) -> Packet {
        let (port, proto) = self.port();
        let ephemeral = self.rng.gen_range(1024..=65535u16);
        match self.profile.kind.clone() {
            ScannerKind::BackscatterSpoofer { victims } => {
                let victim = victims[self.rng.gen_range(0..victims.len())];
                let dst = self.pick(universe);
                let flags = if self.rng.gen_bool(0.9) { TcpFlags::SYN_ACK } else { TcpFlags::RST_ACK };
                let seq = self.rng.gen();
                let ack = self.rng.gen();
                Packet::tcp(ts, (victim, port), (dst, ephemeral), flags, seq, ack, vec![])
            }
            kind => {
                let dst = match &kind {
                    ScannerKind::PrefixTargeted { prefixes } => self.pick(prefixes),
                    _ => self.pick(universe),
                };
                let src = (self.profile.src_ip, ephemeral);
                match proto {
                    Proto::Udp => Packet::udp(ts, src, (dst, port), self.payload(port)),
                    Proto::Icmp => Packet::icmp(ts, self.profile.src_ip, dst, vec![8, 0, 0, 0, 0, 1, 0, 1]),
                    _ => {
                        let seq = self.rng.gen();
                        Packet::tcp(ts, src, (dst, port), TcpFlags::SYN, seq, 0, vec![])
                    }
                }
            }
        }
    }
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Scan(usize),
    Followup { scanner: usize, frame: Vec<u8> },
    Arp { sensor: usize, target: Ipv4Addr },
}

fn quantize(ts: Timestamp, step: u64) -> Timestamp {
    Timestamp(ts.0.div_ceil(step) * step)
}

/// Replies the sensor's host stack would send for traffic to local darknet
/// addresses; the path's outbound rules decide whether they leave.
pub fn host_stack_reply(pkt: &Packet) -> Option<Packet> {
    match pkt.proto {
        Proto::Tcp if pkt.tcp_flags.contains(TcpFlags::RST) => None,
        Proto::Tcp => {
            let ack = pkt.seq.wrapping_add(1);
            Some(Packet::tcp(pkt.ts, (pkt.dst_ip, pkt.dst_port), (pkt.src_ip, pkt.src_port), TcpFlags::RST_ACK, 0, ack, vec![]))
        }
        Proto::Udp => {
            let mut quoted = pkt.encode(LinkType::RawIpv4);
            quoted.truncate(28);
            let mut msg = vec![3, 3, 0, 0, 0, 0, 0, 0];
            msg.extend(quoted);
            Some(Packet::icmp(pkt.ts, pkt.dst_ip, pkt.src_ip, msg))
        }
        _ => None,
    }
}

/// Runs the simulation through `paths`, which must come from
/// [`build_paths`] for the same config.
pub fn run(config: &SimConfig, paths: &mut BTreeMap<String, SensorPath>) -> Result<SimReport, SimError> {
    config.validate()?;
    let spaces: Vec<SensorSpace> = config
        .sensors
        .iter()
        .map(|s| SensorSpace {
            id: s.descriptor.sensor_id.clone(),
            owned: s.descriptor.address_ranges.clone(),
            darknet: s.darknet_config(),
            responder: s.responder_config(config.seed),
        })
        .collect();
    for s in &spaces {
        if !paths.contains_key(&s.id) {
            return Err(SimError::ConfigInvalid(format!("no packet path for sensor {}", s.id)));
        }
    }
    let mut universe: Vec<AddressRange> = spaces.iter().flat_map(|s| s.owned.iter().copied()).collect();
    universe.sort();

    let mut scanners: Vec<Scanner> = config
        .scanners
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            Scanner {
                profile: p.clone(),
                ports: p.port_model.table().expect("validated"),
                rng,
            }
        })
        .collect();

    let mut heap: BinaryHeap<Reverse<(Timestamp, u64, Pending)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<_>, ts: Timestamp, p: Pending| {
        heap.push(Reverse((ts, seq, p)));
        seq += 1;
    };

    // ARP-claimed darknets are resolved by the router before traffic starts.
    for (si, s) in spaces.iter().enumerate() {
        if let Some(d) = s.darknet.as_ref().filter(|d| d.mode == AttachmentMode::ArpResponder) {
            let targets: Vec<Ipv4Addr> = d.ranges.iter().flat_map(|r| r.iter()).collect();
            let lead = targets.len() as u64 * ARP_SPACING_MICROS;
            for (k, t) in targets.into_iter().enumerate() {
                let ts = Timestamp(config.start.0.saturating_sub(lead) + k as u64 * ARP_SPACING_MICROS);
                push(&mut heap, ts, Pending::Arp { sensor: si, target: t });
            }
        }
    }
    for (i, sc) in scanners.iter_mut().enumerate() {
        let ts = quantize(config.start.plus_micros(sc.gap_micros()), config.clock_step);
        push(&mut heap, ts, Pending::Scan(i));
    }

    let end = config.end();
    let mut truth = Vec::new();
    let mut per_sensor: BTreeMap<String, SensorTruth> = spaces.iter().map(|s| (s.id.clone(), SensorTruth::default())).collect();
    let mut next_tick = config.start;
    let mut events = 0u64;

    while let Some(Reverse((ts, id, pending))) = heap.pop() {
        if ts >= end {
            break;
        }
        if ts >= next_tick {
            for p in paths.values_mut() {
                p.tick(ts)?;
            }
            next_tick = ts.plus_micros(TICK_MICROS);
        }
        let (scanner, pkt) = match pending {
            Pending::Arp { sensor, target } => {
                let q = ArpQuery {
                    ts,
                    sender_ip: ROUTER_IP,
                    sender_mac: ROUTER_MAC,
                    target_ip: target,
                };
                paths.get_mut(&spaces[sensor].id).expect("path exists").on_arp(&q);
                continue;
            }
            Pending::Scan(i) => {
                let pkt = scanners[i].next_packet(ts, &universe);
                let next = quantize(ts.plus_micros(scanners[i].gap_micros()), config.clock_step);
                push(&mut heap, next, Pending::Scan(i));
                (i, pkt)
            }
            Pending::Followup { scanner, frame } => {
                let pkt = crate::packet::parse(&frame, LinkType::RawIpv4, ts).expect("own encoding");
                (scanner, pkt)
            }
        };
        events += 1;
        let si = spaces.iter().position(|s| s.owned.iter().any(|r| r.contains(pkt.dst_ip)));
        let expected = si.and_then(|si| spaces[si].expected(&pkt));
        truth.push(TruthPacket {
            seq: id,
            ts,
            scanner,
            sensor: si.map(|si| spaces[si].id.clone()),
            src_ip: pkt.src_ip,
            dst_ip: pkt.dst_ip,
            proto: pkt.proto,
            src_port: pkt.src_port,
            dst_port: pkt.dst_port,
            tcp_flags: pkt.tcp_flags,
            payload_len: pkt.payload.len() as u32,
            expected,
        });
        let Some(si) = si else { continue };
        let space = &spaces[si];
        let t = per_sensor.get_mut(&space.id).expect("sensor truth");
        t.generated += 1;
        t.expected_captured += u64::from(expected.is_some());
        let path = paths.get_mut(&space.id).expect("path exists");
        let frame = pkt.encode(LinkType::Ethernet);
        let out = path.process_frame(&frame, LinkType::Ethernet, ts)?;
        if matches!(out.verdict, Verdict::Darknet | Verdict::Responder) {
            t.captured += 1;
        }
        let mut leaving = out.outbound;
        if out.verdict == Verdict::Darknet {
            if let Some(reply) = host_stack_reply(&pkt) {
                match path.egress(reply) {
                    Some(p) => leaving.push(p),
                    None => t.host_replies_blocked += 1,
                }
            }
        }
        for o in &leaving {
            t.outbound_sent += 1;
            t.darknet_leaks += u64::from(space.darknet_src(o.src_ip));
            // A scanner with a payload for this port completes the dialog.
            if o.tcp_flags == TcpFlags::SYN_ACK && o.dst_ip == scanners[scanner].profile.src_ip {
                let data = scanners[scanner].payload(o.src_port);
                if !data.is_empty() {
                    let at = quantize(ts.plus_micros(CLIENT_RTT_MICROS), config.clock_step);
                    let seq = o.ack;
                    let ack = o.seq.wrapping_add(1);
                    let a = Packet::tcp(at, (o.dst_ip, o.dst_port), (o.src_ip, o.src_port), TcpFlags::ACK, seq, ack, vec![]);
                    let len = data.len() as u32;
                    let d = Packet::tcp(at, (o.dst_ip, o.dst_port), (o.src_ip, o.src_port), TcpFlags::PSH | TcpFlags::ACK, seq, ack, data);
                    let f = Packet::tcp(at, (o.dst_ip, o.dst_port), (o.src_ip, o.src_port), TcpFlags::FIN | TcpFlags::ACK, seq.wrapping_add(len), ack, vec![]);
                    for p in [a, d, f] {
                        push(&mut heap, at, Pending::Followup { scanner, frame: p.encode(LinkType::RawIpv4) });
                    }
                }
            }
        }
    }
    for p in paths.values_mut() {
        p.tick(end)?;
        p.finish(end)?;
    }

    let scanners_truth = config
        .scanners
        .iter()
        .enumerate()
        .map(|(i, p)| ScannerTruth {
            index: i,
            kind: p.kind.label().to_string(),
            senders: match &p.kind {
                ScannerKind::BackscatterSpoofer { victims } => victims.clone(),
                _ => vec![p.src_ip],
            },
        })
        .collect();
    Ok(SimReport {
        header: SimHeader {
            seed: config.seed,
            start: config.start,
            end,
            events,
            scanners: scanners_truth,
            sensors: per_sensor,
        },
        packets: truth,
    })
}

/// Runs `config` with traces under `out/traces/<sensor>`, ground truth in
/// `out/truth.jsonl` and, with `pcap`, the generated traffic in
/// `out/traffic.pcap`.
pub fn run_to_dir(config: &SimConfig, out: &Path, pcap: bool) -> Result<SimReport, SimError> {
    std::fs::create_dir_all(out)?;
    let mut paths = build_paths(config, Some(&out.join("traces")))?;
    let report = run(config, &mut paths)?;
    report.write_jsonl(BufWriter::new(File::create(out.join("truth.jsonl"))?))?;
    if pcap {
        dump_pcap(&report, &out.join("traffic.pcap"))?;
    }
    Ok(report)
}

/// Writes generated traffic as an Ethernet pcap for cross-checking decode.
pub fn dump_pcap(report: &SimReport, path: &Path) -> Result<(), SimError> {
    use pcap_file::pcap::{PcapPacket, PcapWriter};
    let file = BufWriter::new(File::create(path)?);
    let mut w = PcapWriter::new(file).map_err(|e| SimError::Io(io::Error::other(e.to_string())))?;
    for p in &report.packets {
        let pkt = truth_packet(p);
        let frame = pkt.encode(LinkType::Ethernet);
        let ts = Duration::from_micros(p.ts.0);
        w.write_packet(&PcapPacket::new(ts, frame.len() as u32, &frame))
            .map_err(|e| SimError::Io(io::Error::other(e.to_string())))?;
    }
    Ok(())
}

/// Rebuilds a packet from its truth entry; payload bytes are zero-filled.
pub fn truth_packet(p: &TruthPacket) -> Packet {
    let payload = vec![0u8; p.payload_len as usize];
    let src = (p.src_ip, p.src_port);
    let dst = (p.dst_ip, p.dst_port);
    match p.proto {
        Proto::Udp => Packet::udp(p.ts, src, dst, payload),
        Proto::Icmp => Packet::icmp(p.ts, p.src_ip, p.dst_ip, payload),
        _ => Packet::tcp(p.ts, src, dst, p.tcp_flags, 0, 0, payload),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DialogStep {
    Syn,
    Ack,
    Data(Vec<u8>),
    Fin,
    Rst,
}

/// Both directions of a scripted dialog.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub sent: Vec<Packet>,
    pub received: Vec<Packet>,
}

impl Transcript {
    pub fn rsts_received(&self) -> usize {
        self.received.iter().filter(|p| p.tcp_flags.contains(TcpFlags::RST)).count()
    }
}

/// Plays `dialog` from `client` to `server` through the sensor path. Steps
/// after the SYN need the server's SYN/ACK; without one the dialog times out.
pub fn scripted_client(
    path: &mut SensorPath,
    client: (Ipv4Addr, u16),
    server: (Ipv4Addr, u16),
    dialog: &[DialogStep],
    start: Timestamp,
) -> Result<Transcript, SimError> {
    let mut tr = Transcript::default();
    let mut ts = start;
    let mut seq: u32 = 0x1000_0000 ^ u32::from(client.1);
    let mut server_next: Option<u32> = None;
    for step in dialog {
        let need_ack = || server_next.ok_or_else(|| SimError::Timeout(format!("{}:{}", server.0, server.1)));
        let pkt = match step {
            DialogStep::Syn => Packet::tcp(ts, client, server, TcpFlags::SYN, seq, 0, vec![]),
            DialogStep::Ack => Packet::tcp(ts, client, server, TcpFlags::ACK, seq, need_ack()?, vec![]),
            DialogStep::Data(d) => Packet::tcp(ts, client, server, TcpFlags::PSH | TcpFlags::ACK, seq, need_ack()?, d.clone()),
            DialogStep::Fin => Packet::tcp(ts, client, server, TcpFlags::FIN | TcpFlags::ACK, seq, need_ack()?, vec![]),
            DialogStep::Rst => Packet::tcp(ts, client, server, TcpFlags::RST, seq, 0, vec![]),
        };
        seq = match step {
            DialogStep::Syn | DialogStep::Fin => seq.wrapping_add(1),
            DialogStep::Data(d) => seq.wrapping_add(d.len() as u32),
            _ => seq,
        };
        let frame = pkt.encode(LinkType::Ethernet);
        tr.sent.push(pkt);
        let out = path.process_frame(&frame, LinkType::Ethernet, ts)?;
        for o in out.outbound {
            if o.dst_ip == client.0 && o.dst_port == client.1 {
                if o.tcp_flags.contains(TcpFlags::SYN) {
                    server_next = Some(o.seq.wrapping_add(1));
                }
                tr.received.push(o);
            }
        }
        ts = ts.plus_micros(CLIENT_RTT_MICROS);
    }
    Ok(tr)
}
