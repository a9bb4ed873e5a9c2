//! Passive capture over darknet address ranges.
//!
//! Three attachment modes decide which arriving packets count as darknet
//! traffic: addresses assigned to the sensor NIC, traffic routed to the
//! sensor's single address, or addresses claimed by answering the border
//! router's ARP requests.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::BufReader;
use std::net::Ipv4Addr;
use std::path::Path;

use pcap_file::pcap::PcapReader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{any_overlap, AddressRange};
use crate::packet::{self, CaptureOrigin, DecodeError, LinkType, Packet, PacketRecord, SENSOR_MAC};
use crate::time::{Timestamp, MICROS_PER_SEC};
use crate::toolbox::{Action, Direction, RuleMatch, SteeringRule};

/// First priority used for darknet rules.
pub const RULE_BAND: u32 = 100;
const ACCEPT_OFFSET: u32 = 400;

/// ARP replies allowed per requesting source in any one-second window.
pub const ARP_REPLIES_PER_SEC: usize = 10;

#[derive(Debug, Error)]
pub enum DarknetError {
    #[error("invalid darknet config: {0}")]
    InvalidConfig(String),
    #[error("packet source unavailable: {0}")]
    SourceUnavailable(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentMode {
    DirectAssign,
    RoutedToSensor,
    ArpResponder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DarknetConfig {
    pub ranges: Vec<AddressRange>,
    pub mode: AttachmentMode,
    #[serde(default = "default_mac")]
    pub sensor_mac: [u8; 6],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_ip: Option<Ipv4Addr>,
}

fn default_mac() -> [u8; 6] {
    SENSOR_MAC
}

impl DarknetConfig {
    pub fn new(ranges: Vec<AddressRange>, mode: AttachmentMode) -> Self {
        DarknetConfig {
            ranges,
            mode,
            sensor_mac: SENSOR_MAC,
            sensor_ip: None,
        }
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        self.ranges.iter().any(|r| r.contains(addr))
    }

    /// Checks the config against the address ranges the sensor owns.
    pub fn validate(&self, owned: &[AddressRange]) -> Result<(), DarknetError> {
        if let Some((a, b)) = any_overlap(&self.ranges) {
            return Err(DarknetError::InvalidConfig(format!("ranges {a} and {b} overlap")));
        }
        for r in &self.ranges {
            if !owned.iter().any(|o| o.covers(r)) {
                return Err(DarknetError::InvalidConfig(format!(
                    "range {r} is not owned by the sensor"
                )));
            }
        }
        if self.mode == AttachmentMode::RoutedToSensor {
            match self.sensor_ip {
                None => {
                    return Err(DarknetError::InvalidConfig(
                        "routed mode needs the sensor address".into(),
                    ))
                }
                Some(ip) if self.contains(ip) => {
                    return Err(DarknetError::InvalidConfig(format!(
                        "sensor address {ip} lies inside a darknet range"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Steering rules the darknet needs: silence outbound traffic sourced from
/// the ranges and admit inbound traffic to them.
pub fn darknet_rules(config: &DarknetConfig) -> Vec<SteeringRule> {
    let mut ranges = config.ranges.clone();
    ranges.sort();
    let drops = ranges.iter().enumerate().map(|(i, r)| SteeringRule {
        priority: RULE_BAND + i as u32,
        direction: Direction::Outbound,
        matcher: RuleMatch {
            src_range: Some(*r),
            ..Default::default()
        },
        action: Action::Drop,
    });
    let accepts = ranges.iter().enumerate().map(|(i, r)| SteeringRule {
        priority: RULE_BAND + ACCEPT_OFFSET + i as u32,
        direction: Direction::Inbound,
        matcher: RuleMatch {
            dst_range: Some(*r),
            ..Default::default()
        },
        action: Action::Accept,
    });
    drops.chain(accepts).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArpQuery {
    pub ts: Timestamp,
    pub sender_ip: Ipv4Addr,
    pub sender_mac: [u8; 6],
    pub target_ip: Ipv4Addr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArpReply {
    pub ts: Timestamp,
    /// The claimed address.
    pub ip: Ipv4Addr,
    pub mac: [u8; 6],
    pub to_ip: Ipv4Addr,
    pub to_mac: [u8; 6],
}

/// Sliding one-second window of replies per requesting source.
#[derive(Debug, Default, Clone)]
pub struct ArpLimiter {
    sent: HashMap<Ipv4Addr, VecDeque<Timestamp>>,
}

impl ArpLimiter {
    fn admit(&mut self, source: Ipv4Addr, now: Timestamp) -> bool {
        let q = self.sent.entry(source).or_default();
        while q.front().is_some_and(|t| now.since(*t) >= MICROS_PER_SEC) {
            q.pop_front();
        }
        if q.len() >= ARP_REPLIES_PER_SEC {
            return false;
        }
        q.push_back(now);
        true
    }
}

/// Answers who-has for darknet addresses with the sensor MAC.
pub fn arp_respond(
    query: &ArpQuery,
    config: &DarknetConfig,
    limiter: &mut ArpLimiter,
) -> Option<ArpReply> {
    if config.mode != AttachmentMode::ArpResponder || !config.contains(query.target_ip) {
        return None;
    }
    if !limiter.admit(query.sender_ip, query.ts) {
        return None;
    }
    Some(ArpReply {
        ts: query.ts,
        ip: query.target_ip,
        mac: config.sensor_mac,
        to_ip: query.sender_ip,
        to_mac: query.sender_mac,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureStats {
    pub seen: u64,
    pub captured: u64,
    pub rejected: u64,
    pub decode_errors: u64,
    pub arp_replies: u64,
    pub arp_suppressed: u64,
}

/// Capture state for one darknet config.
#[derive(Debug, Clone)]
pub struct DarknetCapture {
    config: DarknetConfig,
    claims: HashSet<Ipv4Addr>,
    limiter: ArpLimiter,
    stats: CaptureStats,
}

impl DarknetCapture {
    pub fn new(config: DarknetConfig) -> Self {
        DarknetCapture {
            config,
            claims: HashSet::new(),
            limiter: ArpLimiter::default(),
            stats: CaptureStats::default(),
        }
    }

    pub fn config(&self) -> &DarknetConfig {
        &self.config
    }

    pub fn stats(&self) -> CaptureStats {
        self.stats
    }

    pub fn is_claimed(&self, ip: Ipv4Addr) -> bool {
        self.claims.contains(&ip)
    }

    /// Whether the attachment mode delivers `pkt` to this capture.
    pub fn accepts(&self, pkt: &Packet) -> bool {
        if !self.config.contains(pkt.dst_ip) {
            return false;
        }
        match self.config.mode {
            AttachmentMode::DirectAssign | AttachmentMode::RoutedToSensor => true,
            AttachmentMode::ArpResponder => self.claims.contains(&pkt.dst_ip),
        }
    }

    pub fn observe(&mut self, pkt: &Packet) -> Option<PacketRecord> {
        self.stats.seen += 1;
        if self.accepts(pkt) {
            self.stats.captured += 1;
            Some(pkt.record(CaptureOrigin::Darknet))
        } else {
            self.stats.rejected += 1;
            None
        }
    }

    pub fn on_arp(&mut self, query: &ArpQuery) -> Option<ArpReply> {
        let reply = arp_respond(query, &self.config, &mut self.limiter);
        match reply {
            Some(r) => {
                self.claims.insert(r.ip);
                self.stats.arp_replies += 1;
            }
            None if self.config.contains(query.target_ip) => self.stats.arp_suppressed += 1,
            None => {}
        }
        reply
    }

    fn note_decode_error(&mut self) {
        self.stats.decode_errors += 1;
    }
}

/// Decodes one frame into a record.
pub fn decode(
    raw: &[u8],
    link: LinkType,
    ts: Timestamp,
    origin: CaptureOrigin,
) -> Result<PacketRecord, DecodeError> {
    packet::parse(raw, link, ts).map(|p| p.record(origin))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceEvent {
    Frame {
        ts: Timestamp,
        link: LinkType,
        bytes: Vec<u8>,
    },
    Arp(ArpQuery),
}

pub trait PacketSource {
    fn next_event(&mut self) -> Option<Result<SourceEvent, DarknetError>>;
}

/// In-memory event stream, used by the simulator.
#[derive(Debug, Default)]
pub struct MemorySource {
    events: VecDeque<SourceEvent>,
}

impl MemorySource {
    pub fn new(events: impl IntoIterator<Item = SourceEvent>) -> Self {
        MemorySource {
            events: events.into_iter().collect(),
        }
    }

    pub fn push(&mut self, ev: SourceEvent) {
        self.events.push_back(ev);
    }
}

impl PacketSource for MemorySource {
    fn next_event(&mut self) -> Option<Result<SourceEvent, DarknetError>> {
        self.events.pop_front().map(Ok)
    }
}

/// Replays a pcap file.
pub struct PcapReplay {
    reader: PcapReader<BufReader<File>>,
    link: LinkType,
}

impl PcapReplay {
    pub fn open(path: &Path) -> Result<Self, DarknetError> {
        let file = File::open(path)
            .map_err(|e| DarknetError::SourceUnavailable(format!("{}: {e}", path.display())))?;
        let reader = PcapReader::new(BufReader::new(file))
            .map_err(|e| DarknetError::SourceUnavailable(format!("{}: {e}", path.display())))?;
        let code = u32::from(reader.header().datalink);
        let link = LinkType::from_pcap_code(code).ok_or_else(|| {
            DarknetError::SourceUnavailable(format!("unsupported link type {code}"))
        })?;
        Ok(PcapReplay { reader, link })
    }
}

impl PacketSource for PcapReplay {
    fn next_event(&mut self) -> Option<Result<SourceEvent, DarknetError>> {
        let pkt = match self.reader.next_packet()? {
            Ok(p) => p,
            Err(e) => return Some(Err(DarknetError::SourceUnavailable(e.to_string()))),
        };
        Some(Ok(SourceEvent::Frame {
            ts: Timestamp(pkt.timestamp.as_micros() as u64),
            link: self.link,
            bytes: pkt.data.into_owned(),
        }))
    }
}

/// An open capture stream over a source.
pub struct CaptureHandle<S> {
    capture: DarknetCapture,
    source: S,
    rules: Vec<SteeringRule>,
    arp_replies: Vec<ArpReply>,
}

/// Opens a capture stream. The handle carries the steering rules the darknet
/// requires; callers install them into the sensor's toolbox.
pub fn attach<S: PacketSource>(
    config: DarknetConfig,
    owned: &[AddressRange],
    source: S,
) -> Result<CaptureHandle<S>, DarknetError> {
    config.validate(owned)?;
    let rules = darknet_rules(&config);
    Ok(CaptureHandle {
        capture: DarknetCapture::new(config),
        source,
        rules,
        arp_replies: Vec::new(),
    })
}

impl<S: PacketSource> CaptureHandle<S> {
    pub fn steering_rules(&self) -> &[SteeringRule] {
        &self.rules
    }

    pub fn capture(&self) -> &DarknetCapture {
        &self.capture
    }

    pub fn take_arp_replies(&mut self) -> Vec<ArpReply> {
        std::mem::take(&mut self.arp_replies)
    }

    /// Next captured record; undecodable frames are counted and skipped.
    pub fn next_record(&mut self) -> Option<Result<PacketRecord, DarknetError>> {
        loop {
            match self.source.next_event()? {
                Err(e) => return Some(Err(e)),
                Ok(SourceEvent::Arp(q)) => {
                    if let Some(r) = self.capture.on_arp(&q) {
                        self.arp_replies.push(r);
                    }
                }
                Ok(SourceEvent::Frame { ts, link, bytes }) => match packet::parse(&bytes, link, ts) {
                    Ok(p) => {
                        if let Some(rec) = self.capture.observe(&p) {
                            return Some(Ok(rec));
                        }
                    }
                    Err(_) => self.capture.note_decode_error(),
                },
            }
        }
    }
}

impl<S: PacketSource> Iterator for CaptureHandle<S> {
    type Item = Result<PacketRecord, DarknetError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::TcpFlags;
    use crate::toolbox::{compile, evaluate};

    fn range(s: &str) -> AddressRange {
        s.parse().unwrap()
    }

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn syn_to(dst: &str, ts: u64) -> SourceEvent {
        SourceEvent::Frame {
            ts: Timestamp(ts),
            link: LinkType::Ethernet,
            bytes: Packet::tcp(
                Timestamp(ts),
                (ip("198.51.100.1"), 40000),
                (ip(dst), 23),
                TcpFlags::SYN,
                1,
                0,
                vec![],
            )
            .encode(LinkType::Ethernet),
        }
    }

    fn who_has(target: &str, ts: u64) -> ArpQuery {
        ArpQuery {
            ts: Timestamp(ts),
            sender_ip: ip("10.9.0.254"),
            sender_mac: [2, 0, 0, 0, 0, 0xfe],
            target_ip: ip(target),
        }
    }

    #[test]
    fn direct_assign_membership() {
        let cfg = DarknetConfig::new(vec![range("10.9.0.0/24")], AttachmentMode::DirectAssign);
        let src = MemorySource::new([syn_to("10.9.0.77", 1), syn_to("10.8.0.1", 2)]);
        let recs: Vec<_> = attach(cfg, &[range("10.9.0.0/23")], src)
            .unwrap()
            .map(Result::unwrap)
            .collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].dst_ip, ip("10.9.0.77"));
        assert_eq!(recs[0].capture_origin, CaptureOrigin::Darknet);
    }

    #[test]
    fn arp_mode_needs_a_claim() {
        let cfg = DarknetConfig::new(vec![range("10.9.0.0/24")], AttachmentMode::ArpResponder);
        let src = MemorySource::new([
            syn_to("10.9.0.5", 1),
            SourceEvent::Arp(who_has("10.9.0.5", 2)),
            syn_to("10.9.0.5", 3),
        ]);
        let mut h = attach(cfg, &[range("10.9.0.0/24")], src).unwrap();
        let recs: Vec<_> = h.by_ref().map(Result::unwrap).collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].ts, Timestamp(3));
        assert_eq!(h.take_arp_replies().len(), 1);
        assert_eq!(h.capture().stats().rejected, 1);
    }

    #[test]
    fn arp_replies() {
        let cfg = DarknetConfig::new(vec![range("10.9.0.0/24")], AttachmentMode::ArpResponder);
        let mut lim = ArpLimiter::default();
        let r = arp_respond(&who_has("10.9.0.200", 0), &cfg, &mut lim).unwrap();
        assert_eq!(r.mac, cfg.sensor_mac);
        assert_eq!(r.ip, ip("10.9.0.200"));
        assert!(arp_respond(&who_has("192.0.2.1", 0), &cfg, &mut lim).is_none());
        let direct = DarknetConfig::new(cfg.ranges.clone(), AttachmentMode::DirectAssign);
        assert!(arp_respond(&who_has("10.9.0.1", 0), &direct, &mut lim).is_none());
    }

    #[test]
    fn arp_rate_limit_per_source() {
        let cfg = DarknetConfig::new(vec![range("10.9.0.0/24")], AttachmentMode::ArpResponder);
        let mut lim = ArpLimiter::default();
        let replies = (0..100)
            .filter(|i| arp_respond(&who_has("10.9.0.9", i * 10_000), &cfg, &mut lim).is_some())
            .count();
        assert_eq!(replies, 10);
        // A different requester has its own budget.
        let mut other = who_has("10.9.0.9", 500_000);
        other.sender_ip = ip("10.9.0.253");
        assert!(arp_respond(&other, &cfg, &mut lim).is_some());
        // The window slides: a second later the first source is answered again.
        assert!(arp_respond(&who_has("10.9.0.9", 1_000_000), &cfg, &mut lim).is_some());
    }

    #[test]
    fn rules_for_ranges() {
        let one = darknet_rules(&DarknetConfig::new(vec![range("10.9.0.0/24")], AttachmentMode::DirectAssign));
        assert_eq!(one[0].direction, Direction::Outbound);
        assert_eq!(one[0].matcher.src_range, Some(range("10.9.0.0/24")));
        assert_eq!(one[0].action, Action::Drop);
        assert!(darknet_rules(&DarknetConfig::new(vec![], AttachmentMode::DirectAssign)).is_empty());
    }

    #[test]
    fn two_ranges_against_per_address_oracle() {
        let ranges = vec![range("10.9.0.8/30"), range("10.9.0.0/30")];
        let rules = darknet_rules(&DarknetConfig::new(ranges.clone(), AttachmentMode::DirectAssign));
        let drops: Vec<_> = rules.iter().filter(|r| r.action == Action::Drop).collect();
        assert_eq!(drops.len(), 2);
        assert!(drops[0].priority < drops[1].priority);
        assert_eq!(drops[0].matcher.src_range, Some(range("10.9.0.0/30")));
        let program = compile(rules, vec![]).unwrap();
        // Oracle: explicit list of the eight darknet addresses.
        let darknet: HashSet<Ipv4Addr> = (0..4)
            .map(|i| Ipv4Addr::new(10, 9, 0, i))
            .chain((8..12).map(|i| Ipv4Addr::new(10, 9, 0, i)))
            .collect();
        for last in 0..16u8 {
            let src = Ipv4Addr::new(10, 9, 0, last);
            let p = Packet::tcp(Timestamp(0), (src, 1), (ip("1.1.1.1"), 2), TcpFlags::RST, 0, 0, vec![]);
            let expect = if darknet.contains(&src) { Action::Drop } else { Action::Accept };
            assert_eq!(evaluate(&program, &p, Direction::Outbound), &expect, "{src}");
        }
    }

    #[test]
    fn config_validation() {
        let owned = [range("10.9.0.0/24")];
        let mut cfg = DarknetConfig::new(vec![range("10.9.0.0/25")], AttachmentMode::RoutedToSensor);
        assert!(cfg.validate(&owned).is_err());
        cfg.sensor_ip = Some(ip("10.9.0.3"));
        assert!(cfg.validate(&owned).is_err());
        cfg.sensor_ip = Some(ip("10.9.0.200"));
        cfg.validate(&owned).unwrap();
        cfg.ranges = vec![range("10.10.0.0/24")];
        assert!(cfg.validate(&owned).is_err());
    }

    #[test]
    fn missing_pcap_is_unavailable() {
        assert!(matches!(
            PcapReplay::open(Path::new("/nonexistent/x.pcap")),
            Err(DarknetError::SourceUnavailable(_))
        ));
    }

    #[test]
    fn direct_and_routed_capture_the_same() {
        let owned = [range("10.9.0.0/24")];
        let events: Vec<_> = (0..50u64)
            .map(|i| syn_to(&format!("10.9.0.{}", i * 5 % 256), i))
            .chain([syn_to("10.9.1.1", 99)])
            .collect();
        let direct = DarknetConfig::new(vec![range("10.9.0.0/25")], AttachmentMode::DirectAssign);
        let routed = DarknetConfig {
            sensor_ip: Some(ip("10.9.0.200")),
            ..DarknetConfig::new(vec![range("10.9.0.0/25")], AttachmentMode::RoutedToSensor)
        };
        let a: Vec<_> = attach(direct, &owned, MemorySource::new(events.clone())).unwrap().map(Result::unwrap).collect();
        let b: Vec<_> = attach(routed, &owned, MemorySource::new(events)).unwrap().map(Result::unwrap).collect();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }
}
