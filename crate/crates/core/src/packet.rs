//! Packet model plus the Ethernet/IPv4/TCP/UDP codec used on the capture path.
//!
//! [`Packet`] is the fully decoded form that carries the whole payload and the
//! TCP sequencing fields. [`PacketRecord`] is the bounded summary handed to the
//! collector and analysis pipelines.

use std::cmp::Ordering;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

/// Bytes of payload kept in a [`PacketRecord`].
pub const RECORD_PREFIX_LEN: usize = 256;

const ETH_HEADER_LEN: usize = 14;
const ETHERTYPE_IPV4: u16 = 0x0800;
const IPV4_MIN_HEADER: usize = 20;
const TCP_MIN_HEADER: usize = 20;
const UDP_HEADER: usize = 8;

pub const SENSOR_MAC: [u8; 6] = [0x02, 0x00, 0x5e, 0x10, 0x00, 0x01];
pub const ROUTER_MAC: [u8; 6] = [0x02, 0x00, 0x5e, 0x10, 0x00, 0xfe];

/// Transport protocol. Ordered by protocol number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "u8", into = "u8")]
pub enum Proto {
    Tcp,
    Udp,
    Icmp,
    Other(u8),
}

impl Proto {
    pub fn number(self) -> u8 {
        match self {
            Proto::Icmp => 1,
            Proto::Tcp => 6,
            Proto::Udp => 17,
            Proto::Other(n) => n,
        }
    }

    pub fn has_ports(self) -> bool {
        matches!(self, Proto::Tcp | Proto::Udp)
    }
}

impl From<u8> for Proto {
    fn from(n: u8) -> Self {
        match n {
            1 => Proto::Icmp,
            6 => Proto::Tcp,
            17 => Proto::Udp,
            n => Proto::Other(n),
        }
    }
}

impl From<Proto> for u8 {
    fn from(p: Proto) -> u8 {
        p.number()
    }
}

impl PartialOrd for Proto {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Proto {
    fn cmp(&self, other: &Self) -> Ordering {
        self.number().cmp(&other.number())
    }
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Proto::Tcp => f.write_str("tcp"),
            Proto::Udp => f.write_str("udp"),
            Proto::Icmp => f.write_str("icmp"),
            Proto::Other(n) => write!(f, "{n}"),
        }
    }
}

/// TCP flag byte.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const URG: TcpFlags = TcpFlags(0x20);
    pub const SYN_ACK: TcpFlags = TcpFlags(0x12);
    pub const RST_ACK: TcpFlags = TcpFlags(0x14);

    pub const NAMES: [(&'static str, u8); 6] = [
        ("FIN", 0x01),
        ("SYN", 0x02),
        ("RST", 0x04),
        ("PSH", 0x08),
        ("ACK", 0x10),
        ("URG", 0x20),
    ];

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl std::ops::BitOrAssign for TcpFlags {
    fn bitor_assign(&mut self, rhs: TcpFlags) {
        self.0 |= rhs.0;
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Self::NAMES
            .iter()
            .filter(|(_, bit)| self.0 & bit != 0)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() {
            f.write_str("NONE")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureOrigin {
    Darknet,
    Responder,
}

/// pcap link-layer types accepted by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkType {
    Ethernet,
    RawIpv4,
}

impl LinkType {
    pub fn pcap_code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIpv4 => 101,
        }
    }

    pub fn from_pcap_code(code: u32) -> Option<LinkType> {
        match code {
            1 => Some(LinkType::Ethernet),
            101 | 228 => Some(LinkType::RawIpv4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame truncated: {0}")]
    Truncated(&'static str),
    #[error("unsupported ethertype 0x{0:04x}")]
    UnsupportedEtherType(u16),
    #[error("not an IPv4 packet (version {0})")]
    NotIpv4(u8),
    #[error("invalid header: {0}")]
    BadHeader(&'static str),
}

/// One fully decoded IPv4 packet.
///
/// For protocols without ports (ICMP and anything else) `payload` holds the
/// whole IP payload, including the ICMP header.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub ts: Timestamp,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_flags: TcpFlags,
    pub seq: u32,
    pub ack: u32,
    pub window: u16,
    pub mss: Option<u16>,
    pub ttl: u8,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn tcp(
        ts: Timestamp,
        src: (Ipv4Addr, u16),
        dst: (Ipv4Addr, u16),
        flags: TcpFlags,
        seq: u32,
        ack: u32,
        payload: Vec<u8>,
    ) -> Self {
        Packet {
            ts,
            src_ip: src.0,
            dst_ip: dst.0,
            proto: Proto::Tcp,
            src_port: src.1,
            dst_port: dst.1,
            tcp_flags: flags,
            seq,
            ack,
            window: 65535,
            mss: None,
            ttl: 64,
            payload,
        }
    }

    pub fn udp(ts: Timestamp, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), payload: Vec<u8>) -> Self {
        Packet {
            ts,
            src_ip: src.0,
            dst_ip: dst.0,
            proto: Proto::Udp,
            src_port: src.1,
            dst_port: dst.1,
            tcp_flags: TcpFlags::default(),
            seq: 0,
            ack: 0,
            window: 0,
            mss: None,
            ttl: 64,
            payload,
        }
    }

    /// ICMP message; `message` is the full ICMP header and body.
    pub fn icmp(ts: Timestamp, src: Ipv4Addr, dst: Ipv4Addr, message: Vec<u8>) -> Self {
        Packet {
            proto: Proto::Icmp,
            src_port: 0,
            dst_port: 0,
            ..Packet::udp(ts, (src, 0), (dst, 0), message)
        }
    }

    pub fn record(&self, origin: CaptureOrigin) -> PacketRecord {
        let keep = self.payload.len().min(RECORD_PREFIX_LEN);
        PacketRecord {
            ts: self.ts,
            src_ip: self.src_ip,
            dst_ip: self.dst_ip,
            proto: self.proto,
            src_port: self.src_port,
            dst_port: self.dst_port,
            tcp_flags: self.tcp_flags,
            payload_len: self.payload.len() as u32,
            payload_prefix: self.payload[..keep].to_vec(),
            capture_origin: origin,
        }
    }

    /// Serialises to wire bytes for `link`.
    pub fn encode(&self, link: LinkType) -> Vec<u8> {
        let transport = self.encode_transport();
        let total_len = IPV4_MIN_HEADER + transport.len();
        let mut out = Vec::with_capacity(ETH_HEADER_LEN + total_len);
        if link == LinkType::Ethernet {
            out.extend_from_slice(&SENSOR_MAC);
            out.extend_from_slice(&ROUTER_MAC);
            out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        }
        let ip_start = out.len();
        out.push(0x45);
        out.push(0);
        out.extend_from_slice(&(total_len as u16).to_be_bytes());
        out.extend_from_slice(&[0, 0, 0x40, 0]); // id 0, DF
        out.push(self.ttl);
        out.push(self.proto.number());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.src_ip.octets());
        out.extend_from_slice(&self.dst_ip.octets());
        let csum = checksum(&[&out[ip_start..ip_start + IPV4_MIN_HEADER]]);
        out[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());
        out.extend_from_slice(&transport);
        out
    }

    fn encode_transport(&self) -> Vec<u8> {
        match self.proto {
            Proto::Tcp => {
                let opt_len = if self.mss.is_some() { 4 } else { 0 };
                let hdr = TCP_MIN_HEADER + opt_len;
                let mut seg = Vec::with_capacity(hdr + self.payload.len());
                seg.extend_from_slice(&self.src_port.to_be_bytes());
                seg.extend_from_slice(&self.dst_port.to_be_bytes());
                seg.extend_from_slice(&self.seq.to_be_bytes());
                seg.extend_from_slice(&self.ack.to_be_bytes());
                seg.push(((hdr / 4) as u8) << 4);
                seg.push(self.tcp_flags.0);
                seg.extend_from_slice(&self.window.to_be_bytes());
                seg.extend_from_slice(&[0, 0, 0, 0]);
                if let Some(mss) = self.mss {
                    seg.extend_from_slice(&[2, 4]);
                    seg.extend_from_slice(&mss.to_be_bytes());
                }
                seg.extend_from_slice(&self.payload);
                let csum = checksum(&[&self.pseudo_header(seg.len()), &seg]);
                seg[16..18].copy_from_slice(&csum.to_be_bytes());
                seg
            }
            Proto::Udp => {
                let len = UDP_HEADER + self.payload.len();
                let mut dgram = Vec::with_capacity(len);
                dgram.extend_from_slice(&self.src_port.to_be_bytes());
                dgram.extend_from_slice(&self.dst_port.to_be_bytes());
                dgram.extend_from_slice(&(len as u16).to_be_bytes());
                dgram.extend_from_slice(&[0, 0]);
                dgram.extend_from_slice(&self.payload);
                let csum = checksum(&[&self.pseudo_header(len), &dgram]);
                dgram[6..8].copy_from_slice(&csum.to_be_bytes());
                dgram
            }
            Proto::Icmp | Proto::Other(_) => self.payload.clone(),
        }
    }

    fn pseudo_header(&self, len: usize) -> [u8; 12] {
        let mut ph = [0u8; 12];
        ph[..4].copy_from_slice(&self.src_ip.octets());
        ph[4..8].copy_from_slice(&self.dst_ip.octets());
        ph[9] = self.proto.number();
        ph[10..12].copy_from_slice(&(len as u16).to_be_bytes());
        ph
    }
}

pub(crate) fn checksum(parts: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    for part in parts {
        let mut chunks = part.chunks_exact(2);
        for c in &mut chunks {
            sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
        }
        if let [last] = chunks.remainder() {
            sum += u32::from(*last) << 8;
        }
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Parses a frame into a [`Packet`] stamped with `ts`.
///
/// Either every header field is parsed or an error is returned; there is no
/// partially filled result.
pub fn parse(raw: &[u8], link: LinkType, ts: Timestamp) -> Result<Packet, DecodeError> {
    let ip = match link {
        LinkType::Ethernet => {
            if raw.len() < ETH_HEADER_LEN {
                return Err(DecodeError::Truncated("ethernet header"));
            }
            let ethertype = u16::from_be_bytes([raw[12], raw[13]]);
            if ethertype != ETHERTYPE_IPV4 {
                return Err(DecodeError::UnsupportedEtherType(ethertype));
            }
            &raw[ETH_HEADER_LEN..]
        }
        LinkType::RawIpv4 => raw,
    };
    if ip.len() < IPV4_MIN_HEADER {
        return Err(DecodeError::Truncated("ipv4 header"));
    }
    let version = ip[0] >> 4;
    if version != 4 {
        return Err(DecodeError::NotIpv4(version));
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < IPV4_MIN_HEADER {
        return Err(DecodeError::BadHeader("ihl below 5"));
    }
    if ihl > ip.len() {
        return Err(DecodeError::Truncated("ihl exceeds frame"));
    }
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if total_len < ihl {
        return Err(DecodeError::BadHeader("total length below header length"));
    }
    if total_len > ip.len() {
        return Err(DecodeError::Truncated("total length exceeds frame"));
    }
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    let frag_offset = frag & 0x1fff;
    let more_fragments = frag & 0x2000 != 0;
    let ttl = ip[8];
    let proto_num = ip[9];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let body = &ip[ihl..total_len];

    let mut pkt = Packet {
        ts,
        src_ip,
        dst_ip,
        proto: Proto::Other(proto_num),
        src_port: 0,
        dst_port: 0,
        tcp_flags: TcpFlags::default(),
        seq: 0,
        ack: 0,
        window: 0,
        mss: None,
        ttl,
        payload: Vec::new(),
    };

    // Non-initial fragments carry no transport header.
    if frag_offset != 0 {
        pkt.payload = body.to_vec();
        return Ok(pkt);
    }

    match Proto::from(proto_num) {
        Proto::Tcp if body.len() >= TCP_MIN_HEADER => {
            let data_off = usize::from(body[12] >> 4) * 4;
            if data_off < TCP_MIN_HEADER {
                return Err(DecodeError::BadHeader("tcp data offset below 5"));
            }
            if data_off > body.len() {
                if more_fragments {
                    pkt.payload = body.to_vec();
                    return Ok(pkt);
                }
                return Err(DecodeError::Truncated("tcp options exceed segment"));
            }
            pkt.proto = Proto::Tcp;
            pkt.src_port = u16::from_be_bytes([body[0], body[1]]);
            pkt.dst_port = u16::from_be_bytes([body[2], body[3]]);
            pkt.seq = u32::from_be_bytes([body[4], body[5], body[6], body[7]]);
            pkt.ack = u32::from_be_bytes([body[8], body[9], body[10], body[11]]);
            pkt.tcp_flags = TcpFlags(body[13]);
            pkt.window = u16::from_be_bytes([body[14], body[15]]);
            pkt.mss = parse_mss(&body[TCP_MIN_HEADER..data_off]);
            pkt.payload = body[data_off..].to_vec();
        }
        Proto::Tcp if !more_fragments => return Err(DecodeError::Truncated("tcp header")),
        Proto::Udp if body.len() >= UDP_HEADER => {
            let udp_len = usize::from(u16::from_be_bytes([body[4], body[5]]));
            if !more_fragments && (udp_len < UDP_HEADER || udp_len > body.len()) {
                return Err(DecodeError::BadHeader("udp length"));
            }
            let end = if more_fragments { body.len() } else { udp_len };
            pkt.proto = Proto::Udp;
            pkt.src_port = u16::from_be_bytes([body[0], body[1]]);
            pkt.dst_port = u16::from_be_bytes([body[2], body[3]]);
            pkt.payload = body[UDP_HEADER..end].to_vec();
        }
        Proto::Udp if !more_fragments => return Err(DecodeError::Truncated("udp header")),
        Proto::Icmp => {
            pkt.proto = Proto::Icmp;
            pkt.payload = body.to_vec();
        }
        _ => pkt.payload = body.to_vec(),
    }
    Ok(pkt)
}

fn parse_mss(mut opts: &[u8]) -> Option<u16> {
    while let Some(&kind) = opts.first() {
        match kind {
            0 => return None,
            1 => opts = &opts[1..],
            _ => {
                let len = usize::from(*opts.get(1)?);
                if len < 2 || len > opts.len() {
                    return None;
                }
                if kind == 2 && len == 4 {
                    return Some(u16::from_be_bytes([opts[2], opts[3]]));
                }
                opts = &opts[len..];
            }
        }
    }
    None
}

/// Standard 5-tuple. Ordered lexicographically by field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FlowKey {
    pub fn of_packet(p: &Packet) -> Self {
        FlowKey {
            src_ip: p.src_ip,
            dst_ip: p.dst_ip,
            proto: p.proto,
            src_port: p.src_port,
            dst_port: p.dst_port,
        }
    }

    pub fn of_record(r: &PacketRecord) -> Self {
        FlowKey {
            src_ip: r.src_ip,
            dst_ip: r.dst_ip,
            proto: r.proto,
            src_port: r.src_port,
            dst_port: r.dst_port,
        }
    }

    /// 13-byte canonical encoding.
    pub fn to_bytes(&self) -> [u8; 13] {
        let mut b = [0u8; 13];
        b[..4].copy_from_slice(&self.src_ip.octets());
        b[4..8].copy_from_slice(&self.dst_ip.octets());
        b[8] = self.proto.number();
        b[9..11].copy_from_slice(&self.src_port.to_be_bytes());
        b[11..13].copy_from_slice(&self.dst_port.to_be_bytes());
        b
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} {}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto
        )
    }
}

/// One observed packet as seen by the collector and analysis pipelines.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ts: Timestamp,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_flags: TcpFlags,
    pub payload_len: u32,
    #[serde(with = "b64")]
    pub payload_prefix: Vec<u8>,
    pub capture_origin: CaptureOrigin,
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    // Offsets computed by hand from the header layouts, independent of parse().
    fn read_u16(b: &[u8], at: usize) -> u16 {
        u16::from_be_bytes([b[at], b[at + 1]])
    }

    #[test]
    fn minimal_syn_is_forty_bytes() {
        let p = Packet::tcp(
            Timestamp(1),
            (ip("198.51.100.7"), 40000),
            (ip("10.9.0.77"), 22),
            TcpFlags::SYN,
            1000,
            0,
            vec![],
        );
        let raw = p.encode(LinkType::RawIpv4);
        assert_eq!(raw.len(), 40);
        let rec = parse(&raw, LinkType::RawIpv4, Timestamp(1))
            .unwrap()
            .record(CaptureOrigin::Darknet);
        assert_eq!(rec.tcp_flags, TcpFlags::SYN);
        assert_eq!(rec.payload_len, 0);
        assert_eq!(rec.dst_port, 22);
    }

    #[test]
    fn checksums_verify() {
        let p = Packet::udp(Timestamp(0), (ip("1.2.3.4"), 5), (ip("10.0.0.1"), 53), b"abc".to_vec());
        let raw = p.encode(LinkType::RawIpv4);
        assert_eq!(checksum(&[&raw[..20]]), 0);
        let ph = p.pseudo_header(raw.len() - 20);
        assert_eq!(checksum(&[&ph, &raw[20..]]), 0);
    }

    #[test]
    fn ihl_beyond_frame_is_rejected() {
        let mut raw = Packet::tcp(
            Timestamp(0),
            (ip("1.2.3.4"), 1),
            (ip("10.9.0.1"), 2),
            TcpFlags::SYN,
            0,
            0,
            vec![],
        )
        .encode(LinkType::RawIpv4);
        raw[0] = 0x4f; // 60-byte header
        raw.truncate(40);
        raw[2..4].copy_from_slice(&40u16.to_be_bytes());
        assert_eq!(
            parse(&raw[..40], LinkType::RawIpv4, Timestamp(0)),
            Err(DecodeError::Truncated("ihl exceeds frame"))
        );
        raw.truncate(30);
        assert!(parse(&raw, LinkType::RawIpv4, Timestamp(0)).is_err());
    }

    #[test]
    fn udp_300_byte_payload_against_offset_calculator() {
        let payload: Vec<u8> = (0..300u32).map(|i| (i * 7 % 251) as u8).collect();
        let p = Packet::udp(Timestamp(9), (ip("203.0.113.5"), 5353), (ip("10.9.0.9"), 1900), payload.clone());
        let raw = p.encode(LinkType::Ethernet);
        // Independent offsets: eth 14, ip ihl from byte 14, udp header 8.
        let ihl = usize::from(raw[14] & 0x0f) * 4;
        let udp_at = 14 + ihl;
        let udp_len = usize::from(read_u16(&raw, udp_at + 4));
        assert_eq!(udp_len - 8, 300);
        assert_eq!(read_u16(&raw, udp_at + 2), 1900);
        let rec = parse(&raw, LinkType::Ethernet, Timestamp(9))
            .unwrap()
            .record(CaptureOrigin::Darknet);
        assert_eq!(rec.payload_len, 300);
        assert_eq!(rec.payload_prefix.len(), 256);
        assert_eq!(rec.payload_prefix[..], raw[udp_at + 8..udp_at + 8 + 256]);
    }

    #[test]
    fn non_initial_fragment_is_other() {
        let mut raw = Packet::tcp(
            Timestamp(0),
            (ip("1.2.3.4"), 1),
            (ip("10.9.0.1"), 2),
            TcpFlags::SYN,
            0,
            0,
            b"xx".to_vec(),
        )
        .encode(LinkType::RawIpv4);
        raw[6] = 0x00;
        raw[7] = 0x10;
        let p = parse(&raw, LinkType::RawIpv4, Timestamp(0)).unwrap();
        assert_eq!(p.proto, Proto::Other(6));
        assert_eq!(p.src_port, 0);
        assert_eq!(p.payload.len(), 22);
    }

    #[test]
    fn garbage_and_non_ipv4() {
        assert!(parse(&[], LinkType::Ethernet, Timestamp(0)).is_err());
        let mut arp = vec![0u8; 42];
        arp[12] = 0x08;
        arp[13] = 0x06;
        assert_eq!(
            parse(&arp, LinkType::Ethernet, Timestamp(0)),
            Err(DecodeError::UnsupportedEtherType(0x0806))
        );
        let mut v6 = vec![0u8; 40];
        v6[0] = 0x60;
        assert_eq!(parse(&v6, LinkType::RawIpv4, Timestamp(0)), Err(DecodeError::NotIpv4(6)));
    }

    fn arb_packet() -> impl Strategy<Value = Packet> {
        (
            any::<u32>(),
            any::<u32>(),
            prop_oneof![Just(Proto::Tcp), Just(Proto::Udp), Just(Proto::Icmp)],
            any::<u16>(),
            any::<u16>(),
            0u8..64,
            any::<u32>(),
            any::<u32>(),
            proptest::option::of(536u16..9000),
            proptest::collection::vec(any::<u8>(), 0..600),
        )
            .prop_map(|(s, d, proto, sp, dp, flags, seq, ack, mss, payload)| {
                let mut p = Packet::tcp(
                    Timestamp(5),
                    (Ipv4Addr::from(s), sp),
                    (Ipv4Addr::from(d), dp),
                    TcpFlags(flags),
                    seq,
                    ack,
                    payload,
                );
                match proto {
                    Proto::Tcp => p.mss = mss,
                    Proto::Udp => p = Packet::udp(p.ts, (p.src_ip, sp), (p.dst_ip, dp), p.payload),
                    _ => p = Packet::icmp(p.ts, p.src_ip, p.dst_ip, p.payload),
                }
                p
            })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(p in arb_packet(), eth in any::<bool>()) {
            let link = if eth { LinkType::Ethernet } else { LinkType::RawIpv4 };
            let back = parse(&p.encode(link), link, p.ts).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn truncation_never_yields_partial_records(p in arb_packet(), cut in 0usize..60) {
            let raw = p.encode(LinkType::RawIpv4);
            let keep = raw.len().saturating_sub(cut + 1);
            // Either an error or a full parse of a shorter but self-consistent
            // frame; never fields from beyond the cut.
            if let Ok(q) = parse(&raw[..keep], LinkType::RawIpv4, p.ts) {
                prop_assert!(q.payload.len() + 20 <= keep);
            }
        }
    }
}
