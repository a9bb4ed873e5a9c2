//! IPv4 prefixes and port ranges.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrError {
    #[error("prefix length {0} out of range 0-32")]
    PrefixLength(u8),
    #[error("{base}/{prefix_len} is not the network address (expected {expected})")]
    NotCanonical {
        base: Ipv4Addr,
        prefix_len: u8,
        expected: Ipv4Addr,
    },
    #[error("cannot parse address range `{0}`")]
    Parse(String),
    #[error("cannot parse port range `{0}`")]
    PortParse(String),
    #[error("port range {0}-{1} is inverted")]
    PortInverted(u16, u16),
}

/// An IPv4 prefix whose base is the canonical network address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AddressRange {
    base: Ipv4Addr,
    prefix_len: u8,
}

impl AddressRange {
    pub fn new(base: Ipv4Addr, prefix_len: u8) -> Result<Self, AddrError> {
        if prefix_len > 32 {
            return Err(AddrError::PrefixLength(prefix_len));
        }
        let expected = Ipv4Addr::from(u32::from(base) & mask(prefix_len));
        if expected != base {
            return Err(AddrError::NotCanonical {
                base,
                prefix_len,
                expected,
            });
        }
        Ok(Self { base, prefix_len })
    }

    /// Builds the range containing `addr`, truncating host bits.
    pub fn containing(addr: Ipv4Addr, prefix_len: u8) -> Result<Self, AddrError> {
        if prefix_len > 32 {
            return Err(AddrError::PrefixLength(prefix_len));
        }
        Ok(Self {
            base: Ipv4Addr::from(u32::from(addr) & mask(prefix_len)),
            prefix_len,
        })
    }

    pub fn base(&self) -> Ipv4Addr {
        self.base
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    pub fn first(&self) -> u32 {
        u32::from(self.base)
    }

    pub fn last(&self) -> u32 {
        self.first() | !mask(self.prefix_len)
    }

    /// Number of addresses covered.
    pub fn size(&self) -> u64 {
        1u64 << (32 - u32::from(self.prefix_len))
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & mask(self.prefix_len) == self.first()
    }

    pub fn overlaps(&self, other: &AddressRange) -> bool {
        self.first() <= other.last() && other.first() <= self.last()
    }

    /// Whether `other` lies entirely inside `self`.
    pub fn covers(&self, other: &AddressRange) -> bool {
        self.first() <= other.first() && other.last() <= self.last()
    }

    /// The `i`-th address of the range.
    pub fn nth(&self, i: u64) -> Option<Ipv4Addr> {
        (i < self.size()).then(|| Ipv4Addr::from(self.first() + i as u32))
    }

    /// Offset of `addr` inside the range.
    pub fn offset_of(&self, addr: Ipv4Addr) -> Option<u64> {
        self.contains(addr)
            .then(|| u64::from(u32::from(addr) - self.first()))
    }

    pub fn iter(&self) -> impl Iterator<Item = Ipv4Addr> {
        (u64::from(self.first())..=u64::from(self.last())).map(|a| Ipv4Addr::from(a as u32))
    }
}

fn mask(prefix_len: u8) -> u32 {
    if prefix_len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(prefix_len))
    }
}

/// True if any two ranges in the slice overlap.
pub fn any_overlap(ranges: &[AddressRange]) -> Option<(AddressRange, AddressRange)> {
    let mut sorted = ranges.to_vec();
    sorted.sort();
    sorted
        .windows(2)
        .find(|w| w[0].overlaps(&w[1]))
        .map(|w| (w[0], w[1]))
}

impl fmt::Display for AddressRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix_len)
    }
}

impl FromStr for AddressRange {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ip, len) = match s.split_once('/') {
            Some((ip, len)) => (ip, len),
            None => (s, "32"),
        };
        let ip: Ipv4Addr = ip.trim().parse().map_err(|_| AddrError::Parse(s.into()))?;
        let len: u8 = len.trim().parse().map_err(|_| AddrError::Parse(s.into()))?;
        AddressRange::new(ip, len)
    }
}

impl Serialize for AddressRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AddressRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive port range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRange {
    pub start: u16,
    pub end: u16,
}

impl PortRange {
    pub fn new(start: u16, end: u16) -> Result<Self, AddrError> {
        if start > end {
            return Err(AddrError::PortInverted(start, end));
        }
        Ok(Self { start, end })
    }

    pub fn single(port: u16) -> Self {
        Self {
            start: port,
            end: port,
        }
    }

    pub fn all() -> Self {
        Self {
            start: 0,
            end: u16::MAX,
        }
    }

    pub fn contains(&self, port: u16) -> bool {
        self.start <= port && port <= self.end
    }

    pub fn overlaps(&self, other: &PortRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for PortRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.start == self.end {
            write!(f, "{}", self.start)
        } else {
            write!(f, "{}-{}", self.start, self.end)
        }
    }
}

impl FromStr for PortRange {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |p: &str| {
            p.trim()
                .parse::<u16>()
                .map_err(|_| AddrError::PortParse(s.into()))
        };
        match s.split_once(['-', ':']) {
            Some((a, b)) => PortRange::new(parse(a)?, parse(b)?),
            None => Ok(PortRange::single(parse(s)?)),
        }
    }
}

impl Serialize for PortRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u16),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => Ok(PortRange::single(p)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}
