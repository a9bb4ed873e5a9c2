//! Traffic metrics over captured records: per-day 5-tuple flows, per-address
//! flow series, common-sender overlap between sensors, destination-port CDFs,
//! unique-sender counts and backscatter labelling.
//!
//! Every function is pure and produces deterministically ordered output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::AddressRange;
use crate::collector::{self, CollectorError};
use crate::packet::{CaptureOrigin, FlowKey, PacketRecord, Proto, TcpFlags};
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no traffic inside the analysis window")]
    WindowEmpty,
    #[error("overlap needs at least two sensors, got {0}")]
    TooFewSensors(usize),
    #[error("subnet {0} is not a /24")]
    NotSlash24(AddressRange),
    #[error("top_fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("window must span at least one day")]
    BadWindow,
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Packets sharing one 5-tuple within one UTC day.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub day: NaiveDate,
    pub packets: u64,
    pub bytes: u64,
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
    pub flags_seen: u8,
}

fn fold(map: &mut BTreeMap<(NaiveDate, FlowKey), FlowRecord>, r: &PacketRecord) {
    let key = FlowKey::of_record(r);
    let day = r.ts.day();
    map.entry((day, key))
        .and_modify(|f| {
            f.packets += 1;
            f.bytes += u64::from(r.payload_len);
            f.first_ts = f.first_ts.min(r.ts);
            f.last_ts = f.last_ts.max(r.ts);
            f.flags_seen |= r.tcp_flags.bits();
        })
        .or_insert(FlowRecord {
            key,
            day,
            packets: 1,
            bytes: u64::from(r.payload_len),
            first_ts: r.ts,
            last_ts: r.ts,
            flags_seen: r.tcp_flags.bits(),
        });
}

/// Flows of `day`, sorted by key. Records from other days are ignored.
pub fn aggregate_flows<'a>(records: impl IntoIterator<Item = &'a PacketRecord>, day: NaiveDate) -> Vec<FlowRecord> {
    let mut map = BTreeMap::new();
    for r in records.into_iter().filter(|r| r.ts.day() == day) {
        fold(&mut map, r);
    }
    map.into_values().collect()
}

/// Flows of every day present, sorted by (day, key).
pub fn aggregate_all<'a>(records: impl IntoIterator<Item = &'a PacketRecord>) -> Vec<FlowRecord> {
    let mut map = BTreeMap::new();
    for r in records {
        fold(&mut map, r);
    }
    map.into_values().collect()
}

/// Per-address flow counts for one day over a /24.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySeries {
    pub day: NaiveDate,
    pub counts: Vec<u64>,
    pub min: u64,
    pub mean: f64,
    pub max: u64,
    pub total: u64,
}

/// Flows per destination address for each of `days`, averaged over all 256
/// addresses of `subnet`.
pub fn flows_per_ip_series(flows: &[FlowRecord], subnet: AddressRange, days: &[NaiveDate]) -> Result<Vec<DaySeries>, AnalysisError> {
    if subnet.prefix_len() != 24 {
        return Err(AnalysisError::NotSlash24(subnet));
    }
    let mut per_day: BTreeMap<NaiveDate, Vec<u64>> = days.iter().map(|d| (*d, vec![0u64; 256])).collect();
    for f in flows {
        if let (Some(counts), Some(off)) = (per_day.get_mut(&f.day), subnet.offset_of(f.key.dst_ip)) {
            counts[off as usize] += 1;
        }
    }
    Ok(per_day
        .into_iter()
        .map(|(day, counts)| {
            let total: u64 = counts.iter().sum();
            DaySeries {
                day,
                min: *counts.iter().min().expect("256 entries"),
                max: *counts.iter().max().expect("256 entries"),
                mean: total as f64 / counts.len() as f64,
                total,
                counts,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `|S_i ∩ S_j| / |S_i|`.
    #[default]
    RowNormalized,
    /// `|S_i ∩ S_j| / |S_i ∪ S_j|`.
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapParams {
    /// First day of the window; `None` ends the window on the latest day seen.
    pub window_start: Option<NaiveDate>,
    pub window_days: u32,
    pub min_packets: u64,
    pub top_fraction: Option<f64>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for OverlapParams {
    fn default() -> Self {
        OverlapParams {
            window_start: None,
            window_days: 15,
            min_packets: 500,
            top_fraction: None,
            normalization: Normalization::RowNormalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub sensors: Vec<String>,
    pub ratio: Vec<Vec<f64>>,
    /// `|S_i ∩ S_j|`.
    pub common: Vec<Vec<u64>>,
    /// `|S_i|`.
    pub set_sizes: Vec<u64>,
    pub window: (NaiveDate, NaiveDate),
    pub min_packets: u64,
    pub top_fraction: Option<f64>,
    pub top_fraction_scope: String,
    pub normalization: Normalization,
}

/// Packets per sender within `[start, end]`.
pub fn sender_packets(flows: &[FlowRecord], start: NaiveDate, end: NaiveDate) -> BTreeMap<Ipv4Addr, u64> {
    let mut m = BTreeMap::new();
    for f in flows.iter().filter(|f| f.day >= start && f.day <= end) {
        *m.entry(f.key.src_ip).or_insert(0) += f.packets;
    }
    m
}

/// The qualifying sender set of one sensor.
pub fn qualifying_senders(counts: &BTreeMap<Ipv4Addr, u64>, min_packets: u64, top_fraction: Option<f64>) -> BTreeSet<Ipv4Addr> {
    let mut set: BTreeSet<Ipv4Addr> = counts.iter().filter(|(_, &n)| n >= min_packets).map(|(ip, _)| *ip).collect();
    if let Some(f) = top_fraction {
        let keep = (f * counts.len() as f64).ceil() as usize;
        let mut ranked: Vec<(u64, Ipv4Addr)> = counts.iter().map(|(ip, n)| (*n, *ip)).collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let top: BTreeSet<Ipv4Addr> = ranked.into_iter().take(keep).map(|(_, ip)| ip).collect();
        set.retain(|ip| top.contains(ip));
    }
    set
}

/// Common-sender ratios between every pair of sensors.
pub fn common_sender_ratio(sensor_flows: &[(String, Vec<FlowRecord>)], params: &OverlapParams) -> Result<OverlapMatrix, AnalysisError> {
    if sensor_flows.len() < 2 {
        return Err(AnalysisError::TooFewSensors(sensor_flows.len()));
    }
    if params.window_days == 0 {
        return Err(AnalysisError::BadWindow);
    }
    if let Some(f) = params.top_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(AnalysisError::BadFraction(f));
        }
    }
    let span = Days::new(u64::from(params.window_days) - 1);
    let (start, end) = match params.window_start {
        Some(s) => (s, s + span),
        None => {
            let latest = sensor_flows
                .iter()
                .flat_map(|(_, f)| f.iter().map(|r| r.day))
                .max()
                .ok_or(AnalysisError::WindowEmpty)?;
            (latest - span, latest)
        }
    };
    let counts: Vec<BTreeMap<Ipv4Addr, u64>> = sensor_flows.iter().map(|(_, f)| sender_packets(f, start, end)).collect();
    if counts.iter().all(|c| c.is_empty()) {
        return Err(AnalysisError::WindowEmpty);
    }
    let sets: Vec<BTreeSet<Ipv4Addr>> = counts
        .iter()
        .map(|c| qualifying_senders(c, params.min_packets, params.top_fraction))
        .collect();
    let n = sets.len();
    let mut ratio = vec![vec![0.0; n]; n];
    let mut common = vec![vec![0u64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let inter = sets[i].intersection(&sets[j]).count() as u64;
            common[i][j] = inter;
            let denom = match params.normalization {
                Normalization::RowNormalized => sets[i].len() as u64,
                Normalization::Jaccard => sets[i].union(&sets[j]).count() as u64,
            };
            ratio[i][j] = if sets[i].is_empty() || denom == 0 {
                0.0
            } else {
                inter as f64 / denom as f64
            };
        }
    }
    Ok(OverlapMatrix {
        sensors: sensor_flows.iter().map(|(s, _)| s.clone()).collect(),
        ratio,
        common,
        set_sizes: sets.iter().map(|s| s.len() as u64).collect(),
        window: (start, end),
        min_packets: params.min_packets,
        top_fraction: params.top_fraction,
        top_fraction_scope: "per_sensor".into(),
        normalization: params.normalization,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortWeight {
    #[default]
    Packets,
    Flows,
}

/// Weighted TCP destination-port distribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortDistribution {
    pub weight: PortWeight,
    /// Non-zero weights by port.
    pub counts: BTreeMap<u16, u64>,
    pub total: u64,
    /// Set when there was no TCP traffic at all.
    pub empty: bool,
}

impl PortDistribution {
    /// `(port, cumulative fraction)` at every port carrying weight.
    pub fn cdf(&self) -> Vec<(u16, f64)> {
        let mut acc = 0u64;
        self.counts
            .iter()
            .map(|(p, c)| {
                acc += c;
                (*p, acc as f64 / self.total as f64)
            })
            .collect()
    }

    /// Cumulative fraction at `port`.
    pub fn at(&self, port: u16) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let acc: u64 = self.counts.range(..=port).map(|(_, c)| c).sum();
        acc as f64 / self.total as f64
    }

    /// Jump of the CDF at `port`.
    pub fn mass_at(&self, port: u16) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(&port).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

pub fn port_cdf(flows: &[FlowRecord], weight: PortWeight) -> PortDistribution {
    let mut counts = BTreeMap::new();
    for f in flows.iter().filter(|f| f.key.proto == Proto::Tcp) {
        let w = match weight {
            PortWeight::Packets => f.packets,
            PortWeight::Flows => 1,
        };
        *counts.entry(f.key.dst_port).or_insert(0) += w;
    }
    let total = counts.values().sum();
    PortDistribution {
        weight,
        counts,
        total,
        empty: total == 0,
    }
}

/// SYN/ACK arriving at a darknet: a victim answering spoofed traffic.
pub fn classify_backscatter(r: &PacketRecord) -> bool {
    r.capture_origin == CaptureOrigin::Darknet && r.proto == Proto::Tcp && r.tcp_flags.contains(TcpFlags::SYN_ACK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackscatterLabel {
    None,
    SynAck,
    Rst,
}

/// Extended label that also counts resets as backscatter.
pub fn backscatter_label(r: &PacketRecord) -> BackscatterLabel {
    if classify_backscatter(r) {
        BackscatterLabel::SynAck
    } else if r.capture_origin == CaptureOrigin::Darknet
        && r.proto == Proto::Tcp
        && r.tcp_flags.contains(TcpFlags::RST)
        && !r.tcp_flags.contains(TcpFlags::SYN)
    {
        BackscatterLabel::Rst
    } else {
        BackscatterLabel::None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueSenders {
    pub per_sensor: BTreeMap<String, u64>,
    pub global: u64,
}

/// Distinct senders per sensor and across all sensors, optionally for one day.
pub fn unique_senders(sensor_flows: &[(String, Vec<FlowRecord>)], day: Option<NaiveDate>) -> UniqueSenders {
    let mut global = BTreeSet::new();
    let mut per_sensor = BTreeMap::new();
    for (sensor, flows) in sensor_flows {
        let set: BTreeSet<Ipv4Addr> = flows
            .iter()
            .filter(|f| day.map_or(true, |d| f.day == d))
            .map(|f| f.key.src_ip)
            .collect();
        *per_sensor.entry(sensor.clone()).or_insert(0) += set.len() as u64;
        global.extend(set);
    }
    UniqueSenders {
        per_sensor,
        global: global.len() as u64,
    }
}

/// Captured records grouped by sensor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub sensors: BTreeMap<String, Vec<PacketRecord>>,
}

impl Dataset {
    /// Loads every sealed trace under `dir`, in spool or lake layout.
    pub fn load(dir: &Path) -> Result<Self, AnalysisError> {
        let mut ds = Dataset::default();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> = fs::read_dir(&d)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.path());
            for e in entries {
                let p = e.path();
                if p.is_dir() {
                    if !e.file_name().to_string_lossy().starts_with('.') {
                        stack.push(p);
                    }
                    continue;
                }
                let name = e.file_name().to_string_lossy().to_string();
                let Some(stem) = name.strip_suffix(".pcap") else { continue };
                let meta = p.with_file_name(format!("{stem}.meta.json"));
                if !meta.exists() {
                    continue;
                }
                let sensor = collector::read_meta(&meta)?.sensor_id;
                ds.sensors.entry(sensor).or_default().extend(collector::read_trace(&p)?);
            }
        }
        for recs in ds.sensors.values_mut() {
            recs.sort();
        }
        Ok(ds)
    }

    pub fn flows(&self) -> Vec<(String, Vec<FlowRecord>)> {
        self.sensors.iter().map(|(s, r)| (s.clone(), aggregate_all(r))).collect()
    }

    pub fn days(&self) -> Vec<NaiveDate> {
        let set: BTreeSet<NaiveDate> = self.sensors.values().flatten().map(|r| r.ts.day()).collect();
        set.into_iter().collect()
    }
}

pub fn write_flows_csv<W: Write>(w: W, sensor_flows: &[(String, Vec<FlowRecord>)]) -> Result<(), AnalysisError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "sensor", "day", "src_ip", "dst_ip", "proto", "src_port", "dst_port", "packets", "bytes", "first_ts", "last_ts", "flags_seen",
    ])?;
    for (sensor, flows) in sensor_flows {
        for f in flows {
            out.write_record([
                sensor.clone(),
                f.day.to_string(),
                f.key.src_ip.to_string(),
                f.key.dst_ip.to_string(),
                f.key.proto.number().to_string(),
                f.key.src_port.to_string(),
                f.key.dst_port.to_string(),
                f.packets.to_string(),
                f.bytes.to_string(),
                f.first_ts.as_micros().to_string(),
                f.last_ts.as_micros().to_string(),
                TcpFlags(f.flags_seen).to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_overlap_csv<W: Write>(w: W, m: &OverlapMatrix) -> Result<(), AnalysisError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sensor_i", "sensor_j", "ratio", "common", "set_size_i"])?;
    for (i, si) in m.sensors.iter().enumerate() {
        for (j, sj) in m.sensors.iter().enumerate() {
            out.write_record([
                si.clone(),
                sj.clone(),
                format!("{:.6}", m.ratio[i][j]),
                m.common[i][j].to_string(),
                m.set_sizes[i].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_portcdf_csv<W: Write>(w: W, dists: &[(String, PortDistribution)]) -> Result<(), AnalysisError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sensor", "port", "weight", "cumulative_fraction"])?;
    for (sensor, d) in dists {
        for (port, cum) in d.cdf() {
            out.write_record([sensor.clone(), port.to_string(), d.counts[&port].to_string(), format!("{cum:.6}")])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_timeline_csv<W: Write>(w: W, series: &[(String, AddressRange, Vec<DaySeries>)]) -> Result<(), AnalysisError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sensor", "day", "dst_ip", "flows"])?;
    for (sensor, subnet, days) in series {
        for d in days {
            for (off, n) in d.counts.iter().enumerate() {
                let ip = subnet.nth(off as u64).expect("offset inside /24");
                out.write_record([sensor.clone(), d.day.to_string(), ip.to_string(), n.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// The /24s a sensor's traffic landed in, by destination address.
pub fn observed_slash24s(flows: &[FlowRecord]) -> Vec<AddressRange> {
    let set: BTreeSet<AddressRange> = flows
        .iter()
        .filter_map(|f| AddressRange::containing(f.key.dst_ip, 24).ok())
        .collect();
    set.into_iter().collect()
}

/// Per-day flows-per-address series for every /24 each sensor saw traffic in.
pub fn timeline(sensor_flows: &[(String, Vec<FlowRecord>)], days: &[NaiveDate]) -> Result<Vec<(String, AddressRange, Vec<DaySeries>)>, AnalysisError> {
    let mut out = Vec::new();
    for (sensor, flows) in sensor_flows {
        for subnet in observed_slash24s(flows) {
            out.push((sensor.clone(), subnet, flows_per_ip_series(flows, subnet, days)?));
        }
    }
    Ok(out)
}

/// Backscatter share of darknet TCP records per sensor.
pub fn backscatter_counts(ds: &Dataset) -> BTreeMap<String, (u64, u64, u64)> {
    ds.sensors
        .iter()
        .map(|(s, recs)| {
            let mut tcp = 0;
            let mut synack = 0;
            let mut rst = 0;
            for r in recs.iter().filter(|r| r.proto == Proto::Tcp && r.capture_origin == CaptureOrigin::Darknet) {
                tcp += 1;
                match backscatter_label(r) {
                    BackscatterLabel::SynAck => synack += 1,
                    BackscatterLabel::Rst => rst += 1,
                    BackscatterLabel::None => {}
                }
            }
            (s.clone(), (tcp, synack, rst))
        })
        .collect()
}

/// Flow multiset as counts per (day, key), for comparing against ground truth.
pub fn flow_multiset(flows: &[FlowRecord]) -> HashMap<(NaiveDate, FlowKey), u64> {
    flows.iter().map(|f| ((f.day, f.key), f.packets)).collect()
}
