//! Hourly pcap trace files with module manifests, and policy-driven upload of
//! sealed traces to the data lake.
//!
//! Records are stored as raw IPv4 frames truncated after the retained payload
//! prefix; the pcap `orig_len` keeps the wire length so `payload_len`
//! survives the round trip. The IP identification field carries the capture
//! origin.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use pcap_file::pcap::{PcapHeader, PcapReader};
use pcap_file::{DataLink, Endianness, TsResolution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::packet::{self, checksum, CaptureOrigin, LinkType, Packet, PacketRecord, Proto, TcpFlags};
use crate::time::{Clock, HourBucket, Timestamp, MICROS_PER_HOUR, MICROS_PER_SEC};

pub const PCAP_HEADER_LEN: u64 = 24;
pub const RECORD_HEADER_LEN: u64 = 16;
pub const CHUNK_SIZE: usize = 1 << 20;
pub const BACKOFF_CAP_SECS: u64 = 15 * 60;
const PCAP_MAGIC_LE: [u8; 4] = [0xd4, 0xc3, 0xb2, 0xa1];
const SNAPLEN: u32 = 65_535;

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("disk quota of {limit} bytes reached")]
    DiskFull { limit: u64 },
    #[error("packet at {ts} precedes the open hour {hour}")]
    TimestampRegression { ts: Timestamp, hour: String },
    #[error("trace for hour {0} is already sealed")]
    AlreadySealed(String),
    #[error("corrupt trace {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("invalid sync policy: {0}")]
    InvalidPolicy(String),
}

fn corrupt(path: &Path, reason: impl ToString) -> CollectorError {
    CollectorError::Corrupt {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub module: String,
    pub version: String,
    pub instance_id: String,
}

impl ManifestEntry {
    pub fn new(module: &str, version: &str, instance_id: &str) -> Self {
        ManifestEntry {
            module: module.into(),
            version: version.into(),
            instance_id: instance_id.into(),
        }
    }
}

/// Sidecar describing one hourly trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFileMeta {
    pub sensor_id: String,
    pub hour_bucket: String,
    pub packet_count: u64,
    pub byte_count: u64,
    pub module_manifest: Vec<ManifestEntry>,
    pub sealed: bool,
    /// Hex SHA-256 of the pcap file bytes.
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub redacted: bool,
}

impl TraceFileMeta {
    pub fn hour(&self) -> Option<HourBucket> {
        HourBucket::parse_label(&self.hour_bucket)
    }
}

pub fn trace_file_name(sensor: &str, hour: HourBucket) -> String {
    format!("{sensor}_{}.pcap", hour.label())
}

pub fn meta_file_name(sensor: &str, hour: HourBucket) -> String {
    format!("{sensor}_{}.meta.json", hour.label())
}

/// Splits `<sensor>_<YYYY-MM-DD-HH>.pcap`.
pub fn parse_trace_name(name: &str) -> Option<(String, HourBucket)> {
    let stem = name.strip_suffix(".pcap")?;
    let (sensor, label) = stem.rsplit_once('_')?;
    Some((sensor.to_string(), HourBucket::parse_label(label)?))
}

fn origin_code(o: CaptureOrigin) -> u16 {
    match o {
        CaptureOrigin::Darknet => 0,
        CaptureOrigin::Responder => 1,
    }
}

/// Builds the stored frame for `rec` and its original wire length.
pub fn record_frame(rec: &PacketRecord) -> (Vec<u8>, u32) {
    let pkt = Packet {
        ts: rec.ts,
        src_ip: rec.src_ip,
        dst_ip: rec.dst_ip,
        proto: rec.proto,
        src_port: rec.src_port,
        dst_port: rec.dst_port,
        tcp_flags: rec.tcp_flags,
        seq: 0,
        ack: 0,
        window: 0,
        mss: None,
        ttl: 64,
        payload: rec.payload_prefix.clone(),
    };
    let mut frame = pkt.encode(LinkType::RawIpv4);
    let missing = rec.payload_len.saturating_sub(rec.payload_prefix.len() as u32);
    let orig = (frame.len() as u32 + missing).min(u32::from(u16::MAX));
    frame[2..4].copy_from_slice(&(orig as u16).to_be_bytes());
    if rec.proto == Proto::Udp {
        let udp_len = orig - 20;
        frame[24..26].copy_from_slice(&(udp_len as u16).to_be_bytes());
    }
    frame[4..6].copy_from_slice(&origin_code(rec.capture_origin).to_be_bytes());
    frame[10..12].copy_from_slice(&[0, 0]);
    let csum = checksum(&[&frame[..20]]);
    frame[10..12].copy_from_slice(&csum.to_be_bytes());
    (frame, orig)
}

/// Inverse of [`record_frame`].
pub fn frame_record(data: &[u8], orig_len: u32, ts: Timestamp) -> Result<PacketRecord, packet::DecodeError> {
    let mut buf = data.to_vec();
    let missing = (orig_len as usize).saturating_sub(data.len());
    if missing > 0 && buf.len() >= 20 {
        let cap = buf.len() as u16;
        buf[2..4].copy_from_slice(&cap.to_be_bytes());
        let ihl = usize::from(buf[0] & 0x0f) * 4;
        let first_fragment = u16::from_be_bytes([buf[6], buf[7]]) & 0x1fff == 0;
        if buf[9] == 17 && first_fragment && buf.len() >= ihl + 8 {
            let udp = (buf.len() - ihl) as u16;
            buf[ihl + 4..ihl + 6].copy_from_slice(&udp.to_be_bytes());
        }
    }
    let pkt = packet::parse(&buf, LinkType::RawIpv4, ts)?;
    let origin = if data.len() >= 6 && u16::from_be_bytes([data[4], data[5]]) == 1 {
        CaptureOrigin::Responder
    } else {
        CaptureOrigin::Darknet
    };
    let mut rec = pkt.record(origin);
    rec.payload_len = (pkt.payload.len() + missing) as u32;
    Ok(rec)
}

fn pcap_header_bytes() -> Vec<u8> {
    let header = PcapHeader {
        version_major: 2,
        version_minor: 4,
        ts_correction: 0,
        ts_accuracy: 0,
        snaplen: SNAPLEN,
        datalink: DataLink::from(LinkType::RawIpv4.pcap_code()),
        ts_resolution: TsResolution::MicroSecond,
        endianness: Endianness::Little,
    };
    let mut out = Vec::with_capacity(PCAP_HEADER_LEN as usize);
    header.write_to(&mut out).expect("writing to a Vec cannot fail");
    out
}

fn record_bytes(ts: Timestamp, frame: &[u8], orig_len: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_HEADER_LEN as usize + frame.len());
    out.extend_from_slice(&(ts.as_secs() as u32).to_le_bytes());
    out.extend_from_slice(&ts.subsec_micros().to_le_bytes());
    out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
    out.extend_from_slice(&orig_len.to_le_bytes());
    out.extend_from_slice(frame);
    out
}

/// Reads every record of a trace file.
pub fn read_trace(path: &Path) -> Result<Vec<PacketRecord>, CollectorError> {
    let mut reader = PcapReader::new(BufReader::new(File::open(path)?)).map_err(|e| corrupt(path, e))?;
    let mut out = Vec::new();
    while let Some(pkt) = reader.next_packet() {
        let pkt = pkt.map_err(|e| corrupt(path, e))?;
        let ts = Timestamp(pkt.timestamp.as_micros() as u64);
        out.push(frame_record(&pkt.data, pkt.orig_len, ts).map_err(|e| corrupt(path, e))?);
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<TraceFileMeta, CollectorError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| corrupt(path, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn meta_json(meta: &TraceFileMeta) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(meta).expect("meta serialises");
    v.push(b'\n');
    v
}

/// Scans an existing unsealed file, dropping a torn trailing record.
/// Returns (valid length, packets, wire bytes).
fn scan_partial(path: &Path) -> Result<(u64, u64, u64), CollectorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < PCAP_HEADER_LEN as usize {
        return Ok((0, 0, 0));
    }
    if bytes[..4] != PCAP_MAGIC_LE {
        return Err(corrupt(path, "unexpected pcap magic"));
    }
    let mut off = PCAP_HEADER_LEN as usize;
    let (mut packets, mut wire) = (0u64, 0u64);
    while off + RECORD_HEADER_LEN as usize <= bytes.len() {
        let h = &bytes[off..off + RECORD_HEADER_LEN as usize];
        let incl = u32::from_le_bytes([h[8], h[9], h[10], h[11]]) as usize;
        let orig = u32::from_le_bytes([h[12], h[13], h[14], h[15]]);
        let end = off + RECORD_HEADER_LEN as usize + incl;
        if end > bytes.len() {
            break;
        }
        packets += 1;
        wire += u64::from(orig);
        off = end;
    }
    Ok((off as u64, packets, wire))
}

fn hash_file_prefix(path: &Path, len: u64) -> io::Result<Sha256> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?.take(len);
    io::copy(&mut f, &mut hasher)?;
    Ok(hasher)
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CollectorEvent {
    Opened(String),
    Recovered { hour: String, packets: u64 },
    Sealed(TraceFileMeta),
    DiskFull { dropped: u64 },
    Resumed { dropped: u64 },
}

struct OpenTrace {
    hour: HourBucket,
    file: BufWriter<File>,
    hasher: Sha256,
    packets: u64,
    wire_bytes: u64,
    manifest: BTreeSet<ManifestEntry>,
}

/// Hour-rotating pcap writer for one sensor.
pub struct TraceWriter {
    dir: PathBuf,
    sensor: String,
    quota: Option<u64>,
    used: u64,
    open: Option<OpenTrace>,
    active: BTreeSet<ManifestEntry>,
    dropped: u64,
    paused: bool,
    events: Vec<CollectorEvent>,
}

impl TraceWriter {
    /// Opens a writer spooling into `dir`. `quota` bounds the bytes of all
    /// trace files in `dir`.
    pub fn open(dir: &Path, sensor: &str, quota: Option<u64>) -> Result<Self, CollectorError> {
        fs::create_dir_all(dir)?;
        let mut w = TraceWriter {
            dir: dir.to_path_buf(),
            sensor: sensor.to_string(),
            quota,
            used: 0,
            open: None,
            active: BTreeSet::new(),
            dropped: 0,
            paused: false,
            events: Vec::new(),
        };
        w.refresh_usage()?;
        Ok(w)
    }

    pub fn sensor(&self) -> &str {
        &self.sensor
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Recomputes disk usage, e.g. after sync deleted files.
    pub fn refresh_usage(&mut self) -> Result<u64, CollectorError> {
        if let Some(open) = self.open.as_mut() {
            open.file.flush()?;
        }
        let mut used = 0;
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().ends_with(".pcap") {
                used += entry.metadata()?.len();
            }
        }
        self.used = used;
        Ok(used)
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn current_hour(&self) -> Option<HourBucket> {
        self.open.as_ref().map(|o| o.hour)
    }

    pub fn take_events(&mut self) -> Vec<CollectorEvent> {
        std::mem::take(&mut self.events)
    }

    /// Replaces the set of running modules. Every module active at any point
    /// during an hour appears in that hour's manifest.
    pub fn set_active_modules(&mut self, entries: impl IntoIterator<Item = ManifestEntry>) {
        self.active = entries.into_iter().collect();
        if let Some(open) = self.open.as_mut() {
            open.manifest.extend(self.active.iter().cloned());
        }
    }

    fn paths(&self, hour: HourBucket) -> (PathBuf, PathBuf) {
        (
            self.dir.join(trace_file_name(&self.sensor, hour)),
            self.dir.join(meta_file_name(&self.sensor, hour)),
        )
    }

    fn open_hour(&mut self, hour: HourBucket) -> Result<(), CollectorError> {
        let (pcap, meta) = self.paths(hour);
        if meta.exists() {
            return Err(CollectorError::AlreadySealed(hour.label()));
        }
        let (hasher, packets, wire_bytes, file) = if pcap.exists() {
            let (valid, packets, wire) = scan_partial(&pcap)?;
            let file = OpenOptions::new().write(true).open(&pcap)?;
            file.set_len(valid)?;
            let mut file = file;
            let hasher = if valid == 0 {
                let header = pcap_header_bytes();
                file.write_all(&header)?;
                let mut h = Sha256::new();
                h.update(&header);
                h
            } else {
                hash_file_prefix(&pcap, valid)?
            };
            drop(file);
            let file = OpenOptions::new().append(true).open(&pcap)?;
            self.events.push(CollectorEvent::Recovered {
                hour: hour.label(),
                packets,
            });
            self.refresh_usage()?;
            (hasher, packets, wire, file)
        } else {
            let header = pcap_header_bytes();
            if let Some(limit) = self.quota {
                if self.used + PCAP_HEADER_LEN > limit {
                    return Err(CollectorError::DiskFull { limit });
                }
            }
            let mut file = File::create(&pcap)?;
            file.write_all(&header)?;
            self.used += PCAP_HEADER_LEN;
            let mut h = Sha256::new();
            h.update(&header);
            (h, 0, 0, file)
        };
        self.open = Some(OpenTrace {
            hour,
            file: BufWriter::with_capacity(1 << 16, file),
            hasher,
            packets,
            wire_bytes,
            manifest: self.active.clone(),
        });
        self.events.push(CollectorEvent::Opened(hour.label()));
        Ok(())
    }

    fn seal_open(&mut self) -> Result<Option<TraceFileMeta>, CollectorError> {
        let Some(mut open) = self.open.take() else { return Ok(None) };
        open.file.flush()?;
        open.file.get_ref().sync_all()?;
        let (pcap, meta_path) = self.paths(open.hour);
        let meta = TraceFileMeta {
            sensor_id: self.sensor.clone(),
            hour_bucket: open.hour.label(),
            packet_count: open.packets,
            byte_count: open.wire_bytes,
            module_manifest: open.manifest.into_iter().collect(),
            sealed: true,
            content_hash: hex::encode(open.hasher.finalize()),
            redacted: false,
        };
        drop(open.file);
        write_atomic(&meta_path, &meta_json(&meta))?;
        let mut perms = fs::metadata(&pcap)?.permissions();
        perms.set_readonly(true);
        fs::set_permissions(&pcap, perms)?;
        self.events.push(CollectorEvent::Sealed(meta.clone()));
        Ok(Some(meta))
    }

    /// Seals every hour that ended at or before `hour` and opens `hour`.
    fn roll_to(&mut self, hour: HourBucket) -> Result<Vec<TraceFileMeta>, CollectorError> {
        let mut sealed = Vec::new();
        let Some(current) = self.current_hour() else {
            self.open_hour(hour)?;
            return Ok(sealed);
        };
        sealed.extend(self.seal_open()?);
        let mut h = current.next();
        while h < hour {
            self.open_hour(h)?;
            sealed.extend(self.seal_open()?);
            h = h.next();
        }
        self.open_hour(hour)?;
        Ok(sealed)
    }

    /// Writes one record into the file of its UTC hour.
    pub fn append(&mut self, rec: &PacketRecord) -> Result<(), CollectorError> {
        let hour = rec.ts.hour();
        match self.current_hour() {
            Some(cur) if hour < cur => {
                self.dropped += 1;
                return Err(CollectorError::TimestampRegression {
                    ts: rec.ts,
                    hour: cur.label(),
                });
            }
            Some(cur) if hour == cur => {}
            _ => {
                if let Err(e) = self.roll_to(hour) {
                    if let CollectorError::DiskFull { .. } = e {
                        self.note_full();
                    }
                    return Err(e);
                }
            }
        }
        let (frame, orig) = record_frame(rec);
        let bytes = record_bytes(rec.ts, &frame, orig);
        if let Some(limit) = self.quota {
            if self.used + bytes.len() as u64 > limit {
                self.note_full();
                return Err(CollectorError::DiskFull { limit });
            }
        }
        if self.paused {
            self.paused = false;
            self.events.push(CollectorEvent::Resumed { dropped: self.dropped });
        }
        let open = self.open.as_mut().expect("hour opened above");
        open.file.write_all(&bytes)?;
        open.hasher.update(&bytes);
        open.packets += 1;
        open.wire_bytes += u64::from(orig);
        self.used += bytes.len() as u64;
        Ok(())
    }

    fn note_full(&mut self) {
        self.dropped += 1;
        if !self.paused {
            self.paused = true;
            self.events.push(CollectorEvent::DiskFull { dropped: self.dropped });
        }
    }

    /// Seals hours that ended before `now`, producing empty files for gaps,
    /// and opens the hour containing `now`.
    pub fn advance(&mut self, now: Timestamp) -> Result<Vec<TraceFileMeta>, CollectorError> {
        match self.current_hour() {
            Some(cur) if now.hour() <= cur => Ok(Vec::new()),
            _ => self.roll_to(now.hour()),
        }
    }

    /// Seals the open file, if any.
    pub fn close(&mut self) -> Result<Option<TraceFileMeta>, CollectorError> {
        self.seal_open()
    }
}

impl Drop for TraceWriter {
    fn drop(&mut self) {
        if let Some(open) = self.open.as_mut() {
            let _ = open.file.flush();
        }
    }
}

/// Seals a trace file on disk. Returns the existing sidecar when already
/// sealed, so repeated calls yield the same hash.
pub fn seal_path(pcap: &Path, manifest: &[ManifestEntry]) -> Result<TraceFileMeta, CollectorError> {
    let name = pcap.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let (sensor, hour) = parse_trace_name(name).ok_or_else(|| corrupt(pcap, "bad file name"))?;
    let meta_path = pcap.with_file_name(meta_file_name(&sensor, hour));
    if meta_path.exists() {
        return read_meta(&meta_path);
    }
    let (valid, packets, wire) = scan_partial(pcap)?;
    let len = fs::metadata(pcap)?.len();
    if valid != len {
        OpenOptions::new().write(true).open(pcap)?.set_len(valid)?;
    }
    let mut manifest = manifest.to_vec();
    manifest.sort();
    manifest.dedup();
    let meta = TraceFileMeta {
        sensor_id: sensor,
        hour_bucket: hour.label(),
        packet_count: packets,
        byte_count: wire,
        module_manifest: manifest,
        sealed: true,
        content_hash: hash_file(pcap)?,
        redacted: false,
    };
    write_atomic(&meta_path, &meta_json(&meta))?;
    Ok(meta)
}

/// A sealed trace in a spool directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedTrace {
    pub pcap: PathBuf,
    pub meta_path: PathBuf,
    pub meta: TraceFileMeta,
    pub sensor: String,
    pub hour: HourBucket,
}

/// Sealed traces in `dir`, oldest first. Unsealed files are skipped.
pub fn list_sealed(dir: &Path) -> Result<Vec<SealedTrace>, CollectorError> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some((sensor, hour)) = parse_trace_name(name) else { continue };
        let meta_path = dir.join(meta_file_name(&sensor, hour));
        if !meta_path.exists() {
            continue;
        }
        let meta = read_meta(&meta_path)?;
        out.push(SealedTrace {
            pcap: path,
            meta_path,
            meta,
            sensor,
            hour,
        });
    }
    out.sort_by(|a, b| (a.hour, &a.sensor).cmp(&(b.hour, &b.sensor)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Redaction {
    #[default]
    None,
    TruncatePayloads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPolicy {
    pub enabled: bool,
    pub retention_hours: u32,
    /// Bytes per second.
    pub bandwidth_cap: u64,
    #[serde(default)]
    pub redact: Redaction,
}

impl Default for SyncPolicy {
    fn default() -> Self {
        SyncPolicy {
            enabled: true,
            retention_hours: 24,
            bandwidth_cap: 10 * 1024 * 1024,
            redact: Redaction::None,
        }
    }
}

impl SyncPolicy {
    pub fn validate(&self) -> Result<(), CollectorError> {
        if self.enabled && self.retention_hours < 1 {
            return Err(CollectorError::InvalidPolicy("retention_hours must be at least 1".into()));
        }
        if self.enabled && self.bandwidth_cap == 0 {
            return Err(CollectorError::InvalidPolicy("bandwidth_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LakeError {
    #[error("lake unreachable: {0}")]
    Unreachable(String),
    #[error("upload offset {got} does not match partial length {expected}")]
    OffsetMismatch { expected: u64, got: u64 },
    #[error("hash mismatch: expected {expected}, lake holds {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("lake i/o: {0}")]
    Io(String),
}

impl From<io::Error> for LakeError {
    fn from(e: io::Error) -> Self {
        LakeError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LakeStat {
    pub partial_len: u64,
    pub committed_hash: Option<String>,
}

/// Central trace store.
pub trait Lake {
    fn stat(&mut self, sensor: &str, hour: HourBucket) -> Result<LakeStat, LakeError>;
    /// Appends at `offset`, which must equal the current partial length.
    fn put_chunk(&mut self, sensor: &str, hour: HourBucket, offset: u64, data: &[u8]) -> Result<u64, LakeError>;
    /// Verifies the partial against `meta.content_hash` and publishes it.
    fn commit(&mut self, sensor: &str, hour: HourBucket, meta: &TraceFileMeta) -> Result<(), LakeError>;
    /// Re-hashes the committed copy.
    fn verify(&mut self, sensor: &str, hour: HourBucket, hash: &str) -> Result<bool, LakeError>;
}

/// Directory-tree lake: `<root>/<sensor>/YYYY/MM/DD/HH.pcap` plus
/// `HH.meta.json`; in-flight uploads live under `<root>/.partial/`.
#[derive(Debug, Clone)]
pub struct DirLake {
    root: PathBuf,
}

impl DirLake {
    pub fn new(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root.join(".partial"))?;
        Ok(DirLake {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_paths(&self, sensor: &str, hour: HourBucket) -> (PathBuf, PathBuf) {
        let (y, m, d, h) = hour.components();
        let dir = self.root.join(sensor).join(y).join(m).join(d);
        (dir.join(format!("{h}.pcap")), dir.join(format!("{h}.meta.json")))
    }

    fn partial_path(&self, sensor: &str, hour: HourBucket) -> PathBuf {
        self.root.join(".partial").join(trace_file_name(sensor, hour))
    }

    /// Committed objects as `(sensor, hour, meta)`, sorted.
    pub fn list(&self) -> Result<Vec<(String, HourBucket, TraceFileMeta)>, CollectorError> {
        let mut out = Vec::new();
        for sensor in fs::read_dir(&self.root)? {
            let sensor = sensor?;
            let name = sensor.file_name().to_string_lossy().to_string();
            if name.starts_with('.') || !sensor.file_type()?.is_dir() {
                continue;
            }
            let mut stack = vec![sensor.path()];
            while let Some(dir) = stack.pop() {
                for e in fs::read_dir(&dir)? {
                    let p = e?.path();
                    if p.is_dir() {
                        stack.push(p);
                    } else if p.to_string_lossy().ends_with(".meta.json") {
                        let meta = read_meta(&p)?;
                        let Some(hour) = meta.hour() else { continue };
                        let (pcap, _) = self.object_paths(&name, hour);
                        if pcap.exists() {
                            out.push((name.clone(), hour, meta));
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
        Ok(out)
    }
}

impl Lake for DirLake {
    fn stat(&mut self, sensor: &str, hour: HourBucket) -> Result<LakeStat, LakeError> {
        let (pcap, meta) = self.object_paths(sensor, hour);
        let committed_hash = if pcap.exists() && meta.exists() {
            Some(read_meta(&meta).map_err(|e| LakeError::Io(e.to_string()))?.content_hash)
        } else {
            None
        };
        let partial_len = fs::metadata(self.partial_path(sensor, hour)).map(|m| m.len()).unwrap_or(0);
        Ok(LakeStat {
            partial_len,
            committed_hash,
        })
    }

    fn put_chunk(&mut self, sensor: &str, hour: HourBucket, offset: u64, data: &[u8]) -> Result<u64, LakeError> {
        let path = self.partial_path(sensor, hour);
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = f.metadata()?.len();
        if len != offset {
            return Err(LakeError::OffsetMismatch {
                expected: len,
                got: offset,
            });
        }
        f.write_all(data)?;
        f.sync_data()?;
        Ok(len + data.len() as u64)
    }

    fn commit(&mut self, sensor: &str, hour: HourBucket, meta: &TraceFileMeta) -> Result<(), LakeError> {
        let partial = self.partial_path(sensor, hour);
        let (pcap, meta_path) = self.object_paths(sensor, hour);
        if !partial.exists() && pcap.exists() {
            let actual = hash_file(&pcap)?;
            return if actual == meta.content_hash {
                Ok(())
            } else {
                Err(LakeError::HashMismatch {
                    expected: meta.content_hash.clone(),
                    actual,
                })
            };
        }
        let actual = hash_file(&partial)?;
        if actual != meta.content_hash {
            fs::remove_file(&partial)?;
            return Err(LakeError::HashMismatch {
                expected: meta.content_hash.clone(),
                actual,
            });
        }
        fs::create_dir_all(pcap.parent().expect("object path has a parent"))?;
        write_atomic(&meta_path, &meta_json(meta))?;
        fs::rename(&partial, &pcap)?;
        Ok(())
    }

    fn verify(&mut self, sensor: &str, hour: HourBucket, hash: &str) -> Result<bool, LakeError> {
        let (pcap, meta) = self.object_paths(sensor, hour);
        if !pcap.exists() || !meta.exists() {
            return Ok(false);
        }
        Ok(hash_file(&pcap)? == hash)
    }
}

/// Where an injected fault fires relative to the wrapped operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// The operation never reaches the lake.
    Before,
    /// The operation completes but the caller sees a failure.
    After,
}

/// Lake wrapper that fails one numbered operation, for crash testing.
#[derive(Debug)]
pub struct FaultyLake<L> {
    pub inner: L,
    fail_at: Option<(u64, FaultPoint)>,
    ops: u64,
}

impl<L: Lake> FaultyLake<L> {
    pub fn new(inner: L, fail_at: Option<(u64, FaultPoint)>) -> Self {
        FaultyLake { inner, fail_at, ops: 0 }
    }

    pub fn ops(&self) -> u64 {
        self.ops
    }

    fn wrap<T>(&mut self, f: impl FnOnce(&mut L) -> Result<T, LakeError>) -> Result<T, LakeError> {
        let n = self.ops;
        self.ops += 1;
        match self.fail_at {
            Some((k, FaultPoint::Before)) if k == n => Err(LakeError::Unreachable("injected".into())),
            Some((k, FaultPoint::After)) if k == n => {
                f(&mut self.inner)?;
                Err(LakeError::Unreachable("injected after".into()))
            }
            _ => f(&mut self.inner),
        }
    }
}

impl<L: Lake> Lake for FaultyLake<L> {
    fn stat(&mut self, sensor: &str, hour: HourBucket) -> Result<LakeStat, LakeError> {
        self.wrap(|l| l.stat(sensor, hour))
    }

    fn put_chunk(&mut self, sensor: &str, hour: HourBucket, offset: u64, data: &[u8]) -> Result<u64, LakeError> {
        self.wrap(|l| l.put_chunk(sensor, hour, offset, data))
    }

    fn commit(&mut self, sensor: &str, hour: HourBucket, meta: &TraceFileMeta) -> Result<(), LakeError> {
        self.wrap(|l| l.commit(sensor, hour, meta))
    }

    fn verify(&mut self, sensor: &str, hour: HourBucket, hash: &str) -> Result<bool, LakeError> {
        self.wrap(|l| l.verify(sensor, hour, hash))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub uploaded: u64,
    pub resumed: u64,
    pub already_present: u64,
    pub deleted: u64,
    pub bytes_sent: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The bytes and sidecar that go to the lake for `trace` under `redact`.
pub fn upload_payload(trace: &SealedTrace, redact: Redaction) -> Result<(Vec<u8>, TraceFileMeta), CollectorError> {
    let bytes = fs::read(&trace.pcap)?;
    match redact {
        Redaction::None => Ok((bytes, trace.meta.clone())),
        Redaction::TruncatePayloads => {
            let mut out = pcap_header_bytes();
            for mut rec in read_trace(&trace.pcap)? {
                rec.payload_prefix.clear();
                let (frame, orig) = record_frame(&rec);
                out.extend_from_slice(&record_bytes(rec.ts, &frame, orig));
            }
            let mut meta = trace.meta.clone();
            meta.content_hash = hex::encode(Sha256::digest(&out));
            meta.redacted = true;
            Ok((out, meta))
        }
    }
}

fn upload_one(
    trace: &SealedTrace,
    policy: &SyncPolicy,
    lake: &mut dyn Lake,
    clock: &dyn Clock,
    pace: &mut Pacer,
    report: &mut SyncReport,
) -> Result<TraceFileMeta, String> {
    let (bytes, meta) = upload_payload(trace, policy.redact).map_err(|e| e.to_string())?;
    let stat = lake.stat(&trace.sensor, trace.hour).map_err(|e| e.to_string())?;
    if let Some(h) = &stat.committed_hash {
        if *h == meta.content_hash {
            report.already_present += 1;
            return Ok(meta);
        }
        return Err(format!("lake holds a different copy of {}", trace.meta.hour_bucket));
    }
    for attempt in 0..2 {
        let mut offset = if attempt == 0 { stat.partial_len } else { 0 };
        if offset > bytes.len() as u64 {
            offset = 0;
        }
        if offset > 0 && attempt == 0 {
            report.resumed += 1;
        }
        let chunk = CHUNK_SIZE.min(policy.bandwidth_cap.max(1) as usize);
        while offset < bytes.len() as u64 {
            let end = (offset as usize + chunk).min(bytes.len());
            let piece = &bytes[offset as usize..end];
            offset = match lake.put_chunk(&trace.sensor, trace.hour, offset, piece) {
                Ok(n) => n,
                Err(LakeError::OffsetMismatch { expected, .. }) if expected <= bytes.len() as u64 => expected,
                Err(e) => return Err(e.to_string()),
            };
            report.bytes_sent += piece.len() as u64;
            pace.sent(piece.len() as u64, clock);
        }
        match lake.commit(&trace.sensor, trace.hour, &meta) {
            Ok(()) => {
                report.uploaded += 1;
                return Ok(meta);
            }
            Err(LakeError::HashMismatch { .. }) if attempt == 0 => continue,
            Err(e) => return Err(e.to_string()),
        }
    }
    Err(format!("hash mismatch persisted for {}", trace.meta.hour_bucket))
}

struct Pacer {
    start: Timestamp,
    cap: u64,
    total: u64,
}

impl Pacer {
    fn sent(&mut self, n: u64, clock: &dyn Clock) {
        self.total += n;
        let due = (u128::from(self.total) * u128::from(MICROS_PER_SEC)).div_ceil(u128::from(self.cap)) as u64;
        let elapsed = clock.now().since(self.start);
        if due > elapsed {
            clock.sleep_micros(due - elapsed);
        }
    }
}

/// One synchronisation pass: uploads sealed traces oldest first, then deletes
/// local copies older than the retention window that the lake verifiably
/// holds.
pub fn sync(policy: &SyncPolicy, traces: &[SealedTrace], lake: &mut dyn Lake, clock: &dyn Clock) -> SyncReport {
    let mut report = SyncReport::default();
    if !policy.enabled {
        return report;
    }
    if let Err(e) = policy.validate() {
        report.error = Some(e.to_string());
        return report;
    }
    let now = clock.now();
    let mut pace = Pacer {
        start: now,
        cap: policy.bandwidth_cap,
        total: 0,
    };
    let mut ordered: Vec<&SealedTrace> = traces.iter().collect();
    ordered.sort_by(|a, b| (a.hour, &a.sensor).cmp(&(b.hour, &b.sensor)));
    let mut uploaded = Vec::new();
    for trace in ordered {
        match upload_one(trace, policy, lake, clock, &mut pace, &mut report) {
            Ok(meta) => uploaded.push((trace, meta)),
            Err(e) => {
                report.error = Some(e);
                break;
            }
        }
    }
    let retention = u64::from(policy.retention_hours) * MICROS_PER_HOUR;
    for (trace, meta) in uploaded {
        if now.since(trace.hour.start()) <= retention {
            continue;
        }
        match lake.verify(&trace.sensor, trace.hour, &meta.content_hash) {
            Ok(true) => {
                if let Err(e) = remove_local(trace) {
                    report.error = Some(e.to_string());
                    break;
                }
                report.deleted += 1;
            }
            Ok(false) => {}
            Err(e) => {
                report.error = Some(e.to_string());
                break;
            }
        }
    }
    report
}

fn remove_local(trace: &SealedTrace) -> io::Result<()> {
    if trace.pcap.exists() {
        let mut perms = fs::metadata(&trace.pcap)?.permissions();
        #[allow(clippy::permissions_set_readonly_false)]
        perms.set_readonly(false);
        fs::set_permissions(&trace.pcap, perms)?;
        fs::remove_file(&trace.pcap)?;
    }
    fs::remove_file(&trace.meta_path)
}

/// Exponential retry schedule: 1 s, 2 s, 4 s, ... capped at 15 minutes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Backoff {
    failures: u32,
}

impl Backoff {
    pub fn delay_secs(&self) -> u64 {
        if self.failures == 0 {
            return 0;
        }
        let exp = (self.failures - 1).min(20);
        (1u64 << exp).min(BACKOFF_CAP_SECS)
    }

    pub fn fail(&mut self) -> u64 {
        self.failures = self.failures.saturating_add(1);
        self.delay_secs()
    }

    pub fn reset(&mut self) {
        self.failures = 0;
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }
}

/// Repeated sync with backoff between failed passes.
#[derive(Debug, Clone)]
pub struct Syncer {
    pub policy: SyncPolicy,
    backoff: Backoff,
    next_attempt: Timestamp,
}

impl Syncer {
    pub fn new(policy: SyncPolicy) -> Self {
        Syncer {
            policy,
            backoff: Backoff::default(),
            next_attempt: Timestamp(0),
        }
    }

    pub fn next_attempt(&self) -> Timestamp {
        self.next_attempt
    }

    pub fn backoff(&self) -> &Backoff {
        &self.backoff
    }

    /// Runs a pass if the backoff allows it; `None` means still waiting.
    pub fn tick(&mut self, spool: &Path, lake: &mut dyn Lake, clock: &dyn Clock) -> Option<SyncReport> {
        let now = clock.now();
        if now < self.next_attempt {
            return None;
        }
        let report = match list_sealed(spool) {
            Ok(traces) => sync(&self.policy, &traces, lake, clock),
            Err(e) => SyncReport {
                error: Some(e.to_string()),
                ..SyncReport::default()
            },
        };
        if report.error.is_some() {
            let delay = self.backoff.fail();
            self.next_attempt = now.plus_secs(delay);
        } else {
            self.backoff.reset();
            self.next_attempt = now;
        }
        Some(report)
    }
}

/// Local and lake state of each sealed trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStatus {
    pub file: String,
    pub hour_bucket: String,
    pub packet_count: u64,
    pub in_lake: bool,
}

pub fn sync_status(spool: &Path, lake: &mut dyn Lake, redact: Redaction) -> Result<Vec<TraceStatus>, CollectorError> {
    let mut out = Vec::new();
    for t in list_sealed(spool)? {
        let (_, meta) = upload_payload(&t, redact)?;
        let in_lake = lake
            .stat(&t.sensor, t.hour)
            .map(|s| s.committed_hash.as_deref() == Some(meta.content_hash.as_str()))
            .unwrap_or(false);
        out.push(TraceStatus {
            file: t.pcap.file_name().unwrap_or_default().to_string_lossy().to_string(),
            hour_bucket: t.meta.hour_bucket.clone(),
            packet_count: t.meta.packet_count,
            in_lake,
        });
    }
    Ok(out)
}

/// Writes a synthetic record for tests and tooling.
pub fn synthetic_record(ts: Timestamp, i: u32) -> PacketRecord {
    Packet::tcp(
        ts,
        (std::net::Ipv4Addr::from(0xc000_0200 | (i & 0xff)), 40_000 + (i % 1000) as u16),
        (std::net::Ipv4Addr::from(0x0a00_0000 | (i % 256)), 22),
        TcpFlags::SYN,
        i,
        0,
        Vec::new(),
    )
    .record(CaptureOrigin::Darknet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SimClock;
    use chrono::{NaiveDate, TimeZone, Utc};
    use std::net::Ipv4Addr;

    fn at(h: u32, m: u32, s: u32, us: u32) -> Timestamp {
        let dt = Utc.with_ymd_and_hms(2024, 5, 1, h, m, s).unwrap();
        Timestamp::from_datetime(dt).plus_micros(u64::from(us))
    }

    fn rec(ts: Timestamp) -> PacketRecord {
        synthetic_record(ts, 1)
    }

    #[test]
    fn frame_round_trip_keeps_wire_length_and_origin() {
        let payload: Vec<u8> = (0..1000u32).map(|i| i as u8).collect();
        let p = Packet::udp(at(1, 0, 0, 0), (Ipv4Addr::new(1, 2, 3, 4), 53), (Ipv4Addr::new(10, 0, 0, 1), 5353), payload);
        let r = p.record(CaptureOrigin::Responder);
        let (frame, orig) = record_frame(&r);
        assert_eq!(frame.len(), 20 + 8 + 256);
        assert_eq!(orig, 20 + 8 + 1000);
        assert_eq!(frame_record(&frame, orig, r.ts).unwrap(), r);
    }

    #[test]
    fn floor_to_hour_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::open(dir.path(), "A1", None).unwrap();
        w.append(&rec(at(10, 59, 59, 999_999))).unwrap();
        assert_eq!(w.current_hour().unwrap().label(), "2024-05-01-10");
        w.append(&rec(at(11, 0, 0, 0))).unwrap();
        assert_eq!(w.current_hour().unwrap().label(), "2024-05-01-11");
        let sealed = list_sealed(dir.path()).unwrap();
        assert_eq!(sealed.len(), 1);
        assert_eq!(sealed[0].meta.hour_bucket, "2024-05-01-10");
        assert_eq!(sealed[0].meta.packet_count, 1);
        assert!(dir.path().join("A1_2024-05-01-11.pcap").exists());
        let regress = w.append(&rec(at(10, 30, 0, 0)));
        assert!(matches!(regress, Err(CollectorError::TimestampRegression { .. })));
    }

    #[test]
    fn gaps_produce_empty_sealed_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::open(dir.path(), "A1", None).unwrap();
        w.append(&rec(at(1, 0, 0, 0))).unwrap();
        w.append(&rec(at(4, 0, 0, 0))).unwrap();
        w.close().unwrap();
        let sealed = list_sealed(dir.path()).unwrap();
        let counts: Vec<u64> = sealed.iter().map(|t| t.meta.packet_count).collect();
        assert_eq!(counts, vec![1, 0, 0, 1]);
        for t in &sealed {
            assert_eq!(read_trace(&t.pcap).unwrap().len() as u64, t.meta.packet_count);
            assert_eq!(hash_file(&t.pcap).unwrap(), t.meta.content_hash);
        }
    }

    #[test]
    fn manifest_is_union_over_hour() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::open(dir.path(), "A1", None).unwrap();
        w.set_active_modules([ManifestEntry::new("darknet", "1.2", "dk.A1.0000")]);
        w.append(&rec(at(1, 0, 0, 0))).unwrap();
        w.set_active_modules([ManifestEntry::new("responder", "0.9", "rs.A1.0000")]);
        w.append(&rec(at(1, 30, 0, 0))).unwrap();
        w.append(&rec(at(2, 0, 0, 0))).unwrap();
        w.close().unwrap();
        let sealed = list_sealed(dir.path()).unwrap();
        let names = |i: usize| -> Vec<String> {
            sealed[i].meta.module_manifest.iter().map(|m| format!("{}@{}", m.module, m.version)).collect()
        };
        assert_eq!(names(0), vec!["darknet@1.2", "responder@0.9"]);
        assert_eq!(names(1), vec!["responder@0.9"]);
    }

    #[test]
    fn reseal_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::open(dir.path(), "A1", None).unwrap();
        w.append(&rec(at(1, 0, 0, 0))).unwrap();
        let meta = w.close().unwrap().unwrap();
        let pcap = dir.path().join("A1_2024-05-01-01.pcap");
        let again = seal_path(&pcap, &[]).unwrap();
        assert_eq!(meta, again);
        assert!(w.close().unwrap().is_none());
    }

    #[test]
    fn recovers_torn_file() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = TraceWriter::open(dir.path(), "A1", None).unwrap();
            for i in 0..5 {
                w.append(&rec(at(1, 0, i, 0))).unwrap();
            }
        }
        let pcap = dir.path().join("A1_2024-05-01-01.pcap");
        let mut f = OpenOptions::new().append(true).open(&pcap).unwrap();
        f.write_all(&[1, 2, 3, 4, 5, 6, 7]).unwrap();
        drop(f);
        let mut w = TraceWriter::open(dir.path(), "A1", None).unwrap();
        w.append(&rec(at(1, 0, 10, 0))).unwrap();
        let meta = w.close().unwrap().unwrap();
        assert_eq!(meta.packet_count, 6);
        assert_eq!(read_trace(&pcap).unwrap().len(), 6);
        assert_eq!(hash_file(&pcap).unwrap(), meta.content_hash);
    }

    #[test]
    fn disk_quota_drops_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let frame = RECORD_HEADER_LEN + record_frame(&rec(at(1, 0, 0, 0))).0.len() as u64;
        let mut w = TraceWriter::open(dir.path(), "A1", Some(PCAP_HEADER_LEN + 3 * frame)).unwrap();
        let mut ok = 0;
        for i in 0..10 {
            if w.append(&rec(at(1, 0, i, 0))).is_ok() {
                ok += 1;
            }
        }
        assert_eq!(ok, 3);
        assert_eq!(w.dropped(), 7);
        let events = w.take_events();
        assert_eq!(events.iter().filter(|e| matches!(e, CollectorEvent::DiskFull { .. })).count(), 1);
        assert_eq!(w.close().unwrap().unwrap().packet_count, 3);
    }

    fn thirty_hours(dir: &Path) -> Timestamp {
        let day = NaiveDate::from_ymd_opt(2024, 5, 1).unwrap();
        let t0 = crate::time::day_start(day);
        let mut w = TraceWriter::open(dir, "A1", None).unwrap();
        for h in 0..30u64 {
            w.append(&rec(t0.plus_secs(h * 3600 + 5))).unwrap();
        }
        w.close().unwrap();
        t0.plus_secs(30 * 3600)
    }

    #[test]
    fn sync_uploads_all_and_deletes_beyond_retention() {
        let spool = tempfile::tempdir().unwrap();
        let lake_dir = tempfile::tempdir().unwrap();
        let now = thirty_hours(spool.path());
        let clock = SimClock::new(now);
        let mut lake = DirLake::new(lake_dir.path()).unwrap();
        let traces = list_sealed(spool.path()).unwrap();
        assert_eq!(traces.len(), 30);
        let report = sync(&SyncPolicy::default(), &traces, &mut lake, &clock);
        assert_eq!(report.error, None);
        assert_eq!((report.uploaded, report.deleted), (30, 6));
        assert_eq!(list_sealed(spool.path()).unwrap().len(), 24);
        assert_eq!(lake.list().unwrap().len(), 30);
        let (pcap, _) = lake.object_paths("A1", traces[0].hour);
        assert!(pcap.ends_with("A1/2024/05/01/00.pcap"));
    }

    #[test]
    fn disabled_policy_is_noop() {
        let spool = tempfile::tempdir().unwrap();
        let lake_dir = tempfile::tempdir().unwrap();
        let now = thirty_hours(spool.path());
        let policy = SyncPolicy {
            enabled: false,
            ..SyncPolicy::default()
        };
        let mut lake = DirLake::new(lake_dir.path()).unwrap();
        let traces = list_sealed(spool.path()).unwrap();
        let report = sync(&policy, &traces, &mut lake, &SimClock::new(now));
        assert_eq!(report, SyncReport::default());
        assert!(lake.list().unwrap().is_empty());
    }

    #[test]
    fn interrupted_upload_resumes() {
        let spool = tempfile::tempdir().unwrap();
        let lake_dir = tempfile::tempdir().unwrap();
        let day = NaiveDate::from_ymd_opt(2024, 5, 1).unwrap();
        let t0 = crate::time::day_start(day);
        let mut w = TraceWriter::open(spool.path(), "A1", None).unwrap();
        for i in 0..20_000u32 {
            w.append(&synthetic_record(t0.plus_micros(u64::from(i) * 1000), i)).unwrap();
        }
        w.close().unwrap();
        let traces = list_sealed(spool.path()).unwrap();
        let size = fs::metadata(&traces[0].pcap).unwrap().len();
        assert!(size > CHUNK_SIZE as u64);
        let clock = SimClock::new(t0.plus_secs(48 * 3600));
        // stat = op 0, first chunk = op 1, second chunk = op 2.
        let mut lake = FaultyLake::new(DirLake::new(lake_dir.path()).unwrap(), Some((2, FaultPoint::Before)));
        let first = sync(&SyncPolicy::default(), &traces, &mut lake, &clock);
        assert!(first.error.is_some());
        assert_eq!(first.deleted, 0);
        assert!(traces[0].pcap.exists());
        let mut lake = lake.inner;
        let second = sync(&SyncPolicy::default(), &traces, &mut lake, &clock);
        assert_eq!(second.error, None);
        assert_eq!((second.resumed, second.uploaded, second.deleted), (1, 1, 1));
        assert_eq!(second.bytes_sent, size - CHUNK_SIZE as u64);
        let (pcap, _) = lake.object_paths("A1", traces[0].hour);
        assert_eq!(hash_file(&pcap).unwrap(), traces[0].meta.content_hash);
    }

    #[test]
    fn bandwidth_cap_paces_uploads() {
        let spool = tempfile::tempdir().unwrap();
        let lake_dir = tempfile::tempdir().unwrap();
        let now = thirty_hours(spool.path());
        let clock = SimClock::new(now);
        let policy = SyncPolicy {
            bandwidth_cap: 1000,
            retention_hours: 1000,
            ..SyncPolicy::default()
        };
        let mut lake = DirLake::new(lake_dir.path()).unwrap();
        let traces = list_sealed(spool.path()).unwrap();
        let report = sync(&policy, &traces, &mut lake, &clock);
        let elapsed = clock.now().since(now);
        assert!(report.bytes_sent > 0);
        assert!(u128::from(report.bytes_sent) * u128::from(MICROS_PER_SEC) <= u128::from(elapsed) * 1000);
    }

    #[test]
    fn redacted_upload_strips_payloads() {
        let spool = tempfile::tempdir().unwrap();
        let lake_dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::open(spool.path(), "A1", None).unwrap();
        let p = Packet::tcp(at(1, 0, 0, 0), (Ipv4Addr::new(1, 1, 1, 1), 1), (Ipv4Addr::new(10, 0, 0, 1), 80), TcpFlags::ACK, 0, 0, b"secret".to_vec());
        w.append(&p.record(CaptureOrigin::Responder)).unwrap();
        w.close().unwrap();
        let policy = SyncPolicy {
            redact: Redaction::TruncatePayloads,
            ..SyncPolicy::default()
        };
        let mut lake = DirLake::new(lake_dir.path()).unwrap();
        let traces = list_sealed(spool.path()).unwrap();
        let report = sync(&policy, &traces, &mut lake, &SimClock::new(at(2, 0, 0, 0)));
        assert_eq!(report.uploaded, 1);
        let (pcap, _) = lake.object_paths("A1", traces[0].hour);
        let back = read_trace(&pcap).unwrap();
        assert!(back[0].payload_prefix.is_empty());
        assert_eq!(back[0].payload_len, 6);
        assert!(sync_status(spool.path(), &mut lake, Redaction::TruncatePayloads).unwrap()[0].in_lake);
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = Backoff::default();
        let delays: Vec<u64> = (0..12).map(|_| b.fail()).collect();
        assert_eq!(&delays[..5], &[1, 2, 4, 8, 16]);
        assert_eq!(delays[9], 512);
        assert_eq!(delays[10], 900);
        assert_eq!(delays[11], 900);
    }

    #[test]
    fn syncer_waits_out_backoff() {
        let spool = tempfile::tempdir().unwrap();
        let lake_dir = tempfile::tempdir().unwrap();
        let now = thirty_hours(spool.path());
        let clock = SimClock::new(now);
        let mut s = Syncer::new(SyncPolicy::default());
        let mut lake = FaultyLake::new(DirLake::new(lake_dir.path()).unwrap(), Some((0, FaultPoint::Before)));
        assert!(s.tick(spool.path(), &mut lake, &clock).unwrap().error.is_some());
        assert_eq!(s.next_attempt(), now.plus_secs(1));
        assert!(s.tick(spool.path(), &mut lake, &clock).is_none());
        clock.advance(MICROS_PER_SEC);
        let report = s.tick(spool.path(), &mut lake, &clock).unwrap();
        assert_eq!(report.error, None);
        assert_eq!(s.backoff().failures(), 0);
    }
}
