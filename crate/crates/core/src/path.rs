//! The sensor packet path: decode, inbound steering, darknet capture or
//! responder, trace sink, then outbound steering and egress limiting.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::AddressRange;
use crate::collector::{CollectorError, TraceFileMeta, TraceWriter};
use crate::darknet::{darknet_rules, ArpQuery, ArpReply, DarknetCapture, DarknetConfig, DarknetError};
use crate::packet::{self, CaptureOrigin, LinkType, Packet, PacketRecord};
use crate::responder::{ConnectionRecord, Responder, ResponderConfig, ResponderError, ResponderEvent};
use crate::time::Timestamp;
use crate::toolbox::{
    compile, evaluate, Action, Direction, LimitUnit, LimiterSpec, ProgramSlot, RuleMatch, RuleProgram, SteeringRule,
    TokenBucket, ToolboxError,
};

/// Egress limiter attached to responder ranges.
pub const RESPONDER_LIMITER: &str = "responder";
pub const DEFAULT_RESPONDER_RATE: u64 = 100;
const RESPONDER_BAND: u32 = 200;

#[derive(Debug, Error)]
pub enum PathError {
    #[error(transparent)]
    Darknet(#[from] DarknetError),
    #[error(transparent)]
    Responder(#[from] ResponderError),
    #[error(transparent)]
    Rules(#[from] ToolboxError),
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error("range {0} is claimed by both darknet and responder")]
    RangeConflict(AddressRange),
    #[error("range {0} is not owned by the sensor")]
    NotOwned(AddressRange),
}

/// Where captured records go.
pub trait RecordSink: Send {
    fn write(&mut self, rec: &PacketRecord) -> Result<(), CollectorError>;
    fn advance(&mut self, _now: Timestamp) -> Result<Vec<TraceFileMeta>, CollectorError> {
        Ok(Vec::new())
    }
    fn close(&mut self) -> Result<Option<TraceFileMeta>, CollectorError> {
        Ok(None)
    }
}

impl RecordSink for TraceWriter {
    fn write(&mut self, rec: &PacketRecord) -> Result<(), CollectorError> {
        match self.append(rec) {
            Err(CollectorError::DiskFull { .. }) => Ok(()),
            r => r,
        }
    }

    fn advance(&mut self, now: Timestamp) -> Result<Vec<TraceFileMeta>, CollectorError> {
        TraceWriter::advance(self, now)
    }

    fn close(&mut self) -> Result<Option<TraceFileMeta>, CollectorError> {
        TraceWriter::close(self)
    }
}

impl RecordSink for Vec<PacketRecord> {
    fn write(&mut self, rec: &PacketRecord) -> Result<(), CollectorError> {
        self.push(rec.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    DecodeError,
    Dropped,
    RateLimited,
    Darknet,
    Responder,
    Unclaimed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStats {
    pub received: u64,
    pub decode_errors: u64,
    pub inbound_dropped: u64,
    pub inbound_limited: u64,
    pub darknet: u64,
    pub responder: u64,
    pub unclaimed: u64,
    pub egress_sent: u64,
    pub egress_dropped: u64,
    pub egress_limited: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathOutput {
    pub verdict: Verdict,
    pub outbound: Vec<Packet>,
}

pub struct SensorPath {
    sensor_id: String,
    owned: Vec<AddressRange>,
    slot: Arc<ProgramSlot>,
    buckets: BTreeMap<String, (LimiterSpec, TokenBucket)>,
    extra_rules: Vec<SteeringRule>,
    extra_limiters: Vec<LimiterSpec>,
    responder_limit: LimiterSpec,
    darknet: Option<DarknetCapture>,
    responder: Option<Responder>,
    sink: Option<Box<dyn RecordSink>>,
    connections: Vec<ConnectionRecord>,
    stats: PathStats,
}

impl SensorPath {
    pub fn new(sensor_id: &str, owned: Vec<AddressRange>) -> Self {
        SensorPath {
            sensor_id: sensor_id.to_string(),
            owned,
            slot: Arc::new(ProgramSlot::default()),
            buckets: BTreeMap::new(),
            extra_rules: Vec::new(),
            extra_limiters: Vec::new(),
            responder_limit: LimiterSpec::packets(RESPONDER_LIMITER, DEFAULT_RESPONDER_RATE, DEFAULT_RESPONDER_RATE),
            darknet: None,
            responder: None,
            sink: None,
            connections: Vec::new(),
            stats: PathStats::default(),
        }
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn owned(&self) -> &[AddressRange] {
        &self.owned
    }

    pub fn stats(&self) -> &PathStats {
        &self.stats
    }

    /// Shared handle for publishing programs from another thread.
    pub fn program_slot(&self) -> Arc<ProgramSlot> {
        self.slot.clone()
    }

    pub fn program(&self) -> Arc<RuleProgram> {
        self.slot.snapshot()
    }

    pub fn darknet(&self) -> Option<&DarknetCapture> {
        self.darknet.as_ref()
    }

    pub fn responder(&self) -> Option<&Responder> {
        self.responder.as_ref()
    }

    pub fn set_sink(&mut self, sink: Box<dyn RecordSink>) {
        self.sink = Some(sink);
    }

    pub fn take_sink(&mut self) -> Option<Box<dyn RecordSink>> {
        self.sink.take()
    }

    pub fn set_darknet(&mut self, cfg: Option<DarknetConfig>) -> Result<(), PathError> {
        if let Some(c) = &cfg {
            c.validate(&self.owned)?;
        }
        let old = std::mem::replace(&mut self.darknet, cfg.map(DarknetCapture::new));
        if let Err(e) = self.check_disjoint().and_then(|_| self.rebuild()) {
            self.darknet = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn set_responder(&mut self, cfg: Option<ResponderConfig>) -> Result<(), PathError> {
        let new = cfg.map(Responder::new).transpose()?;
        if let Some(r) = &new {
            for range in &r.config().ip_ranges {
                if !self.owned.iter().any(|o| o.covers(range)) {
                    return Err(PathError::NotOwned(*range));
                }
            }
        }
        let old = std::mem::replace(&mut self.responder, new);
        if let Err(e) = self.check_disjoint().and_then(|_| self.rebuild()) {
            self.responder = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn set_responder_limit(&mut self, rate: u64, burst: u64) -> Result<(), PathError> {
        self.responder_limit = LimiterSpec::packets(RESPONDER_LIMITER, rate, burst);
        self.rebuild()
    }

    /// Installs operator rules alongside the module-derived ones.
    pub fn set_rules(&mut self, rules: Vec<SteeringRule>, limiters: Vec<LimiterSpec>) -> Result<(), PathError> {
        let old = (
            std::mem::replace(&mut self.extra_rules, rules),
            std::mem::replace(&mut self.extra_limiters, limiters),
        );
        if let Err(e) = self.rebuild() {
            (self.extra_rules, self.extra_limiters) = old;
            return Err(e);
        }
        Ok(())
    }

    fn check_disjoint(&self) -> Result<(), PathError> {
        if let (Some(d), Some(r)) = (&self.darknet, &self.responder) {
            for a in &d.config().ranges {
                if r.config().ip_ranges.iter().any(|b| a.overlaps(b)) {
                    return Err(PathError::RangeConflict(*a));
                }
            }
        }
        Ok(())
    }

    /// Module-derived rules plus operator rules.
    pub fn composed_rules(&self) -> (Vec<SteeringRule>, Vec<LimiterSpec>) {
        let mut rules = Vec::new();
        let mut limiters = self.extra_limiters.clone();
        if let Some(d) = &self.darknet {
            rules.extend(darknet_rules(d.config()));
        }
        if let Some(r) = &self.responder {
            let mut ranges = r.config().ip_ranges.clone();
            ranges.sort();
            for (i, range) in ranges.iter().enumerate() {
                rules.push(SteeringRule {
                    priority: RESPONDER_BAND + i as u32,
                    direction: Direction::Outbound,
                    matcher: RuleMatch {
                        src_range: Some(*range),
                        ..Default::default()
                    },
                    action: Action::RateLimit(RESPONDER_LIMITER.into()),
                });
            }
            limiters.push(self.responder_limit.clone());
        }
        rules.extend(self.extra_rules.iter().cloned());
        (rules, limiters)
    }

    fn rebuild(&mut self) -> Result<(), PathError> {
        let (rules, limiters) = self.composed_rules();
        let program = compile(rules, limiters)?;
        self.slot.publish(program);
        Ok(())
    }

    fn limit(&mut self, program: &RuleProgram, id: &str, now: Timestamp, bytes: u64) -> bool {
        let Some(spec) = program.limiters().get(id) else { return false };
        let entry = self
            .buckets
            .entry(id.to_string())
            .or_insert_with(|| (spec.clone(), TokenBucket::from_spec(spec)));
        if entry.0 != *spec {
            *entry = (spec.clone(), TokenBucket::from_spec(spec));
        }
        let n = match spec.unit {
            LimitUnit::Packets => 1,
            LimitUnit::Bytes => bytes,
        };
        entry.1.allow(now, n) == n
    }

    /// Handles one raw frame from the capture interface.
    pub fn process_frame(&mut self, raw: &[u8], link: LinkType, ts: Timestamp) -> Result<PathOutput, PathError> {
        match packet::parse(raw, link, ts) {
            Ok(p) => self.process(&p),
            Err(_) => {
                self.stats.received += 1;
                self.stats.decode_errors += 1;
                Ok(PathOutput {
                    verdict: Verdict::DecodeError,
                    outbound: Vec::new(),
                })
            }
        }
    }

    /// Handles one decoded inbound packet.
    pub fn process(&mut self, pkt: &Packet) -> Result<PathOutput, PathError> {
        self.stats.received += 1;
        let program = self.slot.snapshot();
        let mut out = PathOutput {
            verdict: Verdict::Unclaimed,
            outbound: Vec::new(),
        };
        match evaluate(&program, pkt, Direction::Inbound) {
            Action::Drop => {
                self.stats.inbound_dropped += 1;
                out.verdict = Verdict::Dropped;
                return Ok(out);
            }
            Action::RateLimit(id) => {
                if !self.limit(&program, id, pkt.ts, wire_len(pkt)) {
                    self.stats.inbound_limited += 1;
                    out.verdict = Verdict::RateLimited;
                    return Ok(out);
                }
            }
            Action::Accept | Action::SteerToBackend(_) => {}
        }

        let record = if self.responder.as_ref().is_some_and(|r| r.config().covers_ip(pkt.dst_ip)) {
            let responder = self.responder.as_mut().expect("checked");
            let outcome = responder.on_segment(pkt);
            for ev in outcome.events {
                if let ResponderEvent::Closed(rec) = ev {
                    self.connections.push(rec);
                }
            }
            if let Some(reply) = outcome.outbound {
                out.outbound.extend(self.egress_with(&program, reply));
            }
            self.stats.responder += 1;
            out.verdict = Verdict::Responder;
            Some(pkt.record(CaptureOrigin::Responder))
        } else if let Some(rec) = self.darknet.as_mut().and_then(|d| d.observe(pkt)) {
            self.stats.darknet += 1;
            out.verdict = Verdict::Darknet;
            Some(rec)
        } else {
            self.stats.unclaimed += 1;
            None
        };
        if let (Some(rec), Some(sink)) = (record, self.sink.as_mut()) {
            sink.write(&rec)?;
        }
        Ok(out)
    }

    /// Runs a locally generated packet through outbound steering.
    pub fn egress(&mut self, pkt: Packet) -> Option<Packet> {
        let program = self.slot.snapshot();
        self.egress_with(&program, pkt)
    }

    fn egress_with(&mut self, program: &RuleProgram, pkt: Packet) -> Option<Packet> {
        match evaluate(program, &pkt, Direction::Outbound) {
            Action::Drop => {
                self.stats.egress_dropped += 1;
                None
            }
            Action::RateLimit(id) => {
                let id = id.clone();
                if self.limit(program, &id, pkt.ts, wire_len(&pkt)) {
                    self.stats.egress_sent += 1;
                    Some(pkt)
                } else {
                    self.stats.egress_limited += 1;
                    None
                }
            }
            Action::Accept | Action::SteerToBackend(_) => {
                self.stats.egress_sent += 1;
                Some(pkt)
            }
        }
    }

    pub fn on_arp(&mut self, query: &ArpQuery) -> Option<ArpReply> {
        self.darknet.as_mut().and_then(|d| d.on_arp(query))
    }

    /// Expires idle connections and rotates trace files.
    pub fn tick(&mut self, now: Timestamp) -> Result<Vec<TraceFileMeta>, PathError> {
        if let Some(r) = self.responder.as_mut() {
            self.connections.extend(r.expire(now));
        }
        match self.sink.as_mut() {
            Some(s) => Ok(s.advance(now)?),
            None => Ok(Vec::new()),
        }
    }

    /// Closes open connections and the current trace file.
    pub fn finish(&mut self, now: Timestamp) -> Result<Option<TraceFileMeta>, PathError> {
        if let Some(r) = self.responder.as_mut() {
            self.connections.extend(r.drain(now));
        }
        match self.sink.as_mut() {
            Some(s) => Ok(s.close()?),
            None => Ok(None),
        }
    }

    pub fn take_connections(&mut self) -> Vec<ConnectionRecord> {
        std::mem::take(&mut self.connections)
    }
}

fn wire_len(p: &Packet) -> u64 {
    40 + p.payload.len() as u64
}
