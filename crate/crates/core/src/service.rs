//! Networked controller and sensor agent.
//!
//! One TCP listener serves both sensors and operators. A connection whose
//! first byte is `{` speaks the admin protocol (one JSON request per line);
//! anything else is an overlay session carrying control messages, trace
//! chunks and logs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::rngs::{OsRng, StdRng};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::addr::AddressRange;
use crate::collector::{
    CollectorError, DirLake, Lake, LakeError, LakeStat, ManifestEntry, SyncPolicy, SyncReport, Syncer, TraceFileMeta,
    TraceWriter,
};
use crate::controlplane::{
    Action, ControlError, Controller, HeartbeatAck, HubInfo, InstanceReport, InstanceStatus, ModuleParams, ModuleSpec,
    Principal, Role, SensorDescriptor, TunnelConfig,
};
use crate::darknet::DarknetConfig;
use crate::overlay::{
    self, handshake_initiate, split_channel, Channel, Frame, FrameReadError, Hub, MsgType, OverlayError, PeerIdentity,
    Session, StaticKeypair, KEEPALIVE_SECS, MISSED_KEEPALIVES,
};
use crate::path::{PathError, SensorPath};
use crate::responder::ResponderConfig;
use crate::time::{Clock, HourBucket, Timestamp, MICROS_PER_SEC};
use crate::toolbox::{emit_iptables, write_rules_file, EmitOptions, RuleProgram};

pub const HUB_ID: &str = "hub";
pub const TOKEN_PREFIX: &str = "holo1";
const ADMIN_KEY_FILE: &str = "admin.key";
const HUB_KEY_FILE: &str = "hub.key";
const AGENT_KEY_FILE: &str = "agent.key";
const TUNNEL_FILE: &str = "tunnel.json";
const DESCRIPTOR_FILE: &str = "descriptor.json";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("{kind}: {message}")]
    Remote { kind: String, message: String },
    #[error("malformed token: {0}")]
    BadToken(String),
}

impl ServiceError {
    pub fn kind(&self) -> String {
        match self {
            ServiceError::Control(c) => c.kind().to_string(),
            ServiceError::Remote { kind, .. } => kind.clone(),
            ServiceError::Io(_) => "Io".into(),
            ServiceError::Overlay(_) => "Overlay".into(),
            ServiceError::Path(_) => "Path".into(),
            ServiceError::Collector(_) => "Collector".into(),
            ServiceError::Protocol(_) => "Protocol".into(),
            ServiceError::BadToken(_) => "BadToken".into(),
        }
    }
}

impl From<FrameReadError> for ServiceError {
    fn from(e: FrameReadError) -> Self {
        match e {
            FrameReadError::Io(e) => ServiceError::Io(e),
            FrameReadError::Overlay(o) => ServiceError::Overlay(o),
        }
    }
}

/// `holo1.<token hex>.<hub public key hex>`.
pub fn format_token(token: &[u8; 32], hub_public: &[u8; 32]) -> String {
    format!("{TOKEN_PREFIX}.{}.{}", hex::encode(token), hex::encode(hub_public))
}

pub fn parse_token(s: &str) -> Result<([u8; 32], [u8; 32]), ServiceError> {
    let parts: Vec<&str> = s.trim().split('.').collect();
    if parts.len() != 3 || parts[0] != TOKEN_PREFIX {
        return Err(ServiceError::BadToken("expected holo1.<token>.<hub key>".into()));
    }
    let decode = |h: &str| -> Result<[u8; 32], ServiceError> {
        hex::decode(h)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| ServiceError::BadToken("fields must be 32 hex-encoded bytes".into()))
    };
    Ok((decode(parts[1])?, decode(parts[2])?))
}

/// Control-channel requests from an agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AgentRequest {
    Heartbeat { instances: Vec<InstanceReport> },
    LakeStat { hour: String },
    LakeCommit { hour: String, meta: TraceFileMeta },
    LakeVerify { hour: String, hash: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum HubReply {
    HeartbeatAck { ack: HeartbeatAck },
    LakeStat { stat: LakeStat },
    Committed,
    Verified { ok: bool },
    ChunkAck { len: u64 },
    LakeFailed { error: LakeError },
    Error { kind: String, message: String },
}

/// Payload an unregistered sensor presents with its first handshake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapRequest {
    pub token: String,
    pub descriptor: SensorDescriptor,
}

/// One trace chunk: `name_len(2) name offset(8) total(8) final(1) bytes`,
/// integers big-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub name: String,
    pub offset: u64,
    pub total: u64,
    pub last: bool,
    pub data: Vec<u8>,
}

impl Chunk {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + self.name.len() + self.data.len());
        out.extend_from_slice(&(self.name.len() as u16).to_be_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.extend_from_slice(&self.offset.to_be_bytes());
        out.extend_from_slice(&self.total.to_be_bytes());
        out.push(u8::from(self.last));
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Chunk, ServiceError> {
        let bad = || ServiceError::Protocol("truncated chunk".into());
        let n = u16::from_be_bytes(buf.get(..2).ok_or_else(bad)?.try_into().expect("2 bytes")) as usize;
        let rest = buf.get(2..).ok_or_else(bad)?;
        let name = std::str::from_utf8(rest.get(..n).ok_or_else(bad)?)
            .map_err(|_| ServiceError::Protocol("chunk name is not utf-8".into()))?
            .to_string();
        let rest = &rest[n..];
        if rest.len() < 17 {
            return Err(bad());
        }
        Ok(Chunk {
            name,
            offset: u64::from_be_bytes(rest[..8].try_into().expect("8 bytes")),
            total: u64::from_be_bytes(rest[8..16].try_into().expect("8 bytes")),
            last: rest[16] != 0,
            data: rest[17..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AdminOp {
    TokenNew { sensor_id: String, ttl_secs: u64 },
    Deploy { spec: ModuleSpec },
    Undeploy { name: String },
    Status,
    PrincipalAdd { name: String, role: Role },
    CatalogPut { name: String, bytes_b64: String },
    CatalogGet { name: String, version: String },
    Rules { sensor_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminRequest {
    pub key: String,
    #[serde(flatten)]
    pub op: AdminOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl AdminResponse {
    fn ok(v: Value) -> Self {
        AdminResponse {
            ok: true,
            result: Some(v),
            error: None,
        }
    }

    fn err(kind: &str, message: String) -> Self {
        AdminResponse {
            ok: false,
            result: None,
            error: Some(WireError {
                kind: kind.to_string(),
                message,
            }),
        }
    }
}

fn load_or_create_key(path: &Path) -> Result<StaticKeypair, ServiceError> {
    match fs::read_to_string(path) {
        Ok(text) => {
            let bytes: [u8; 32] = hex::decode(text.trim())
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| ServiceError::Protocol(format!("{} is not a 32-byte hex key", path.display())))?;
            Ok(StaticKeypair::from_secret(bytes))
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            let keys = StaticKeypair::generate(&mut OsRng);
            write_private(path, &hex::encode(keys.secret_bytes()))?;
            Ok(keys)
        }
        Err(e) => Err(e.into()),
    }
}

fn write_private(path: &Path, text: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")
}

/// What a set of module specs configures on one sensor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModuleSetup {
    pub sync: Option<SyncPolicy>,
    pub quota_bytes: Option<u64>,
    pub collector: bool,
    pub manifest: Vec<ManifestEntry>,
}

/// Configures `path` from the specs running on `descriptor`'s sensor. The
/// first spec of each kind wins for darknet and responder; toolbox rules
/// and limiters are merged.
pub fn apply_modules(
    path: &mut SensorPath,
    descriptor: &SensorDescriptor,
    running: &[(String, &ModuleSpec)],
    isn_seed: [u8; 32],
) -> Result<ModuleSetup, ServiceError> {
    let mut setup = ModuleSetup::default();
    let mut darknet = None;
    let mut responder: Option<ResponderConfig> = None;
    let mut rules = Vec::new();
    let mut limiters = Vec::new();
    for (instance, spec) in running {
        setup
            .manifest
            .push(ManifestEntry::new(&spec.name, &spec.version, instance));
        match spec.parsed_params()? {
            ModuleParams::Darknet(p) if darknet.is_none() => darknet = Some(p),
            ModuleParams::Responder(p) if responder.is_none() => {
                let ranges = p.ip_ranges.clone().unwrap_or_else(|| descriptor.address_ranges.clone());
                let mut cfg = ResponderConfig::new(ranges, p.ports.clone(), isn_seed);
                cfg.backend_map = p.backend_map.clone();
                if let Some(c) = p.max_capture_bytes {
                    cfg.max_capture_bytes = c;
                }
                responder = Some(cfg);
            }
            ModuleParams::Toolbox(p) => {
                rules.extend(p.rules);
                limiters.extend(p.limiters);
            }
            ModuleParams::Collector(p) => {
                setup.collector = true;
                setup.sync = setup.sync.or(p.sync);
                setup.quota_bytes = setup.quota_bytes.or(p.quota_bytes);
            }
            _ => {}
        }
    }
    let darknet = darknet.map(|p| {
        let taken: Vec<AddressRange> = responder.as_ref().map(|r| r.ip_ranges.clone()).unwrap_or_default();
        let ranges = p.ranges.unwrap_or_else(|| {
            descriptor
                .address_ranges
                .iter()
                .filter(|r| !taken.iter().any(|t| t.overlaps(r)))
                .copied()
                .collect()
        });
        let mut cfg = DarknetConfig::new(ranges, p.mode);
        cfg.sensor_ip = p.sensor_ip;
        cfg
    });
    path.set_responder(None)?;
    path.set_darknet(None)?;
    path.set_rules(rules, limiters)?;
    path.set_responder(responder)?;
    path.set_darknet(darknet)?;
    Ok(setup)
}

/// Rule program a sensor runs for the given specs.
pub fn program_for(descriptor: &SensorDescriptor, specs: &[ModuleSpec]) -> Result<RuleProgram, ServiceError> {
    let mut path = SensorPath::new(&descriptor.sensor_id, descriptor.address_ranges.clone());
    let running: Vec<(String, &ModuleSpec)> = specs.iter().map(|s| (s.name.clone(), s)).collect();
    apply_modules(&mut path, descriptor, &running, [0; 32])?;
    Ok((*path.program()).clone())
}

/// Everything the hub process holds behind one lock.
pub struct HubState {
    pub controller: Controller,
    pub hub: Hub,
    pub lake: DirLake,
    logs_dir: PathBuf,
    rng: StdRng,
}

impl HubState {
    fn authenticate(&self, key: &str) -> Result<Principal, ControlError> {
        self.controller
            .authenticate(key)
            .ok_or_else(|| ControlError::Unauthorized("unknown API key".into()))
    }

    /// Executes one admin request.
    pub fn admin(&mut self, req: AdminRequest, now: Timestamp) -> AdminResponse {
        match self.admin_inner(req, now) {
            Ok(v) => AdminResponse::ok(v),
            Err(e) => AdminResponse::err(&e.kind(), e.to_string()),
        }
    }

    fn admin_inner(&mut self, req: AdminRequest, now: Timestamp) -> Result<Value, ServiceError> {
        let who = self.authenticate(&req.key)?;
        let json = |v: &dyn erased::Ser| v.to_value();
        Ok(match req.op {
            AdminOp::TokenNew { sensor_id, ttl_secs } => {
                let t = self.controller.issue_token(&who, &sensor_id, ttl_secs, now, &mut self.rng)?;
                serde_json::json!({
                    "sensor_id": t.sensor_id,
                    "expires_at": t.expires_at,
                    "token": format_token(&t.token, &self.controller.hub().public_key),
                })
            }
            AdminOp::Deploy { spec } => json(&self.controller.set_desired(&who, spec)?),
            AdminOp::Undeploy { name } => json(&self.controller.remove_desired(&who, &name)?),
            AdminOp::Status => json(&self.controller.status(now)),
            AdminOp::PrincipalAdd { name, role } => {
                let key = self.controller.add_principal(&who, Principal { name: name.clone(), role }, &mut self.rng)?;
                serde_json::json!({ "name": name, "api_key": key })
            }
            AdminOp::CatalogPut { name, bytes_b64 } => {
                let bytes = STANDARD
                    .decode(bytes_b64)
                    .map_err(|e| ServiceError::Protocol(format!("bytes_b64: {e}")))?;
                let version = self.controller.catalog_put(&who, &name, &bytes)?;
                serde_json::json!({ "name": name, "version": version })
            }
            AdminOp::CatalogGet { name, version } => {
                let bytes = self.controller.catalog_get(&name, &version)?;
                serde_json::json!({ "name": name, "version": version, "bytes_b64": STANDARD.encode(bytes) })
            }
            AdminOp::Rules { sensor_id } => {
                let rec = self
                    .controller
                    .sensor(&sensor_id)
                    .ok_or_else(|| ControlError::UnknownSensor(sensor_id.clone()))?;
                let specs = self.controller.desired().sensors.remove(&sensor_id).unwrap_or_default();
                let program = program_for(&rec.descriptor, &specs)?;
                let text = emit_iptables(&program, &EmitOptions::default()).map_err(|e| ServiceError::Protocol(e.to_string()))?;
                serde_json::json!({ "sensor_id": sensor_id, "generation": program.generation(), "iptables": text })
            }
        })
    }

    /// Answers one control-channel request from `sensor`.
    pub fn control(&mut self, sensor: &str, req: AgentRequest, now: Timestamp) -> HubReply {
        let lake_hour = |h: &str| HourBucket::parse_label(h).ok_or_else(|| LakeError::Io(format!("bad hour label {h}")));
        let lake_result = |r: Result<HubReply, LakeError>| r.unwrap_or_else(|error| HubReply::LakeFailed { error });
        match req {
            AgentRequest::Heartbeat { instances } => match self.controller.heartbeat(sensor, instances, now) {
                Ok(ack) => HubReply::HeartbeatAck { ack },
                Err(e) => HubReply::Error {
                    kind: e.kind().into(),
                    message: e.to_string(),
                },
            },
            AgentRequest::LakeStat { hour } => {
                lake_result(lake_hour(&hour).and_then(|h| self.lake.stat(sensor, h)).map(|stat| HubReply::LakeStat { stat }))
            }
            AgentRequest::LakeCommit { hour, meta } => {
                if meta.sensor_id != sensor {
                    return HubReply::Error {
                        kind: "Unauthorized".into(),
                        message: format!("{sensor} may not commit traces of {}", meta.sensor_id),
                    };
                }
                lake_result(lake_hour(&hour).and_then(|h| self.lake.commit(sensor, h, &meta)).map(|_| HubReply::Committed))
            }
            AgentRequest::LakeVerify { hour, hash } => {
                lake_result(lake_hour(&hour).and_then(|h| self.lake.verify(sensor, h, &hash)).map(|ok| HubReply::Verified { ok }))
            }
        }
    }

    pub fn chunk(&mut self, sensor: &str, chunk: Chunk) -> HubReply {
        let r = HourBucket::parse_label(&chunk.name)
            .ok_or_else(|| LakeError::Io(format!("bad hour label {}", chunk.name)))
            .and_then(|h| self.lake.put_chunk(sensor, h, chunk.offset, &chunk.data));
        match r {
            Ok(len) => HubReply::ChunkAck { len },
            Err(error) => HubReply::LakeFailed { error },
        }
    }

    pub fn log(&mut self, sensor: &str, line: &[u8], now: Timestamp) -> io::Result<()> {
        let dir = self.logs_dir.join(sensor);
        fs::create_dir_all(&dir)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{}.jsonl", now.day())))?;
        f.write_all(line)?;
        if !line.ends_with(b"\n") {
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Handshake admission for an unregistered key: the payload must carry
    /// a valid onboarding token.
    fn admit(controller: &mut Controller, adm: &overlay::Admission, now: Timestamp) -> Result<Vec<u8>, String> {
        let req: BootstrapRequest =
            serde_json::from_slice(&adm.payload).map_err(|e| format!("bootstrap payload: {e}"))?;
        if req.descriptor.sensor_id != adm.claimed_id {
            return Err("descriptor sensor_id differs from the claimed node id".into());
        }
        let (token, _) = parse_token(&req.token).map_err(|e| e.to_string())?;
        let tunnel = controller
            .onboard(&token, adm.static_key, req.descriptor, now)
            .map_err(|e| format!("{}: {e}", e.kind()))?;
        serde_json::to_vec(&tunnel).map_err(|e| e.to_string())
    }
}

mod erased {
    use serde::Serialize;
    use serde_json::Value;

    pub trait Ser {
        fn to_value(&self) -> Value;
    }

    impl<T: Serialize> Ser for T {
        fn to_value(&self) -> Value {
            serde_json::to_value(self).expect("serialisable")
        }
    }
}

pub struct ControllerServer {
    state: Arc<Mutex<HubState>>,
    clock: Arc<dyn Clock>,
    listener: TcpListener,
    data_dir: PathBuf,
}

impl ControllerServer {
    /// Opens state under `data_dir` and binds `listen`. On first start an
    /// admin principal is created and its key written to `admin.key`.
    pub fn open(data_dir: &Path, listen: &str, advertise: Option<&str>, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        fs::create_dir_all(data_dir)?;
        let keys = load_or_create_key(&data_dir.join(HUB_KEY_FILE))?;
        let listener = TcpListener::bind(listen)?;
        let addr = advertise.map(str::to_string).unwrap_or(listener.local_addr()?.to_string());
        let info = HubInfo {
            hub_id: HUB_ID.into(),
            address: addr,
            public_key: keys.public(),
        };
        let mut controller = Controller::open(&data_dir.join("state"), info, clock.now())?;
        let mut rng = StdRng::from_rng(OsRng).map_err(|e| ServiceError::Protocol(e.to_string()))?;
        if let Some(key) = controller.bootstrap_admin("admin", &mut rng)? {
            write_private(&data_dir.join(ADMIN_KEY_FILE), &key)?;
        }
        let mut hub = Hub::new(HUB_ID, keys);
        for rec in controller.state().sensors.values() {
            hub.register(PeerIdentity {
                node_id: rec.descriptor.sensor_id.clone(),
                static_public_key: rec.static_key,
                role: overlay::Role::Sensor,
            })?;
        }
        let lake = DirLake::new(&data_dir.join("lake"))?;
        Ok(ControllerServer {
            state: Arc::new(Mutex::new(HubState {
                controller,
                hub,
                lake,
                logs_dir: data_dir.join("logs"),
                rng,
            })),
            clock,
            listener,
            data_dir: data_dir.to_path_buf(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn admin_key_path(&self) -> PathBuf {
        self.data_dir.join(ADMIN_KEY_FILE)
    }

    pub fn state(&self) -> Arc<Mutex<HubState>> {
        self.state.clone()
    }

    /// Serves connections on background threads until the handle stops.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let state = self.state.clone();
        let join = std::thread::spawn(move || self.serve(flag));
        Ok(ServerHandle {
            addr,
            stop,
            join: Some(join),
            state,
        })
    }

    /// Blocks serving connections until `stop` is set.
    pub fn serve(self, stop: Arc<AtomicBool>) {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let state = self.state.clone();
            let clock = self.clock.clone();
            std::thread::spawn(move || {
                if let Err(e) = handle_connection(stream, state, clock) {
                    log::debug!("connection ended: {e}");
                }
            });
        }
        // Persist a snapshot on shutdown.
        if let Ok(mut s) = self.state.lock() {
            let _ = s.controller.snapshot();
        }
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
    state: Arc<Mutex<HubState>>,
}

impl ServerHandle {
    pub fn state(&self) -> Arc<Mutex<HubState>> {
        self.state.clone()
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn handle_connection(stream: TcpStream, state: Arc<Mutex<HubState>>, clock: Arc<dyn Clock>) -> Result<(), ServiceError> {
    let mut first = [0u8; 1];
    if stream.peek(&mut first)? == 0 {
        return Ok(());
    }
    if first[0] == b'{' {
        serve_admin(stream, state, clock)
    } else {
        serve_overlay(stream, state, clock)
    }
}

fn serve_admin(stream: TcpStream, state: Arc<Mutex<HubState>>, clock: Arc<dyn Clock>) -> Result<(), ServiceError> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<AdminRequest>(&line) {
            Ok(req) => state.lock().expect("hub state poisoned").admin(req, clock.now()),
            Err(e) => AdminResponse::err("BadRequest", e.to_string()),
        };
        let mut out = serde_json::to_vec(&resp).map_err(|e| ServiceError::Protocol(e.to_string()))?;
        out.push(b'\n');
        writer.write_all(&out)?;
    }
    Ok(())
}

fn serve_overlay(stream: TcpStream, state: Arc<Mutex<HubState>>, clock: Arc<dyn Clock>) -> Result<(), ServiceError> {
    let idle = Duration::from_secs(KEEPALIVE_SECS * MISSED_KEEPALIVES + 5);
    stream.set_read_timeout(Some(idle))?;
    let mut reader = io::BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let init = Frame::read_from(&mut reader)?;
    let (resp, node) = {
        let mut guard = state.lock().expect("hub state poisoned");
        let s = &mut *guard;
        let now = clock.now();
        let controller = &mut s.controller;
        s.hub
            .accept_with(&init, now, &mut s.rng, |adm| HubState::admit(controller, adm, now))?
    };
    resp.write_to(&mut writer)?;
    log::info!("sensor {node} connected");
    let result = overlay_loop(&mut reader, &mut writer, &node, &state, &*clock);
    state.lock().expect("hub state poisoned").hub.drop_session(&node);
    result
}

fn overlay_loop(
    reader: &mut impl io::Read,
    writer: &mut TcpStream,
    node: &str,
    state: &Mutex<HubState>,
    clock: &dyn Clock,
) -> Result<(), ServiceError> {
    loop {
        let frame = Frame::read_from(reader)?;
        let mut s = state.lock().expect("hub state poisoned");
        let now = clock.now();
        let decision = match s.hub.hub_route(node, &frame, now) {
            Ok(d) => d,
            Err(e @ (OverlayError::PolicyViolation { .. } | OverlayError::ReplayDetected | OverlayError::UnknownPeer(_))) => {
                log::warn!("dropped frame from {node}: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let plaintext = match decision {
            overlay::ForwardDecision::Deliver { plaintext, .. } => plaintext,
            overlay::ForwardDecision::Keepalive { .. } => continue,
            overlay::ForwardDecision::Closed { .. } => return Ok(()),
        };
        let (channel, body) = split_channel(&plaintext)?;
        let reply = match channel {
            Channel::Control => Some(match serde_json::from_slice::<AgentRequest>(body) {
                Ok(req) => s.control(node, req, now),
                Err(e) => HubReply::Error {
                    kind: "BadRequest".into(),
                    message: e.to_string(),
                },
            }),
            Channel::TraceChunks => Some(match Chunk::decode(body) {
                Ok(c) => s.chunk(node, c),
                Err(e) => HubReply::Error {
                    kind: "BadRequest".into(),
                    message: e.to_string(),
                },
            }),
            Channel::Logs => {
                s.log(node, body, now)?;
                None
            }
        };
        if let Some(r) = reply {
            let bytes = serde_json::to_vec(&r).map_err(|e| ServiceError::Protocol(e.to_string()))?;
            let f = s.hub.send(node, Channel::Control, &bytes, now)?;
            drop(s);
            f.write_to(writer)?;
        }
    }
}

/// Sends one admin request and returns its result.
pub fn admin_call(addr: &str, key: &str, op: AdminOp) -> Result<Value, ServiceError> {
    let stream = connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut w = stream.try_clone()?;
    let mut line = serde_json::to_vec(&AdminRequest { key: key.to_string(), op }).map_err(|e| ServiceError::Protocol(e.to_string()))?;
    line.push(b'\n');
    w.write_all(&line)?;
    let mut resp = String::new();
    BufReader::new(stream).read_line(&mut resp)?;
    let resp: AdminResponse = serde_json::from_str(&resp).map_err(|e| ServiceError::Protocol(format!("bad response: {e}")))?;
    match (resp.ok, resp.result, resp.error) {
        (true, Some(v), _) => Ok(v),
        (_, _, Some(e)) => Err(ServiceError::Remote {
            kind: e.kind,
            message: e.message,
        }),
        _ => Err(ServiceError::Protocol("empty response".into())),
    }
}

fn connect(addr: &str) -> Result<TcpStream, ServiceError> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let mut last = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, Duration::from_secs(10)) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last
        .map(ServiceError::Io)
        .unwrap_or_else(|| ServiceError::Protocol(format!("{addr} did not resolve"))))
}

/// Sensor end of an overlay session.
pub struct OverlayClient {
    stream: TcpStream,
    reader: io::BufReader<TcpStream>,
    session: Session,
    clock: Arc<dyn Clock>,
}

impl OverlayClient {
    /// Connects and completes the handshake, returning the hub's response
    /// payload.
    pub fn connect(
        addr: &str,
        node_id: &str,
        keys: &StaticKeypair,
        hub_public: [u8; 32],
        payload: &[u8],
        clock: Arc<dyn Clock>,
    ) -> Result<(Self, Vec<u8>), ServiceError> {
        let mut stream = connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let hub = PeerIdentity {
            node_id: HUB_ID.into(),
            static_public_key: hub_public,
            role: overlay::Role::Hub,
        };
        let (pending, init) = handshake_initiate(node_id, keys, &hub, payload, clock.now(), &mut OsRng)?;
        init.write_to(&mut stream)?;
        let mut reader = io::BufReader::new(stream.try_clone()?);
        let resp = Frame::read_from(&mut reader).map_err(|e| match e {
            FrameReadError::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
                ServiceError::Protocol("hub refused the handshake".into())
            }
            other => other.into(),
        })?;
        let (session, reply) = pending.complete(&resp, clock.now())?;
        Ok((
            OverlayClient {
                stream,
                reader,
                session,
                clock,
            },
            reply,
        ))
    }

    fn send(&mut self, channel: Channel, data: &[u8]) -> Result<(), ServiceError> {
        let f = self.session.seal_channel(channel, data)?;
        self.session.note_sent(self.clock.now());
        f.write_to(&mut self.stream)?;
        Ok(())
    }

    fn await_reply(&mut self) -> Result<HubReply, ServiceError> {
        loop {
            let f = Frame::read_from(&mut self.reader)?;
            if f.msg_type != MsgType::Data {
                self.session.open_at(&f, self.clock.now())?;
                continue;
            }
            let pt = self.session.open_at(&f, self.clock.now())?;
            let (channel, body) = split_channel(&pt)?;
            if channel == Channel::Control {
                return serde_json::from_slice(body).map_err(|e| ServiceError::Protocol(e.to_string()));
            }
        }
    }

    pub fn request(&mut self, req: &AgentRequest) -> Result<HubReply, ServiceError> {
        let bytes = serde_json::to_vec(req).map_err(|e| ServiceError::Protocol(e.to_string()))?;
        self.send(Channel::Control, &bytes)?;
        self.await_reply()
    }

    pub fn send_chunk(&mut self, chunk: &Chunk) -> Result<HubReply, ServiceError> {
        self.send(Channel::TraceChunks, &chunk.encode())?;
        self.await_reply()
    }

    pub fn send_log(&mut self, line: &[u8]) -> Result<(), ServiceError> {
        self.send(Channel::Logs, line)
    }

    pub fn keepalive(&mut self) -> Result<(), ServiceError> {
        let f = self.session.keepalive(self.clock.now())?;
        f.write_to(&mut self.stream)?;
        Ok(())
    }

    /// Sends a raw frame; tests use this to probe hub policy.
    pub fn send_raw(&mut self, frame: &Frame) -> Result<(), ServiceError> {
        frame.write_to(&mut self.stream)?;
        Ok(())
    }

    pub fn session_mut(&mut self) -> &mut Session {
        &mut self.session
    }

    pub fn close(mut self) -> Result<(), ServiceError> {
        let f = self.session.close()?;
        f.write_to(&mut self.stream)?;
        Ok(())
    }
}

/// The hub's trace lake seen through an agent's overlay session.
pub struct RemoteLake<'a> {
    pub client: &'a mut OverlayClient,
}

fn unreachable(e: ServiceError) -> LakeError {
    LakeError::Unreachable(e.to_string())
}

fn expect_lake<T>(r: Result<HubReply, ServiceError>, f: impl FnOnce(HubReply) -> Option<T>) -> Result<T, LakeError> {
    match r.map_err(unreachable)? {
        HubReply::LakeFailed { error } => Err(error),
        HubReply::Error { kind, message } => Err(LakeError::Io(format!("{kind}: {message}"))),
        other => f(other).ok_or_else(|| LakeError::Io("unexpected reply".into())),
    }
}

impl Lake for RemoteLake<'_> {
    fn stat(&mut self, _sensor: &str, hour: HourBucket) -> Result<LakeStat, LakeError> {
        let r = self.client.request(&AgentRequest::LakeStat { hour: hour.label() });
        expect_lake(r, |rep| match rep {
            HubReply::LakeStat { stat } => Some(stat),
            _ => None,
        })
    }

    fn put_chunk(&mut self, _sensor: &str, hour: HourBucket, offset: u64, data: &[u8]) -> Result<u64, LakeError> {
        let chunk = Chunk {
            name: hour.label(),
            offset,
            total: offset + data.len() as u64,
            last: false,
            data: data.to_vec(),
        };
        let r = self.client.send_chunk(&chunk);
        expect_lake(r, |rep| match rep {
            HubReply::ChunkAck { len } => Some(len),
            _ => None,
        })
    }

    fn commit(&mut self, _sensor: &str, hour: HourBucket, meta: &TraceFileMeta) -> Result<(), LakeError> {
        let r = self.client.request(&AgentRequest::LakeCommit {
            hour: hour.label(),
            meta: meta.clone(),
        });
        expect_lake(r, |rep| matches!(rep, HubReply::Committed).then_some(()))
    }

    fn verify(&mut self, _sensor: &str, hour: HourBucket, hash: &str) -> Result<bool, LakeError> {
        let r = self.client.request(&AgentRequest::LakeVerify {
            hour: hour.label(),
            hash: hash.to_string(),
        });
        expect_lake(r, |rep| match rep {
            HubReply::Verified { ok } => Some(ok),
            _ => None,
        })
    }
}

/// Module instances running on one sensor.
#[derive(Debug, Clone, Default)]
pub struct Supervisor {
    instances: BTreeMap<String, (InstanceReport, ModuleSpec)>,
}

impl Supervisor {
    pub fn report(&self) -> Vec<InstanceReport> {
        self.instances.values().map(|(r, _)| r.clone()).collect()
    }

    pub fn status(&self, id: &str) -> Option<InstanceStatus> {
        self.instances.get(id).map(|(r, _)| r.status)
    }

    /// Marks an instance as crashed.
    pub fn crash(&mut self, id: &str) -> bool {
        match self.instances.get_mut(id) {
            Some((r, _)) if r.status == InstanceStatus::Running => {
                r.status = InstanceStatus::Crashed;
                true
            }
            _ => false,
        }
    }

    /// Applies reconciliation actions; returns whether anything changed.
    pub fn apply(&mut self, ack: &HeartbeatAck) -> bool {
        let mut changed = false;
        for a in &ack.actions {
            match a {
                Action::Start { module, version, instance_id, .. } => {
                    let Some(spec) = ack.specs.iter().find(|s| s.name == *module && s.version == *version) else {
                        continue;
                    };
                    let report = InstanceReport {
                        instance_id: instance_id.clone(),
                        module: module.clone(),
                        version: version.clone(),
                        status: InstanceStatus::Running,
                    };
                    self.instances.insert(instance_id.clone(), (report, spec.clone()));
                    changed = true;
                }
                Action::Restart { instance_id, .. } => {
                    if let Some((r, _)) = self.instances.get_mut(instance_id) {
                        r.status = InstanceStatus::Running;
                        changed = true;
                    }
                }
                Action::Stop { instance_id, .. } => {
                    changed |= self.instances.remove(instance_id).is_some();
                }
            }
        }
        changed
    }

    pub fn running(&self) -> Vec<(String, &ModuleSpec)> {
        self.instances
            .values()
            .filter(|(r, _)| r.status == InstanceStatus::Running)
            .map(|(r, s)| (r.instance_id.clone(), s))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub data_dir: PathBuf,
    /// Overrides the hub address stored at onboarding.
    pub hub_addr: Option<String>,
    pub bootstrap: Option<String>,
    pub descriptor: Option<SensorDescriptor>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepReport {
    pub actions: Vec<Action>,
    pub sealed: usize,
    pub sync: Option<SyncReport>,
    pub logs_sent: usize,
}

pub struct Agent {
    data_dir: PathBuf,
    tunnel: TunnelConfig,
    descriptor: SensorDescriptor,
    client: OverlayClient,
    supervisor: Supervisor,
    path: SensorPath,
    syncer: Option<Syncer>,
    isn_seed: [u8; 32],
    clock: Arc<dyn Clock>,
}

impl Agent {
    /// Onboards with a bootstrap token on first start, then reconnects with
    /// the stored tunnel config.
    pub fn start(opts: AgentOptions, clock: Arc<dyn Clock>) -> Result<Agent, ServiceError> {
        fs::create_dir_all(&opts.data_dir)?;
        let keys = load_or_create_key(&opts.data_dir.join(AGENT_KEY_FILE))?;
        let tunnel_path = opts.data_dir.join(TUNNEL_FILE);
        let desc_path = opts.data_dir.join(DESCRIPTOR_FILE);
        let (client, tunnel, descriptor) = if tunnel_path.exists() {
            let tunnel: TunnelConfig = read_json(&tunnel_path)?;
            let descriptor: SensorDescriptor = read_json(&desc_path)?;
            let hub_public = decode_key(&tunnel.hub_public_key)?;
            let addr = opts.hub_addr.clone().unwrap_or_else(|| tunnel.hub_address.clone());
            let (client, _) = OverlayClient::connect(&addr, &tunnel.sensor_id, &keys, hub_public, &[], clock.clone())?;
            (client, tunnel, descriptor)
        } else {
            let token = opts
                .bootstrap
                .clone()
                .ok_or_else(|| ServiceError::Protocol("not onboarded yet: a bootstrap token is required".into()))?;
            let descriptor = opts
                .descriptor
                .clone()
                .ok_or_else(|| ServiceError::Protocol("not onboarded yet: a sensor descriptor is required".into()))?;
            let addr = opts
                .hub_addr
                .clone()
                .ok_or_else(|| ServiceError::Protocol("hub address required for onboarding".into()))?;
            let (_, hub_public) = parse_token(&token)?;
            let payload = serde_json::to_vec(&BootstrapRequest {
                token,
                descriptor: descriptor.clone(),
            })
            .map_err(|e| ServiceError::Protocol(e.to_string()))?;
            let (client, reply) = OverlayClient::connect(&addr, &descriptor.sensor_id, &keys, hub_public, &payload, clock.clone())?;
            let mut tunnel: TunnelConfig =
                serde_json::from_slice(&reply).map_err(|e| ServiceError::Protocol(format!("tunnel config: {e}")))?;
            tunnel.hub_address = addr;
            write_json(&tunnel_path, &tunnel)?;
            write_json(&desc_path, &descriptor)?;
            (client, tunnel, descriptor)
        };
        let isn_seed: [u8; 32] = Sha256::new()
            .chain_update(keys.secret_bytes())
            .chain_update(b"isn")
            .finalize()
            .into();
        let path = SensorPath::new(&descriptor.sensor_id, descriptor.address_ranges.clone());
        Ok(Agent {
            data_dir: opts.data_dir,
            tunnel,
            descriptor,
            client,
            supervisor: Supervisor::default(),
            path,
            syncer: None,
            isn_seed,
            clock,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.descriptor.sensor_id
    }

    pub fn tunnel(&self) -> &TunnelConfig {
        &self.tunnel
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.supervisor
    }

    pub fn supervisor_mut(&mut self) -> &mut Supervisor {
        &mut self.supervisor
    }

    /// Simulates the failure of one module instance: it stops and is
    /// reported as crashed until the controller restarts it.
    pub fn crash_instance(&mut self, id: &str) -> Result<bool, ServiceError> {
        if !self.supervisor.crash(id) {
            return Ok(false);
        }
        self.reconfigure()?;
        Ok(true)
    }

    pub fn path(&self) -> &SensorPath {
        &self.path
    }

    pub fn path_mut(&mut self) -> &mut SensorPath {
        &mut self.path
    }

    pub fn client_mut(&mut self) -> &mut OverlayClient {
        &mut self.client
    }

    pub fn rules_dir(&self) -> PathBuf {
        self.data_dir.join("rules")
    }

    pub fn spool_dir(&self) -> PathBuf {
        self.data_dir.join("spool")
    }

    fn reconfigure(&mut self) -> Result<(), ServiceError> {
        let running = self.supervisor.running();
        let setup = apply_modules(&mut self.path, &self.descriptor, &running, self.isn_seed)?;
        write_rules_file(&self.rules_dir(), &self.descriptor.sensor_id, &self.path.program(), &EmitOptions::default())
            .map_err(|e| ServiceError::Protocol(e.to_string()))?;
        if setup.collector {
            let sink = self.path.take_sink();
            let mut writer = match sink {
                Some(s) => {
                    drop(s);
                    TraceWriter::open(&self.spool_dir(), &self.descriptor.sensor_id, setup.quota_bytes)?
                }
                None => TraceWriter::open(&self.spool_dir(), &self.descriptor.sensor_id, setup.quota_bytes)?,
            };
            writer.set_active_modules(setup.manifest);
            self.path.set_sink(Box::new(writer));
            let policy = setup.sync.unwrap_or_default();
            match self.syncer.as_mut() {
                Some(s) => s.policy = policy,
                None => self.syncer = Some(Syncer::new(policy)),
            }
        } else {
            if let Some(mut s) = self.path.take_sink() {
                s.close()?;
            }
            self.syncer = None;
        }
        Ok(())
    }

    /// One heartbeat round: report, apply actions, rotate, sync, ship logs.
    pub fn step(&mut self) -> Result<StepReport, ServiceError> {
        let mut report = StepReport::default();
        let reply = self.client.request(&AgentRequest::Heartbeat {
            instances: self.supervisor.report(),
        })?;
        let ack = match reply {
            HubReply::HeartbeatAck { ack } => ack,
            HubReply::Error { kind, message } => return Err(ServiceError::Remote { kind, message }),
            other => return Err(ServiceError::Protocol(format!("unexpected reply {other:?}"))),
        };
        if self.supervisor.apply(&ack) {
            self.reconfigure()?;
        }
        report.actions = ack.actions;
        let now = self.clock.now();
        report.sealed = self.path.tick(now)?.len();
        for rec in self.path.take_connections() {
            self.client.send_log(rec.to_json_line().as_bytes())?;
            report.logs_sent += 1;
        }
        if let Some(syncer) = self.syncer.as_mut() {
            if syncer.policy.enabled {
                let spool = self.data_dir.join("spool");
                let mut lake = RemoteLake { client: &mut self.client };
                report.sync = syncer.tick(&spool, &mut lake, &*self.clock);
            }
        }
        Ok(report)
    }

    /// Runs heartbeat rounds until `stop` is set.
    pub fn run(&mut self, stop: &AtomicBool) -> Result<(), ServiceError> {
        let interval = self.tunnel.heartbeat_secs.max(1) * MICROS_PER_SEC;
        while !stop.load(Ordering::SeqCst) {
            let r = self.step()?;
            if !r.actions.is_empty() {
                log::info!("applied {} actions", r.actions.len());
            }
            let mut waited = 0;
            while waited < interval && !stop.load(Ordering::SeqCst) {
                let slice = (interval - waited).min(200_000);
                self.clock.sleep_micros(slice);
                waited += slice;
            }
        }
        let now = self.clock.now();
        self.path.finish(now)?;
        Ok(())
    }
}

fn decode_key(h: &str) -> Result<[u8; 32], ServiceError> {
    hex::decode(h)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| ServiceError::Protocol("bad hub public key".into()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    let f = File::open(path)?;
    serde_json::from_reader(f).map_err(|e| ServiceError::Protocol(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), ServiceError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| ServiceError::Protocol(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}
