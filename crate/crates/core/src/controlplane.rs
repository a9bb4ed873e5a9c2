//! Controller state: sensor registry, single-use onboarding tokens, principals
//! and roles, the module catalog, desired module specs and the reconciler
//! that turns desired and reported state into start/restart/stop actions.
//!
//! Mutations are recorded as events in `state.log` (one canonical JSON
//! document per line) and periodically folded into `state.snapshot`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::{CryptoRng, RngCore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::addr::{self, AddressRange, PortRange};
use crate::collector::SyncPolicy;
use crate::darknet::AttachmentMode;
use crate::responder::BackendRoute;
use crate::time::{Timestamp, MICROS_PER_SEC};
use crate::toolbox::{self, LimiterSpec, SteeringRule};

pub const DEFAULT_HEARTBEAT_SECS: u64 = 10;
pub const MISSED_HEARTBEATS: u64 = 3;
pub const SNAPSHOT_EVERY: u64 = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("sensor {0} is already registered")]
    DuplicateSensorId(String),
    #[error("unknown sensor {0}")]
    UnknownSensor(String),
    #[error("onboarding token expired")]
    TokenExpired,
    #[error("onboarding token already used")]
    TokenReused,
    #[error("onboarding token unknown")]
    TokenUnknown,
    #[error("descriptor does not match token: {0}")]
    DescriptorMismatch(String),
    #[error("validation error: {0}")]
    ValidationError(String),
    #[error("capability denied: {kind:?} not allowed on sensor {sensor}")]
    CapabilityDenied { sensor: String, kind: ModuleKind },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("persistence: {0}")]
    Persistence(String),
}

impl ControlError {
    /// Stable machine-readable name.
    pub fn kind(&self) -> &'static str {
        match self {
            ControlError::Unauthorized(_) => "Unauthorized",
            ControlError::DuplicateSensorId(_) => "DuplicateSensorId",
            ControlError::UnknownSensor(_) => "UnknownSensor",
            ControlError::TokenExpired => "TokenExpired",
            ControlError::TokenReused => "TokenReused",
            ControlError::TokenUnknown => "TokenUnknown",
            ControlError::DescriptorMismatch(_) => "DescriptorMismatch",
            ControlError::ValidationError(_) => "ValidationError",
            ControlError::CapabilityDenied { .. } => "CapabilityDenied",
            ControlError::SchemaError(_) => "SchemaError",
            ControlError::NotFound(_) => "NotFound",
            ControlError::Persistence(_) => "Persistence",
        }
    }
}

impl From<io::Error> for ControlError {
    fn from(e: io::Error) -> Self {
        ControlError::Persistence(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDescriptor {
    pub sensor_id: String,
    pub org: String,
    #[serde(default)]
    pub country: String,
    pub address_ranges: Vec<AddressRange>,
    #[serde(default)]
    pub honeypot_allowed: bool,
    #[serde(default)]
    pub workload_allowed: bool,
    #[serde(default)]
    pub nic_name: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl SensorDescriptor {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.sensor_id.is_empty() || self.sensor_id.len() > 64 {
            return Err(ControlError::ValidationError("sensor_id must be 1 to 64 bytes".into()));
        }
        if !self
            .sensor_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.')
        {
            return Err(ControlError::ValidationError(format!(
                "sensor_id {:?} may only contain letters, digits, '-' and '.'",
                self.sensor_id
            )));
        }
        if let Some((a, b)) = addr::any_overlap(&self.address_ranges) {
            return Err(ControlError::ValidationError(format!("address ranges {a} and {b} overlap")));
        }
        Ok(())
    }

    pub fn owns(&self, r: &AddressRange) -> bool {
        self.address_ranges.iter().any(|own| own.covers(r))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnboardToken {
    #[serde(with = "hex32")]
    pub token: [u8; 32],
    pub sensor_id: String,
    /// Set when an org operator issued the token; the descriptor must match.
    #[serde(default)]
    pub org: Option<String>,
    pub expires_at: Timestamp,
    pub used: bool,
}

mod hex32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// What a freshly onboarded sensor needs to keep talking to the hub.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunnelConfig {
    pub sensor_id: String,
    pub hub_id: String,
    pub hub_address: String,
    pub hub_public_key: String,
    pub heartbeat_secs: u64,
    pub keepalive_secs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    Darknet,
    Responder,
    Toolbox,
    Collector,
    Workload,
}

/// Sensor selection by explicit id or by label equality.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default)]
    pub ids: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl Selector {
    pub fn ids(ids: &[&str]) -> Self {
        Selector {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            labels: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty() && self.labels.is_empty()
    }

    pub fn matches(&self, d: &SensorDescriptor) -> bool {
        if self.ids.iter().any(|id| *id == d.sensor_id) {
            return true;
        }
        !self.labels.is_empty() && self.labels.iter().all(|(k, v)| d.labels.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub module_kind: ModuleKind,
    pub name: String,
    #[serde(default = "empty_params")]
    pub params: serde_json::Value,
    pub target: Selector,
    pub replicas: u32,
    pub version: String,
}

fn empty_params() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarknetParams {
    pub mode: AttachmentMode,
    /// Defaults to the sensor's address ranges.
    #[serde(default)]
    pub ranges: Option<Vec<AddressRange>>,
    #[serde(default)]
    pub sensor_ip: Option<Ipv4Addr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponderParams {
    pub ports: Vec<PortRange>,
    #[serde(default)]
    pub ip_ranges: Option<Vec<AddressRange>>,
    #[serde(default)]
    pub backend_map: Vec<BackendRoute>,
    #[serde(default)]
    pub max_capture_bytes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolboxParams {
    #[serde(default)]
    pub rules: Vec<SteeringRule>,
    #[serde(default)]
    pub limiters: Vec<LimiterSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectorParams {
    #[serde(default)]
    pub sync: Option<SyncPolicy>,
    #[serde(default)]
    pub quota_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadParams {
    pub behavior: String,
    #[serde(default)]
    pub args: serde_json::Value,
}

fn parse_params<T: DeserializeOwned>(v: &serde_json::Value) -> Result<T, ControlError> {
    serde_json::from_value(v.clone()).map_err(|e| ControlError::SchemaError(e.to_string()))
}

/// Params decoded per module kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModuleParams {
    Darknet(DarknetParams),
    Responder(ResponderParams),
    Toolbox(ToolboxParams),
    Collector(CollectorParams),
    Workload(WorkloadParams),
}

impl ModuleSpec {
    pub fn parsed_params(&self) -> Result<ModuleParams, ControlError> {
        Ok(match self.module_kind {
            ModuleKind::Darknet => ModuleParams::Darknet(parse_params(&self.params)?),
            ModuleKind::Responder => ModuleParams::Responder(parse_params(&self.params)?),
            ModuleKind::Toolbox => ModuleParams::Toolbox(parse_params(&self.params)?),
            ModuleKind::Collector => ModuleParams::Collector(parse_params(&self.params)?),
            ModuleKind::Workload => ModuleParams::Workload(parse_params(&self.params)?),
        })
    }

    /// Structural checks independent of the registry.
    pub fn validate(&self) -> Result<ModuleParams, ControlError> {
        if self.name.is_empty() || self.name.len() > 48 || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(ControlError::SchemaError("name must be 1 to 48 letters, digits or '-'".into()));
        }
        if self.version.is_empty() {
            return Err(ControlError::SchemaError("version must not be empty".into()));
        }
        if self.replicas < 1 {
            return Err(ControlError::SchemaError("replicas must be at least 1".into()));
        }
        if self.target.is_empty() {
            return Err(ControlError::SchemaError("target selects no sensors".into()));
        }
        let params = self.parsed_params()?;
        match &params {
            ModuleParams::Responder(p) if p.ports.is_empty() => {
                return Err(ControlError::SchemaError("responder ports must not be empty".into()))
            }
            ModuleParams::Toolbox(p) => {
                toolbox::compile(p.rules.clone(), p.limiters.clone()).map_err(|e| ControlError::SchemaError(e.to_string()))?;
            }
            ModuleParams::Collector(CollectorParams { sync: Some(s), .. }) => {
                s.validate().map_err(|e| ControlError::SchemaError(e.to_string()))?;
            }
            _ => {}
        }
        Ok(params)
    }

    pub fn required_capability(&self) -> Option<fn(&SensorDescriptor) -> bool> {
        match self.module_kind {
            ModuleKind::Responder => Some(|d| d.honeypot_allowed),
            ModuleKind::Workload => Some(|d| d.workload_allowed),
            _ => None,
        }
    }

    pub fn allowed_on(&self, d: &SensorDescriptor) -> bool {
        self.required_capability().map_or(true, |f| f(d))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "org", rename_all = "snake_case")]
pub enum Role {
    Admin,
    OrgOperator(String),
    Reader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub name: String,
    pub role: Role,
}

impl Principal {
    pub fn admin(name: &str) -> Self {
        Principal {
            name: name.into(),
            role: Role::Admin,
        }
    }

    pub fn operator(name: &str, org: &str) -> Self {
        Principal {
            name: name.into(),
            role: Role::OrgOperator(org.into()),
        }
    }

    pub fn reader(name: &str) -> Self {
        Principal {
            name: name.into(),
            role: Role::Reader,
        }
    }

    pub fn may_manage_org(&self, org: &str) -> bool {
        match &self.role {
            Role::Admin => true,
            Role::OrgOperator(o) => o == org,
            Role::Reader => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstanceStatus {
    Pending,
    Running,
    Crashed,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance_id: String,
    pub module: String,
    pub version: String,
    pub status: InstanceStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorReport {
    pub last_heartbeat: Timestamp,
    pub instances: Vec<InstanceReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedState {
    pub sensors: BTreeMap<String, SensorReport>,
}

/// Specs that should run on each sensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesiredState {
    pub sensors: BTreeMap<String, Vec<ModuleSpec>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Stop { sensor: String, instance_id: String },
    Restart { sensor: String, instance_id: String },
    Start { sensor: String, module: String, version: String, instance_id: String },
}

impl Action {
    pub fn sensor(&self) -> &str {
        match self {
            Action::Stop { sensor, .. } | Action::Restart { sensor, .. } | Action::Start { sensor, .. } => sensor,
        }
    }

    pub fn instance_id(&self) -> &str {
        match self {
            Action::Stop { instance_id, .. } | Action::Restart { instance_id, .. } | Action::Start { instance_id, .. } => instance_id,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Action::Stop { .. } => 0,
            Action::Restart { .. } => 1,
            Action::Start { .. } => 2,
        }
    }
}

pub fn instance_id(module: &str, sensor: &str, n: u32) -> String {
    format!("{module}.{sensor}.{n:04}")
}

pub fn is_reachable(last_heartbeat: Timestamp, now: Timestamp, heartbeat_secs: u64) -> bool {
    now.since(last_heartbeat) <= MISSED_HEARTBEATS * heartbeat_secs * MICROS_PER_SEC
}

/// Actions that drive `reported` toward `desired`. Sensors absent from
/// `reported` or silent for more than three heartbeat intervals are left alone.
pub fn reconcile(desired: &DesiredState, reported: &ReportedState, now: Timestamp, heartbeat_secs: u64) -> Vec<Action> {
    let mut actions = Vec::new();
    let empty = Vec::new();
    for (sensor, report) in &reported.sensors {
        if !is_reachable(report.last_heartbeat, now, heartbeat_secs) {
            continue;
        }
        let specs = desired.sensors.get(sensor).unwrap_or(&empty);
        let mut live: Vec<&InstanceReport> = report.instances.iter().filter(|i| i.status != InstanceStatus::Stopped).collect();
        live.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let mut used: BTreeSet<&str> = report.instances.iter().map(|i| i.instance_id.as_str()).collect();
        let mut fresh: Vec<String> = Vec::new();

        for i in &live {
            let keep = specs.iter().any(|s| s.name == i.module && s.version == i.version);
            if !keep {
                actions.push(Action::Stop {
                    sensor: sensor.clone(),
                    instance_id: i.instance_id.clone(),
                });
            }
        }
        for spec in specs {
            let mine: Vec<&&InstanceReport> = live.iter().filter(|i| i.module == spec.name && i.version == spec.version).collect();
            let want = spec.replicas as usize;
            let surplus = mine.len().saturating_sub(want);
            for i in &mine[..surplus] {
                actions.push(Action::Stop {
                    sensor: sensor.clone(),
                    instance_id: i.instance_id.clone(),
                });
            }
            for i in &mine[surplus..] {
                if i.status == InstanceStatus::Crashed {
                    actions.push(Action::Restart {
                        sensor: sensor.clone(),
                        instance_id: i.instance_id.clone(),
                    });
                }
            }
            let mut n = 0u32;
            for _ in mine.len()..want {
                let id = loop {
                    let candidate = instance_id(&spec.name, sensor, n);
                    n += 1;
                    if !used.contains(candidate.as_str()) && !fresh.contains(&candidate) {
                        break candidate;
                    }
                };
                fresh.push(id.clone());
                actions.push(Action::Start {
                    sensor: sensor.clone(),
                    module: spec.name.clone(),
                    version: spec.version.clone(),
                    instance_id: id,
                });
            }
        }
        used.clear();
    }
    actions.sort_by(|a, b| (a.sensor(), a.rank(), a.instance_id()).cmp(&(b.sensor(), b.rank(), b.instance_id())));
    actions
}

/// Applies actions as a faithful agent would.
pub fn apply_actions(reported: &mut ReportedState, actions: &[Action]) {
    for a in actions {
        let Some(rep) = reported.sensors.get_mut(a.sensor()) else { continue };
        match a {
            Action::Start { module, version, instance_id, .. } => {
                match rep.instances.iter_mut().find(|i| i.instance_id == *instance_id) {
                    Some(i) => i.status = InstanceStatus::Running,
                    None => rep.instances.push(InstanceReport {
                        instance_id: instance_id.clone(),
                        module: module.clone(),
                        version: version.clone(),
                        status: InstanceStatus::Running,
                    }),
                }
            }
            Action::Restart { instance_id, .. } => {
                if let Some(i) = rep.instances.iter_mut().find(|i| i.instance_id == *instance_id) {
                    i.status = InstanceStatus::Running;
                }
            }
            Action::Stop { instance_id, .. } => {
                if let Some(i) = rep.instances.iter_mut().find(|i| i.instance_id == *instance_id) {
                    i.status = InstanceStatus::Stopped;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub descriptor: SensorDescriptor,
    #[serde(with = "hex32")]
    pub static_key: [u8; 32],
    pub onboarded_at: Timestamp,
    pub last_heartbeat: Timestamp,
    #[serde(default)]
    pub instances: Vec<InstanceReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalRecord {
    pub principal: Principal,
    /// Hex SHA-256 of the principal's API key.
    pub key_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub version_id: String,
    pub bytes_b64: String,
}

/// Everything the controller persists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerState {
    pub sensors: BTreeMap<String, SensorRecord>,
    pub tokens: BTreeMap<String, OnboardToken>,
    pub specs: BTreeMap<String, ModuleSpec>,
    pub principals: BTreeMap<String, PrincipalRecord>,
    pub catalog: BTreeMap<String, BTreeMap<String, CatalogEntry>>,
    #[serde(default)]
    pub last_seq: u64,
}

/// One logged state transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StateEvent {
    TokenIssued { token: OnboardToken },
    SensorOnboarded { record: SensorRecord, token: String },
    SpecSet { spec: ModuleSpec },
    SpecRemoved { name: String },
    PrincipalAdded { record: PrincipalRecord },
    CatalogPut { entry: CatalogEntry },
}

impl ControllerState {
    fn apply(&mut self, ev: &StateEvent) {
        match ev {
            StateEvent::TokenIssued { token } => {
                self.tokens.insert(hex::encode(token.token), token.clone());
            }
            StateEvent::SensorOnboarded { record, token } => {
                if let Some(t) = self.tokens.get_mut(token) {
                    t.used = true;
                }
                self.sensors.insert(record.descriptor.sensor_id.clone(), record.clone());
            }
            StateEvent::SpecSet { spec } => {
                self.specs.insert(spec.name.clone(), spec.clone());
            }
            StateEvent::SpecRemoved { name } => {
                self.specs.remove(name);
            }
            StateEvent::PrincipalAdded { record } => {
                self.principals.insert(record.principal.name.clone(), record.clone());
            }
            StateEvent::CatalogPut { entry } => {
                self.catalog
                    .entry(entry.name.clone())
                    .or_default()
                    .insert(entry.version_id.clone(), entry.clone());
            }
        }
    }
}

/// Serialises with object keys in sorted order.
pub fn canonical_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("state serialises");
    serde_json::to_string(&value).expect("value serialises")
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    #[serde(flatten)]
    event: StateEvent,
}

/// Append-only event log plus snapshot.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    log: File,
    since_snapshot: u64,
}

impl Store {
    pub fn log_path(dir: &Path) -> PathBuf {
        dir.join("state.log")
    }

    pub fn snapshot_path(dir: &Path) -> PathBuf {
        dir.join("state.snapshot")
    }

    /// Loads the snapshot, replays newer log entries and opens the log.
    pub fn open(dir: &Path) -> Result<(Store, ControllerState), ControlError> {
        fs::create_dir_all(dir)?;
        let mut state = match fs::read_to_string(Self::snapshot_path(dir)) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| ControlError::Persistence(format!("snapshot: {e}")))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => ControllerState::default(),
            Err(e) => return Err(e.into()),
        };
        let mut since = 0;
        let mut valid_len = 0u64;
        if let Ok(f) = File::open(Self::log_path(dir)) {
            for line in BufReader::new(f).split(b'\n') {
                let line = line?;
                // A torn final line from a crash is discarded.
                let Ok(entry) = serde_json::from_slice::<LogLine>(&line) else { break };
                valid_len += line.len() as u64 + 1;
                if entry.seq > state.last_seq {
                    state.apply(&entry.event);
                    state.last_seq = entry.seq;
                    since += 1;
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(Self::log_path(dir))?;
        if log.metadata()?.len() > valid_len {
            log.set_len(valid_len)?;
        }
        Ok((
            Store {
                dir: dir.to_path_buf(),
                log,
                since_snapshot: since,
            },
            state,
        ))
    }

    fn append(&mut self, seq: u64, event: &StateEvent) -> Result<(), ControlError> {
        let mut line = canonical_json(&LogLine { seq, event: event.clone() });
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.sync_data()?;
        self.since_snapshot += 1;
        Ok(())
    }

    pub fn snapshot(&mut self, state: &ControllerState) -> Result<(), ControlError> {
        let path = Self::snapshot_path(&self.dir);
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(canonical_json(state).as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        self.log.set_len(0)?;
        self.log.sync_all()?;
        self.since_snapshot = 0;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesiredDelta {
    pub spec: String,
    pub added: Vec<String>,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatAck {
    pub actions: Vec<Action>,
    /// Specs referenced by start actions.
    pub specs: Vec<ModuleSpec>,
    pub heartbeat_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorStatus {
    pub sensor_id: String,
    pub org: String,
    pub country: String,
    pub address_ranges: Vec<AddressRange>,
    pub honeypot_allowed: bool,
    pub workload_allowed: bool,
    pub reachable: bool,
    pub last_heartbeat: Timestamp,
    pub instances: Vec<InstanceReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecStatus {
    pub name: String,
    pub module_kind: ModuleKind,
    pub version: String,
    pub replicas: u32,
    pub sensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub now: Timestamp,
    pub heartbeat_secs: u64,
    pub sensors: Vec<SensorStatus>,
    pub specs: Vec<SpecStatus>,
    pub pending_actions: Vec<Action>,
}

/// Hub coordinates handed to onboarded sensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubInfo {
    pub hub_id: String,
    pub address: String,
    #[serde(with = "hex32")]
    pub public_key: [u8; 32],
}

pub struct Controller {
    state: ControllerState,
    store: Option<Store>,
    hub: HubInfo,
    pub heartbeat_secs: u64,
}

impl Controller {
    pub fn in_memory(hub: HubInfo) -> Self {
        Controller {
            state: ControllerState::default(),
            store: None,
            hub,
            heartbeat_secs: DEFAULT_HEARTBEAT_SECS,
        }
    }

    /// Opens or recovers persistent state in `dir`. Sensors count as freshly
    /// heard from at `now` so a restart does not mark them unreachable.
    pub fn open(dir: &Path, hub: HubInfo, now: Timestamp) -> Result<Self, ControlError> {
        let (store, mut state) = Store::open(dir)?;
        for rec in state.sensors.values_mut() {
            rec.last_heartbeat = rec.last_heartbeat.max(now);
        }
        Ok(Controller {
            state,
            store: Some(store),
            hub,
            heartbeat_secs: DEFAULT_HEARTBEAT_SECS,
        })
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn hub(&self) -> &HubInfo {
        &self.hub
    }

    fn commit(&mut self, event: StateEvent) -> Result<(), ControlError> {
        let seq = self.state.last_seq + 1;
        if let Some(store) = self.store.as_mut() {
            store.append(seq, &event)?;
        }
        self.state.apply(&event);
        self.state.last_seq = seq;
        if let Some(store) = self.store.as_mut() {
            if store.since_snapshot >= SNAPSHOT_EVERY {
                store.snapshot(&self.state)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&mut self) -> Result<(), ControlError> {
        if let Some(store) = self.store.as_mut() {
            store.snapshot(&self.state)?;
        }
        Ok(())
    }

    /// Creates a principal and returns its fresh API key.
    pub fn add_principal<R: RngCore + CryptoRng>(&mut self, actor: &Principal, new: Principal, rng: &mut R) -> Result<String, ControlError> {
        if actor.role != Role::Admin {
            return Err(ControlError::Unauthorized(format!("{} may not add principals", actor.name)));
        }
        self.insert_principal(new, rng)
    }

    /// First admin on a fresh controller; no-op when principals exist.
    pub fn bootstrap_admin<R: RngCore + CryptoRng>(&mut self, name: &str, rng: &mut R) -> Result<Option<String>, ControlError> {
        if !self.state.principals.is_empty() {
            return Ok(None);
        }
        self.insert_principal(Principal::admin(name), rng).map(Some)
    }

    fn insert_principal<R: RngCore + CryptoRng>(&mut self, new: Principal, rng: &mut R) -> Result<String, ControlError> {
        if new.name.is_empty() {
            return Err(ControlError::ValidationError("principal name must not be empty".into()));
        }
        if self.state.principals.contains_key(&new.name) {
            return Err(ControlError::ValidationError(format!("principal {} exists", new.name)));
        }
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        let key_hex = hex::encode(key);
        let record = PrincipalRecord {
            principal: new,
            key_hash: hex::encode(Sha256::digest(key_hex.as_bytes())),
        };
        self.commit(StateEvent::PrincipalAdded { record })?;
        Ok(key_hex)
    }

    pub fn authenticate(&self, api_key: &str) -> Option<Principal> {
        let h = hex::encode(Sha256::digest(api_key.trim().as_bytes()));
        self.state
            .principals
            .values()
            .find(|p| p.key_hash == h)
            .map(|p| p.principal.clone())
    }

    pub fn issue_token<R: RngCore + CryptoRng>(
        &mut self,
        principal: &Principal,
        sensor_id: &str,
        ttl_secs: u64,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<OnboardToken, ControlError> {
        let org = match &principal.role {
            Role::Admin => None,
            Role::OrgOperator(o) => Some(o.clone()),
            Role::Reader => return Err(ControlError::Unauthorized(format!("{} may not issue tokens", principal.name))),
        };
        if self.state.sensors.contains_key(sensor_id) {
            return Err(ControlError::DuplicateSensorId(sensor_id.to_string()));
        }
        let mut token = [0u8; 32];
        rng.fill_bytes(&mut token);
        let t = OnboardToken {
            token,
            sensor_id: sensor_id.to_string(),
            org,
            expires_at: now.plus_secs(ttl_secs),
            used: false,
        };
        self.commit(StateEvent::TokenIssued { token: t.clone() })?;
        Ok(t)
    }

    pub fn onboard(&mut self, token: &[u8; 32], static_key: [u8; 32], descriptor: SensorDescriptor, now: Timestamp) -> Result<TunnelConfig, ControlError> {
        let key = hex::encode(token);
        let t = self.state.tokens.get(&key).ok_or(ControlError::TokenUnknown)?;
        if t.used {
            return Err(ControlError::TokenReused);
        }
        if now >= t.expires_at {
            return Err(ControlError::TokenExpired);
        }
        if descriptor.sensor_id != t.sensor_id {
            return Err(ControlError::DescriptorMismatch(format!(
                "token is for {}, descriptor names {}",
                t.sensor_id, descriptor.sensor_id
            )));
        }
        if let Some(org) = &t.org {
            if *org != descriptor.org {
                return Err(ControlError::DescriptorMismatch(format!("token is bound to org {org}")));
            }
        }
        descriptor.validate()?;
        if self.state.sensors.contains_key(&descriptor.sensor_id) {
            return Err(ControlError::DuplicateSensorId(descriptor.sensor_id));
        }
        if self.state.sensors.values().any(|s| s.static_key == static_key) {
            return Err(ControlError::ValidationError("static key already registered".into()));
        }
        for other in self.state.sensors.values() {
            for r in &descriptor.address_ranges {
                if let Some(o) = other.descriptor.address_ranges.iter().find(|o| o.overlaps(r)) {
                    return Err(ControlError::ValidationError(format!(
                        "range {r} overlaps {o} of sensor {}",
                        other.descriptor.sensor_id
                    )));
                }
            }
        }
        let record = SensorRecord {
            descriptor: descriptor.clone(),
            static_key,
            onboarded_at: now,
            last_heartbeat: now,
            instances: Vec::new(),
        };
        self.commit(StateEvent::SensorOnboarded { record, token: key })?;
        Ok(TunnelConfig {
            sensor_id: descriptor.sensor_id,
            hub_id: self.hub.hub_id.clone(),
            hub_address: self.hub.address.clone(),
            hub_public_key: hex::encode(self.hub.public_key),
            heartbeat_secs: self.heartbeat_secs,
            keepalive_secs: crate::overlay::KEEPALIVE_SECS,
        })
    }

    pub fn sensor(&self, id: &str) -> Option<&SensorRecord> {
        self.state.sensors.get(id)
    }

    fn targeted(&self, spec: &ModuleSpec) -> Vec<&SensorRecord> {
        self.state
            .sensors
            .values()
            .filter(|r| spec.target.matches(&r.descriptor))
            .collect()
    }

    fn check_ranges(spec: &ModuleSpec, params: &ModuleParams, targets: &[&SensorRecord]) -> Result<(), ControlError> {
        let ranges = match params {
            ModuleParams::Darknet(p) => p.ranges.as_ref(),
            ModuleParams::Responder(p) => p.ip_ranges.as_ref(),
            _ => None,
        };
        if let Some(ranges) = ranges {
            for t in targets {
                if let Some(r) = ranges.iter().find(|r| !t.descriptor.owns(r)) {
                    return Err(ControlError::SchemaError(format!(
                        "{}: range {r} is not owned by sensor {}",
                        spec.name, t.descriptor.sensor_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn set_desired(&mut self, principal: &Principal, spec: ModuleSpec) -> Result<DesiredDelta, ControlError> {
        if principal.role == Role::Reader {
            return Err(ControlError::Unauthorized(format!("{} may not deploy", principal.name)));
        }
        let params = spec.validate()?;
        for id in &spec.target.ids {
            if !self.state.sensors.contains_key(id) {
                return Err(ControlError::UnknownSensor(id.clone()));
            }
        }
        let targets = self.targeted(&spec);
        for t in &targets {
            if !principal.may_manage_org(&t.descriptor.org) {
                return Err(ControlError::Unauthorized(format!(
                    "{} may not deploy to sensor {} of org {}",
                    principal.name, t.descriptor.sensor_id, t.descriptor.org
                )));
            }
            if !spec.allowed_on(&t.descriptor) {
                return Err(ControlError::CapabilityDenied {
                    sensor: t.descriptor.sensor_id.clone(),
                    kind: spec.module_kind,
                });
            }
        }
        if let Some(old) = self.state.specs.get(&spec.name) {
            for t in self.targeted(old) {
                if !principal.may_manage_org(&t.descriptor.org) {
                    return Err(ControlError::Unauthorized(format!(
                        "{} may not replace spec {} that covers sensor {}",
                        principal.name, old.name, t.descriptor.sensor_id
                    )));
                }
            }
        }
        Self::check_ranges(&spec, &params, &targets)?;
        let before: BTreeSet<String> = self.sensors_running(&spec.name);
        let name = spec.name.clone();
        self.commit(StateEvent::SpecSet { spec })?;
        let after = self.sensors_running(&name);
        Ok(DesiredDelta {
            spec: name,
            added: after.difference(&before).cloned().collect(),
            removed: before.difference(&after).cloned().collect(),
        })
    }

    pub fn remove_desired(&mut self, principal: &Principal, name: &str) -> Result<DesiredDelta, ControlError> {
        let spec = self.state.specs.get(name).ok_or_else(|| ControlError::NotFound(name.to_string()))?;
        for t in self.targeted(spec) {
            if !principal.may_manage_org(&t.descriptor.org) {
                return Err(ControlError::Unauthorized(format!("{} may not remove {name}", principal.name)));
            }
        }
        let before = self.sensors_running(name);
        self.commit(StateEvent::SpecRemoved { name: name.to_string() })?;
        Ok(DesiredDelta {
            spec: name.to_string(),
            added: vec![],
            removed: before.into_iter().collect(),
        })
    }

    fn sensors_running(&self, spec: &str) -> BTreeSet<String> {
        self.desired()
            .sensors
            .into_iter()
            .filter(|(_, specs)| specs.iter().any(|s| s.name == spec))
            .map(|(id, _)| id)
            .collect()
    }

    /// Materialises specs onto sensors. Capabilities are checked again here
    /// so label selectors never place a module on a sensor that forbids it.
    pub fn desired(&self) -> DesiredState {
        let mut out = DesiredState::default();
        for rec in self.state.sensors.values() {
            let specs: Vec<ModuleSpec> = self
                .state
                .specs
                .values()
                .filter(|s| s.target.matches(&rec.descriptor) && s.allowed_on(&rec.descriptor))
                .cloned()
                .collect();
            out.sensors.insert(rec.descriptor.sensor_id.clone(), specs);
        }
        out
    }

    pub fn reported(&self) -> ReportedState {
        ReportedState {
            sensors: self
                .state
                .sensors
                .iter()
                .map(|(id, r)| {
                    (
                        id.clone(),
                        SensorReport {
                            last_heartbeat: r.last_heartbeat,
                            instances: r.instances.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn reconcile(&self, now: Timestamp) -> Vec<Action> {
        reconcile(&self.desired(), &self.reported(), now, self.heartbeat_secs)
    }

    /// Records a sensor's report and returns the actions it should apply.
    pub fn heartbeat(&mut self, sensor_id: &str, instances: Vec<InstanceReport>, now: Timestamp) -> Result<HeartbeatAck, ControlError> {
        let rec = self
            .state
            .sensors
            .get_mut(sensor_id)
            .ok_or_else(|| ControlError::UnknownSensor(sensor_id.to_string()))?;
        rec.instances = instances;
        rec.instances.sort();
        rec.last_heartbeat = rec.last_heartbeat.max(now);
        let actions: Vec<Action> = self.reconcile(now).into_iter().filter(|a| a.sensor() == sensor_id).collect();
        let names: BTreeSet<&str> = actions
            .iter()
            .filter_map(|a| match a {
                Action::Start { module, .. } => Some(module.as_str()),
                _ => None,
            })
            .collect();
        let specs = names.iter().filter_map(|n| self.state.specs.get(*n).cloned()).collect();
        Ok(HeartbeatAck {
            actions,
            specs,
            heartbeat_secs: self.heartbeat_secs,
        })
    }

    pub fn status(&self, now: Timestamp) -> StatusReport {
        let desired = self.desired();
        StatusReport {
            now,
            heartbeat_secs: self.heartbeat_secs,
            sensors: self
                .state
                .sensors
                .values()
                .map(|r| SensorStatus {
                    sensor_id: r.descriptor.sensor_id.clone(),
                    org: r.descriptor.org.clone(),
                    country: r.descriptor.country.clone(),
                    address_ranges: r.descriptor.address_ranges.clone(),
                    honeypot_allowed: r.descriptor.honeypot_allowed,
                    workload_allowed: r.descriptor.workload_allowed,
                    reachable: is_reachable(r.last_heartbeat, now, self.heartbeat_secs),
                    last_heartbeat: r.last_heartbeat,
                    instances: r.instances.clone(),
                })
                .collect(),
            specs: self
                .state
                .specs
                .values()
                .map(|s| SpecStatus {
                    name: s.name.clone(),
                    module_kind: s.module_kind,
                    version: s.version.clone(),
                    replicas: s.replicas,
                    sensors: desired
                        .sensors
                        .iter()
                        .filter(|(_, v)| v.iter().any(|x| x.name == s.name))
                        .map(|(k, _)| k.clone())
                        .collect(),
                })
                .collect(),
            pending_actions: self.reconcile(now),
        }
    }

    /// Stores `bytes` under `name`; the version id is their SHA-256.
    pub fn catalog_put(&mut self, principal: &Principal, name: &str, bytes: &[u8]) -> Result<String, ControlError> {
        if principal.role != Role::Admin {
            return Err(ControlError::Unauthorized(format!("{} may not publish modules", principal.name)));
        }
        if name.is_empty() {
            return Err(ControlError::ValidationError("catalog name must not be empty".into()));
        }
        let version_id = hex::encode(Sha256::digest(bytes));
        let exists = self
            .state
            .catalog
            .get(name)
            .is_some_and(|v| v.contains_key(&version_id));
        if !exists {
            self.commit(StateEvent::CatalogPut {
                entry: CatalogEntry {
                    name: name.to_string(),
                    version_id: version_id.clone(),
                    bytes_b64: STANDARD.encode(bytes),
                },
            })?;
        }
        Ok(version_id)
    }

    pub fn catalog_get(&self, name: &str, version: &str) -> Result<Vec<u8>, ControlError> {
        let entry = self
            .state
            .catalog
            .get(name)
            .and_then(|v| v.get(version))
            .ok_or_else(|| ControlError::NotFound(format!("{name}@{version}")))?;
        STANDARD
            .decode(&entry.bytes_b64)
            .map_err(|e| ControlError::Persistence(e.to_string()))
    }
}
