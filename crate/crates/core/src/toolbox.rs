//! Traffic steering and egress control for the sensor packet path.
//!
//! Rules are compiled into an immutable [`RuleProgram`] evaluated first-match
//! in priority order. Programs are published through a [`ProgramSlot`] so the
//! packet path always sees one whole generation. [`TokenBucket`] implements
//! the egress limiter with exact integer arithmetic, and [`emit_iptables`]
//! renders a program as an iptables-save fragment using private chains.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{AddressRange, PortRange};
use crate::packet::{Packet, PacketRecord, Proto, TcpFlags};
use crate::time::{Timestamp, MICROS_PER_SEC};

pub const DEFAULT_CHAIN_PREFIX: &str = "HOLO";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolboxError {
    #[error("duplicate rule priority {0}")]
    DuplicatePriority(u32),
    #[error("rule {0} has no match fields")]
    EmptyMatch(u32),
    #[error("rule {priority} references unknown limiter `{limiter}`")]
    UnknownLimiter { priority: u32, limiter: String },
    #[error("invalid limiter `{0}`: {1}")]
    InvalidLimiter(String, &'static str),
    #[error("rule {priority} is not representable in iptables: {reason}")]
    UnrepresentableRule { priority: u32, reason: String },
    #[error("cannot parse rules line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Inbound,
    Outbound,
}

/// `(flags & mask) == set`, as iptables `--tcp-flags MASK COMP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlagMatch {
    pub mask: TcpFlags,
    pub set: TcpFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_range: Option<AddressRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_range: Option<AddressRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<Proto>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ports: Option<PortRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ports: Option<PortRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcp_flags: Option<FlagMatch>,
}

impl RuleMatch {
    pub fn is_empty(&self) -> bool {
        self.src_range.is_none()
            && self.dst_range.is_none()
            && self.proto.is_none()
            && self.src_ports.is_none()
            && self.dst_ports.is_none()
            && self.tcp_flags.is_none()
    }

    pub fn matches<H: Headers + ?Sized>(&self, h: &H) -> bool {
        if let Some(r) = &self.src_range {
            if !r.contains(h.src_ip()) {
                return false;
            }
        }
        if let Some(r) = &self.dst_range {
            if !r.contains(h.dst_ip()) {
                return false;
            }
        }
        if let Some(p) = self.proto {
            if p != h.proto() {
                return false;
            }
        }
        if self.src_ports.is_some() || self.dst_ports.is_some() {
            if !h.proto().has_ports() {
                return false;
            }
            if let Some(r) = self.src_ports {
                if !r.contains(h.src_port()) {
                    return false;
                }
            }
            if let Some(r) = self.dst_ports {
                if !r.contains(h.dst_port()) {
                    return false;
                }
            }
        }
        if let Some(f) = self.tcp_flags {
            if h.proto() != Proto::Tcp || h.tcp_flags().0 & f.mask.0 != f.set.0 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Drop,
    Accept,
    SteerToBackend(String),
    RateLimit(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SteeringRule {
    pub priority: u32,
    pub direction: Direction,
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    pub action: Action,
}

/// Header accessors shared by [`Packet`] and [`PacketRecord`].
pub trait Headers {
    fn src_ip(&self) -> Ipv4Addr;
    fn dst_ip(&self) -> Ipv4Addr;
    fn proto(&self) -> Proto;
    fn src_port(&self) -> u16;
    fn dst_port(&self) -> u16;
    fn tcp_flags(&self) -> TcpFlags;
    fn wire_len(&self) -> u64;
}

macro_rules! impl_headers {
    ($t:ty, $len:expr) => {
        impl Headers for $t {
            fn src_ip(&self) -> Ipv4Addr {
                self.src_ip
            }
            fn dst_ip(&self) -> Ipv4Addr {
                self.dst_ip
            }
            fn proto(&self) -> Proto {
                self.proto
            }
            fn src_port(&self) -> u16 {
                self.src_port
            }
            fn dst_port(&self) -> u16 {
                self.dst_port
            }
            fn tcp_flags(&self) -> TcpFlags {
                self.tcp_flags
            }
            fn wire_len(&self) -> u64 {
                let f: fn(&$t) -> u64 = $len;
                f(self)
            }
        }
    };
}

impl_headers!(Packet, |p| 40 + p.payload.len() as u64);
impl_headers!(PacketRecord, |p| 40 + u64::from(p.payload_len));

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitUnit {
    #[default]
    Packets,
    Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LimiterSpec {
    pub id: String,
    /// Tokens per second.
    pub rate: u64,
    pub burst: u64,
    #[serde(default)]
    pub unit: LimitUnit,
}

impl LimiterSpec {
    pub fn packets(id: impl Into<String>, rate: u64, burst: u64) -> Self {
        LimiterSpec {
            id: id.into(),
            rate,
            burst,
            unit: LimitUnit::Packets,
        }
    }

    fn validate(&self) -> Result<(), ToolboxError> {
        if self.id.is_empty()
            || self.id.len() > 16
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(ToolboxError::InvalidLimiter(
                self.id.clone(),
                "id must be 1-16 characters of [A-Za-z0-9_-]",
            ));
        }
        if self.rate == 0 || self.burst == 0 {
            return Err(ToolboxError::InvalidLimiter(self.id.clone(), "rate and burst must be positive"));
        }
        Ok(())
    }
}

/// Compiled, immutable rule program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleProgram {
    rules: Vec<SteeringRule>,
    limiters: BTreeMap<String, LimiterSpec>,
    default_action: Action,
    generation: u64,
}

impl Default for RuleProgram {
    fn default() -> Self {
        RuleProgram {
            rules: Vec::new(),
            limiters: BTreeMap::new(),
            default_action: Action::Accept,
            generation: 0,
        }
    }
}

impl RuleProgram {
    pub fn rules(&self) -> &[SteeringRule] {
        &self.rules
    }

    pub fn limiters(&self) -> &BTreeMap<String, LimiterSpec> {
        &self.limiters
    }

    pub fn default_action(&self) -> &Action {
        &self.default_action
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

/// Validates and priority-sorts `rules`.
pub fn compile(
    mut rules: Vec<SteeringRule>,
    limiters: Vec<LimiterSpec>,
) -> Result<RuleProgram, ToolboxError> {
    let mut seen = BTreeSet::new();
    for r in &rules {
        if !seen.insert(r.priority) {
            return Err(ToolboxError::DuplicatePriority(r.priority));
        }
        if r.matcher.is_empty() {
            return Err(ToolboxError::EmptyMatch(r.priority));
        }
    }
    let mut by_id = BTreeMap::new();
    for l in limiters {
        l.validate()?;
        by_id.insert(l.id.clone(), l);
    }
    for r in &rules {
        if let Action::RateLimit(id) = &r.action {
            if !by_id.contains_key(id) {
                return Err(ToolboxError::UnknownLimiter {
                    priority: r.priority,
                    limiter: id.clone(),
                });
            }
        }
    }
    for r in &mut rules {
        if r.matcher.tcp_flags.is_some() && r.matcher.proto.is_none() {
            r.matcher.proto = Some(Proto::Tcp);
        }
    }
    rules.sort_by_key(|r| r.priority);
    Ok(RuleProgram {
        rules,
        limiters: by_id,
        default_action: Action::Accept,
        generation: 0,
    })
}

/// Action of the first rule matching `pkt` in `direction`, or the default.
pub fn evaluate<'p, H: Headers + ?Sized>(
    program: &'p RuleProgram,
    pkt: &H,
    direction: Direction,
) -> &'p Action {
    program
        .rules
        .iter()
        .find(|r| r.direction == direction && r.matcher.matches(pkt))
        .map(|r| &r.action)
        .unwrap_or(&program.default_action)
}

/// Holder publishing programs atomically; readers take whole snapshots.
#[derive(Debug, Default)]
pub struct ProgramSlot {
    current: RwLock<Arc<RuleProgram>>,
}

impl ProgramSlot {
    pub fn new(program: RuleProgram) -> Self {
        ProgramSlot {
            current: RwLock::new(Arc::new(program)),
        }
    }

    pub fn snapshot(&self) -> Arc<RuleProgram> {
        self.current.read().expect("program slot poisoned").clone()
    }

    /// Replaces the program, assigning the next generation number.
    pub fn publish(&self, mut program: RuleProgram) -> u64 {
        let mut guard = self.current.write().expect("program slot poisoned");
        program.generation = guard.generation + 1;
        let generation = program.generation;
        *guard = Arc::new(program);
        generation
    }
}

const MICRO_TOKENS: u128 = MICROS_PER_SEC as u128;

/// Token bucket with deterministic integer refill.
///
/// The level is held in millionths of a token so that refill over any number
/// of microseconds is exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBucket {
    rate: u64,
    burst: u64,
    level: u128,
    last_refill: Option<Timestamp>,
}

impl TokenBucket {
    /// A full bucket.
    pub fn new(rate: u64, burst: u64) -> Self {
        TokenBucket {
            rate,
            burst,
            level: u128::from(burst) * MICRO_TOKENS,
            last_refill: None,
        }
    }

    pub fn from_spec(spec: &LimiterSpec) -> Self {
        Self::new(spec.rate, spec.burst)
    }

    pub fn rate(&self) -> u64 {
        self.rate
    }

    pub fn burst(&self) -> u64 {
        self.burst
    }

    /// Whole tokens currently available.
    pub fn tokens(&self) -> u64 {
        (self.level / MICRO_TOKENS) as u64
    }

    fn refill(&mut self, now: Timestamp) {
        let cap = u128::from(self.burst) * MICRO_TOKENS;
        match self.last_refill {
            Some(last) if now <= last => {}
            Some(last) => {
                let elapsed = u128::from(now.since(last));
                self.level = (self.level + elapsed * u128::from(self.rate)).min(cap);
                self.last_refill = Some(now);
            }
            None => self.last_refill = Some(now),
        }
    }

    /// Grants up to `n` tokens at `now`.
    pub fn allow(&mut self, now: Timestamp, n: u64) -> u64 {
        self.refill(now);
        let granted = self.tokens().min(n);
        self.level -= u128::from(granted) * MICRO_TOKENS;
        granted
    }
}

#[derive(Debug, Clone)]
pub struct EmitOptions {
    pub chain_prefix: String,
    /// Local redirect port per backend id.
    pub backend_ports: BTreeMap<String, u16>,
    /// Fail on rules that cannot be expressed instead of emitting placeholders.
    pub strict: bool,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            chain_prefix: DEFAULT_CHAIN_PREFIX.into(),
            backend_ports: BTreeMap::new(),
            strict: false,
        }
    }
}

const STEER_COMMENT: &str = "steer:";

/// Renders `program` as an iptables-save fragment.
///
/// Output is byte-identical for identical programs and options.
pub fn emit_iptables(program: &RuleProgram, opts: &EmitOptions) -> Result<String, ToolboxError> {
    let p = &opts.chain_prefix;
    let chain_in = format!("{p}-IN");
    let chain_out = format!("{p}-OUT");
    let mut out = String::new();
    out.push_str("*filter\n");
    let _ = writeln!(out, ":{chain_in} - [0:0]");
    let _ = writeln!(out, ":{chain_out} - [0:0]");
    for id in program.limiters.keys() {
        let _ = writeln!(out, ":{p}-RL-{id} - [0:0]");
    }
    let _ = writeln!(out, "-A INPUT -j {chain_in}");
    let _ = writeln!(out, "-A OUTPUT -j {chain_out}");

    let mut nat_lines = Vec::new();
    for rule in &program.rules {
        let chain = match rule.direction {
            Direction::Inbound => &chain_in,
            Direction::Outbound => &chain_out,
        };
        let m = render_match(rule)?;
        let target = match &rule.action {
            Action::Drop => "-j DROP".to_string(),
            Action::Accept => "-j ACCEPT".to_string(),
            Action::RateLimit(id) => format!("-j {p}-RL-{id}"),
            Action::SteerToBackend(backend) => {
                match (rule.direction, opts.backend_ports.get(backend)) {
                    (Direction::Inbound, Some(port)) => {
                        nat_lines.push(format!("-A {p}-PRE{m} -j REDIRECT --to-ports {port}"));
                    }
                    _ if opts.strict => {
                        return Err(ToolboxError::UnrepresentableRule {
                            priority: rule.priority,
                            reason: format!("no port mapping for backend `{backend}`"),
                        })
                    }
                    _ => {
                        let _ = writeln!(
                            out,
                            "# {p}: REDIRECT placeholder, backend `{backend}` has no port mapping"
                        );
                    }
                }
                format!("-m comment --comment \"{STEER_COMMENT}{backend}\" -j ACCEPT")
            }
        };
        let _ = writeln!(out, "-A {chain}{m} {target}");
    }
    for spec in program.limiters.values() {
        let chain = format!("{p}-RL-{}", spec.id);
        match spec.unit {
            LimitUnit::Packets => {
                let _ = writeln!(
                    out,
                    "-A {chain} -m limit --limit {}/second --limit-burst {} -j ACCEPT",
                    spec.rate, spec.burst
                );
            }
            LimitUnit::Bytes if opts.strict => {
                return Err(ToolboxError::UnrepresentableRule {
                    priority: 0,
                    reason: format!("byte-mode limiter `{}`", spec.id),
                })
            }
            LimitUnit::Bytes => {
                let _ = writeln!(
                    out,
                    "# {p}: byte-mode limiter `{}` ({}B/s, burst {}B) enforced by the agent",
                    spec.id, spec.rate, spec.burst
                );
            }
        }
        let _ = writeln!(out, "-A {chain} -j DROP");
    }
    out.push_str("COMMIT\n");

    if !nat_lines.is_empty() {
        out.push_str("*nat\n");
        let _ = writeln!(out, ":{p}-PRE - [0:0]");
        let _ = writeln!(out, "-A PREROUTING -j {p}-PRE");
        for l in nat_lines {
            out.push_str(&l);
            out.push('\n');
        }
        out.push_str("COMMIT\n");
    }
    Ok(out)
}

fn render_match(rule: &SteeringRule) -> Result<String, ToolboxError> {
    let m = &rule.matcher;
    let mut s = String::new();
    if let Some(r) = &m.src_range {
        let _ = write!(s, " -s {r}");
    }
    if let Some(r) = &m.dst_range {
        let _ = write!(s, " -d {r}");
    }
    let needs_proto = m.src_ports.is_some() || m.dst_ports.is_some() || m.tcp_flags.is_some();
    let proto = match (m.proto, m.tcp_flags) {
        (None, Some(_)) => Some(Proto::Tcp),
        (p, _) => p,
    };
    match proto {
        Some(p) => {
            let _ = write!(s, " -p {p}");
        }
        None if needs_proto => {
            return Err(ToolboxError::UnrepresentableRule {
                priority: rule.priority,
                reason: "port match without protocol".into(),
            })
        }
        None => {}
    }
    if needs_proto {
        match proto {
            Some(Proto::Tcp) => s.push_str(" -m tcp"),
            Some(Proto::Udp) if m.tcp_flags.is_none() => s.push_str(" -m udp"),
            _ => {
                return Err(ToolboxError::UnrepresentableRule {
                    priority: rule.priority,
                    reason: "port or flag match on a portless protocol".into(),
                })
            }
        }
    }
    let ports = |r: PortRange| {
        if r.start == r.end {
            r.start.to_string()
        } else {
            format!("{}:{}", r.start, r.end)
        }
    };
    if let Some(r) = m.src_ports {
        let _ = write!(s, " --sport {}", ports(r));
    }
    if let Some(r) = m.dst_ports {
        let _ = write!(s, " --dport {}", ports(r));
    }
    if let Some(f) = m.tcp_flags {
        let _ = write!(s, " --tcp-flags {} {}", flag_names(f.mask), flag_names(f.set));
    }
    Ok(s)
}

fn flag_names(f: TcpFlags) -> String {
    f.to_string()
}

fn parse_flag_names(s: &str) -> Option<TcpFlags> {
    if s == "NONE" {
        return Some(TcpFlags(0));
    }
    let mut bits = 0u8;
    for name in s.split(',') {
        let (_, b) = TcpFlags::NAMES.iter().find(|(n, _)| *n == name)?;
        bits |= b;
    }
    Some(TcpFlags(bits))
}

/// Rules and limiters recovered from an emitted fragment.
///
/// Priorities are not part of the text; parsed rules are numbered 10, 20, ...
/// in emission order.
/// Writes the emitted program to `<dir>/<sensor>/holo-rules-<generation>.v4`.
pub fn write_rules_file(dir: &std::path::Path, sensor: &str, program: &RuleProgram, opts: &EmitOptions) -> Result<std::path::PathBuf, ToolboxError> {
    let text = emit_iptables(program, opts)?;
    let sensor_dir = dir.join(sensor);
    std::fs::create_dir_all(&sensor_dir).map_err(|e| ToolboxError::Io(e.to_string()))?;
    let path = sensor_dir.join(format!("holo-rules-{}.v4", program.generation()));
    let tmp = path.with_extension("v4.tmp");
    std::fs::write(&tmp, text).map_err(|e| ToolboxError::Io(e.to_string()))?;
    std::fs::rename(&tmp, &path).map_err(|e| ToolboxError::Io(e.to_string()))?;
    Ok(path)
}

pub fn parse_iptables(text: &str, chain_prefix: &str) -> Result<RuleProgram, ToolboxError> {
    let chain_in = format!("-A {chain_prefix}-IN ");
    let chain_out = format!("-A {chain_prefix}-OUT ");
    let rl_prefix = format!("-A {chain_prefix}-RL-");
    let mut rules = Vec::new();
    let mut limiters: BTreeMap<String, LimiterSpec> = BTreeMap::new();
    let mut table = "";
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let err = |reason: &str| ToolboxError::Parse {
            line: lineno,
            reason: reason.to_string(),
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(':') || line == "COMMIT" {
            continue;
        }
        if let Some(t) = line.strip_prefix('*') {
            table = if t == "filter" { "filter" } else { "other" };
            continue;
        }
        if table != "filter" {
            continue;
        }
        let (direction, rest) = if let Some(rest) = line.strip_prefix(&chain_in) {
            (Direction::Inbound, rest)
        } else if let Some(rest) = line.strip_prefix(&chain_out) {
            (Direction::Outbound, rest)
        } else if let Some(rest) = line.strip_prefix(&rl_prefix) {
            let (id, body) = rest.split_once(' ').ok_or_else(|| err("bad limiter line"))?;
            let toks = tokenize(body).map_err(|r| err(&r))?;
            if toks.iter().any(|t| t == "limit") {
                let rate = value_after(&toks, "--limit")
                    .and_then(|v| v.strip_suffix("/second"))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err("bad --limit"))?;
                let burst = value_after(&toks, "--limit-burst")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err("bad --limit-burst"))?;
                limiters.insert(id.to_string(), LimiterSpec::packets(id, rate, burst));
            }
            continue;
        } else {
            continue;
        };
        let toks = tokenize(rest).map_err(|r| err(&r))?;
        let mut m = RuleMatch::default();
        let mut action = None;
        let mut steer = None;
        let mut i = 0;
        while i < toks.len() {
            let next = |i: usize| toks.get(i + 1).cloned().ok_or_else(|| err("missing value"));
            match toks[i].as_str() {
                "-s" => m.src_range = Some(next(i)?.parse().map_err(|_| err("bad -s"))?),
                "-d" => m.dst_range = Some(next(i)?.parse().map_err(|_| err("bad -d"))?),
                "-p" => {
                    let v = next(i)?;
                    m.proto = Some(match v.as_str() {
                        "tcp" => Proto::Tcp,
                        "udp" => Proto::Udp,
                        "icmp" => Proto::Icmp,
                        n => Proto::from(n.parse::<u8>().map_err(|_| err("bad -p"))?),
                    });
                }
                "-m" => {}
                "--sport" => m.src_ports = Some(next(i)?.parse().map_err(|_| err("bad --sport"))?),
                "--dport" => m.dst_ports = Some(next(i)?.parse().map_err(|_| err("bad --dport"))?),
                "--tcp-flags" => {
                    let mask = parse_flag_names(&next(i)?).ok_or_else(|| err("bad flag mask"))?;
                    let set = toks
                        .get(i + 2)
                        .and_then(|s| parse_flag_names(s))
                        .ok_or_else(|| err("bad flag set"))?;
                    m.tcp_flags = Some(FlagMatch { mask, set });
                    i += 3;
                    continue;
                }
                "--comment" => {
                    let c = next(i)?;
                    if let Some(b) = c.strip_prefix(STEER_COMMENT) {
                        steer = Some(b.to_string());
                    }
                }
                "-j" => {
                    let target = next(i)?;
                    let rl = format!("{chain_prefix}-RL-");
                    action = Some(match target.as_str() {
                        "DROP" => Action::Drop,
                        "ACCEPT" => Action::Accept,
                        t if t.starts_with(&rl) => Action::RateLimit(t[rl.len()..].to_string()),
                        _ => return Err(err("unknown target")),
                    });
                }
                other => return Err(err(&format!("unexpected token `{other}`"))),
            }
            i += if toks[i] == "-m" { 2 } else if toks[i].starts_with('-') { 2 } else { 1 };
        }
        let mut action = action.ok_or_else(|| err("missing -j"))?;
        if let Some(b) = steer {
            action = Action::SteerToBackend(b);
        }
        rules.push(SteeringRule {
            priority: 10 * (rules.len() as u32 + 1),
            direction,
            matcher: m,
            action,
        });
    }
    compile(rules, limiters.into_values().collect())
}

fn value_after<'a>(toks: &'a [String], flag: &str) -> Option<&'a str> {
    toks.iter()
        .position(|t| t == flag)
        .and_then(|i| toks.get(i + 1))
        .map(String::as_str)
}

/// Splits on whitespace, honouring double quotes.
fn tokenize(s: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut has_token = false;
    for c in s.chars() {
        match c {
            '"' => {
                in_quotes = !in_quotes;
                has_token = true;
            }
            c if c.is_whitespace() && !in_quotes => {
                if has_token {
                    out.push(std::mem::take(&mut cur));
                    has_token = false;
                }
            }
            c => {
                cur.push(c);
                has_token = true;
            }
        }
    }
    if in_quotes {
        return Err("unterminated quote".into());
    }
    if has_token {
        out.push(cur);
    }
    Ok(out)
}
