//! Encrypted hub-and-spoke channel between sensors and the hub.
//!
//! A sensor opens a session with one round trip: the init message carries an
//! ephemeral key, the sensor's static key sealed under `DH(e, S_hub)` and a
//! timestamped payload sealed under a key that also mixes `DH(s, S_hub)`. The
//! response mixes `DH(e_r, e_i)` and `DH(e_r, s_i)`, after which both sides
//! split the chaining key into directional transport keys.
//!
//! The hub only ever delivers frames locally; there is no forwarding path.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::time::{Timestamp, MICROS_PER_SEC};

pub const VERSION: u8 = 1;
pub const MAX_NODE_ID: usize = 64;
pub const MAX_FRAME_PAYLOAD: usize = 4 << 20;
pub const KEEPALIVE_SECS: u64 = 25;
pub const MISSED_KEEPALIVES: u64 = 3;
pub const REPLAY_WINDOW: u64 = 1024;
const PROTOCOL_NAME: &[u8] = b"holo-overlay-ik-x25519-chachapoly-sha256";
const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("hub identity unknown")]
    UnknownHub,
    #[error("authentication failed")]
    AuthFailure,
    #[error("replayed nonce")]
    ReplayDetected,
    #[error("session closed")]
    SessionClosed,
    #[error("policy violation: {src} may not address {dst}")]
    PolicyViolation { src: String, dst: String },
    #[error("unknown peer {0}")]
    UnknownPeer(String),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("node id {0} is already registered")]
    DuplicateNode(String),
    #[error("admission refused: {0}")]
    Refused(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Hub,
    Sensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeerIdentity {
    pub node_id: String,
    #[serde(with = "hex_key")]
    pub static_public_key: [u8; 32],
    pub role: Role,
}

pub(crate) mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("key must be 32 bytes"))
    }
}

/// Long-term x25519 keypair.
#[derive(Clone)]
pub struct StaticKeypair {
    secret: StaticSecret,
    public: PublicKey,
}

impl std::fmt::Debug for StaticKeypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StaticKeypair({})", hex::encode(self.public.as_bytes()))
    }
}

impl StaticKeypair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        Self::from_secret(b)
    }

    pub fn from_secret(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = PublicKey::from(&secret);
        StaticKeypair { secret, public }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public(&self) -> [u8; 32] {
        *self.public.as_bytes()
    }

    pub fn identity(&self, node_id: &str, role: Role) -> PeerIdentity {
        PeerIdentity {
            node_id: node_id.to_string(),
            static_public_key: self.public(),
            role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    HandshakeInit = 1,
    HandshakeResp = 2,
    Data = 3,
    Keepalive = 4,
    Close = 5,
}

impl MsgType {
    fn from_u8(b: u8) -> Option<MsgType> {
        Some(match b {
            1 => MsgType::HandshakeInit,
            2 => MsgType::HandshakeResp,
            3 => MsgType::Data,
            4 => MsgType::Keepalive,
            5 => MsgType::Close,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Channel {
    Control = 0,
    Logs = 1,
    TraceChunks = 2,
}

impl Channel {
    pub fn from_u8(b: u8) -> Option<Channel> {
        match b {
            0 => Some(Channel::Control),
            1 => Some(Channel::Logs),
            2 => Some(Channel::TraceChunks),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u8,
    pub msg_type: MsgType,
    pub src_id: String,
    pub dst_id: String,
    pub ciphertext: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, src_id: &str, dst_id: &str, ciphertext: Vec<u8>) -> Self {
        Frame {
            version: VERSION,
            msg_type,
            src_id: src_id.to_string(),
            dst_id: dst_id.to_string(),
            ciphertext,
        }
    }

    pub fn length(&self) -> u32 {
        self.ciphertext.len() as u32
    }

    /// Header bytes preceding the ciphertext; also the AEAD associated data.
    fn header(&self) -> Vec<u8> {
        let mut h = Vec::with_capacity(8 + self.src_id.len() + self.dst_id.len());
        h.push(self.version);
        h.push(self.msg_type as u8);
        h.push(self.src_id.len() as u8);
        h.extend_from_slice(self.src_id.as_bytes());
        h.push(self.dst_id.len() as u8);
        h.extend_from_slice(self.dst_id.as_bytes());
        h.extend_from_slice(&self.length().to_be_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header();
        out.extend_from_slice(&self.ciphertext);
        out
    }

    /// Parses exactly one frame occupying all of `buf`.
    pub fn decode(buf: &[u8]) -> Result<Frame, OverlayError> {
        let mut r = buf;
        let f = Self::read_from(&mut r).map_err(|e| match e {
            FrameReadError::Overlay(o) => o,
            FrameReadError::Io(_) => OverlayError::Malformed("truncated frame"),
        })?;
        if !r.is_empty() {
            return Err(OverlayError::Malformed("trailing bytes"));
        }
        Ok(f)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, FrameReadError> {
        let mut fixed = [0u8; 3];
        r.read_exact(&mut fixed)?;
        if fixed[0] != VERSION {
            return Err(OverlayError::BadVersion(fixed[0]).into());
        }
        let msg_type = MsgType::from_u8(fixed[1]).ok_or(OverlayError::Malformed("message type"))?;
        let src_id = read_id(r, fixed[2])?;
        let mut len = [0u8; 1];
        r.read_exact(&mut len)?;
        let dst_id = read_id(r, len[0])?;
        let mut l4 = [0u8; 4];
        r.read_exact(&mut l4)?;
        let length = u32::from_be_bytes(l4) as usize;
        if length > MAX_FRAME_PAYLOAD {
            return Err(OverlayError::Malformed("frame too large").into());
        }
        let mut ciphertext = vec![0u8; length];
        r.read_exact(&mut ciphertext)?;
        Ok(Frame {
            version: VERSION,
            msg_type,
            src_id,
            dst_id,
            ciphertext,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }
}

#[derive(Debug, Error)]
pub enum FrameReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
}

fn read_id<R: Read>(r: &mut R, len: u8) -> Result<String, FrameReadError> {
    if usize::from(len) > MAX_NODE_ID {
        return Err(OverlayError::Malformed("node id too long").into());
    }
    let mut b = vec![0u8; usize::from(len)];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| OverlayError::Malformed("node id not utf-8").into())
}

fn mix(ck: &[u8; 32], ikm: &[u8]) -> ([u8; 32], [u8; 32]) {
    let hk = Hkdf::<Sha256>::new(Some(ck), ikm);
    let mut okm = [0u8; 64];
    hk.expand(b"", &mut okm).expect("64 bytes is a valid hkdf length");
    let mut a = [0u8; 32];
    let mut b = [0u8; 32];
    a.copy_from_slice(&okm[..32]);
    b.copy_from_slice(&okm[32..]);
    (a, b)
}

fn dh(secret: &StaticSecret, public: &[u8; 32]) -> Result<[u8; 32], OverlayError> {
    let shared = secret.diffie_hellman(&PublicKey::from(*public));
    if !shared.was_contributory() {
        return Err(OverlayError::AuthFailure);
    }
    Ok(*shared.as_bytes())
}

fn nonce(counter: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_le_bytes());
    Nonce::from(n)
}

fn seal_with(key: &[u8; 32], counter: u64, aad: &[u8], msg: &[u8]) -> Vec<u8> {
    ChaCha20Poly1305::new(Key::from_slice(key))
        .encrypt(&nonce(counter), Payload { msg, aad })
        .expect("encryption of in-memory buffers cannot fail")
}

fn open_with(key: &[u8; 32], counter: u64, aad: &[u8], ct: &[u8]) -> Result<Vec<u8>, OverlayError> {
    ChaCha20Poly1305::new(Key::from_slice(key))
        .decrypt(&nonce(counter), Payload { msg: ct, aad })
        .map_err(|_| OverlayError::AuthFailure)
}

fn hash2(a: &[u8], b: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(a);
    h.update(b);
    h.finalize().into()
}

fn initial_state(hub_pub: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let ck: [u8; 32] = Sha256::digest(PROTOCOL_NAME).into();
    (ck, hash2(&ck, hub_pub))
}

/// Sliding window over the last [`REPLAY_WINDOW`] counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayWindow {
    highest: Option<u64>,
    bits: [u64; (REPLAY_WINDOW / 64) as usize],
}

impl ReplayWindow {
    /// Whether `n` would be accepted; does not record it.
    pub fn check(&self, n: u64) -> bool {
        match self.highest {
            None => true,
            Some(h) if n > h => true,
            Some(h) => {
                let back = h - n;
                back < REPLAY_WINDOW && !self.bit(back)
            }
        }
    }

    fn bit(&self, back: u64) -> bool {
        self.bits[(back / 64) as usize] >> (back % 64) & 1 == 1
    }

    fn set(&mut self, back: u64) {
        self.bits[(back / 64) as usize] |= 1 << (back % 64);
    }

    fn shift(&mut self, by: u64) {
        if by >= REPLAY_WINDOW {
            self.bits = Default::default();
            return;
        }
        let words = (by / 64) as usize;
        let rem = by % 64;
        let n = self.bits.len();
        for i in (0..n).rev() {
            let mut v = if i >= words { self.bits[i - words] << rem } else { 0 };
            if rem > 0 && i > words {
                v |= self.bits[i - words - 1] >> (64 - rem);
            }
            self.bits[i] = v;
        }
    }

    /// Records `n`; the caller has already checked it.
    pub fn record(&mut self, n: u64) {
        match self.highest {
            None => {
                self.highest = Some(n);
                self.set(0);
            }
            Some(h) if n > h => {
                self.shift(n - h);
                self.highest = Some(n);
                self.set(0);
            }
            Some(h) => self.set(h - n),
        }
    }
}

/// An established, directional-keyed session.
#[derive(Debug, Clone)]
pub struct Session {
    pub peer: PeerIdentity,
    pub local_id: String,
    send_key: [u8; 32],
    recv_key: [u8; 32],
    send_counter: u64,
    recv_window: ReplayWindow,
    pub established_at: Timestamp,
    last_recv: Timestamp,
    last_send: Timestamp,
    closed: bool,
}

impl Session {
    fn new(local_id: &str, peer: PeerIdentity, send_key: [u8; 32], recv_key: [u8; 32], now: Timestamp) -> Self {
        Session {
            peer,
            local_id: local_id.to_string(),
            send_key,
            recv_key,
            send_counter: 0,
            recv_window: ReplayWindow::default(),
            established_at: now,
            last_recv: now,
            last_send: now,
            closed: false,
        }
    }

    pub fn send_counter(&self) -> u64 {
        self.send_counter
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn seal_typed(&mut self, msg_type: MsgType, plaintext: &[u8]) -> Result<Frame, OverlayError> {
        if self.closed {
            return Err(OverlayError::SessionClosed);
        }
        let counter = self.send_counter;
        self.send_counter += 1;
        let mut frame = Frame::new(msg_type, &self.local_id, &self.peer.node_id, Vec::new());
        let ct_len = 8 + plaintext.len() + TAG_LEN;
        frame.ciphertext = vec![0; ct_len];
        let aad = frame.header();
        let sealed = seal_with(&self.send_key, counter, &aad, plaintext);
        frame.ciphertext.clear();
        frame.ciphertext.extend_from_slice(&counter.to_be_bytes());
        frame.ciphertext.extend_from_slice(&sealed);
        Ok(frame)
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Frame, OverlayError> {
        self.seal_typed(MsgType::Data, plaintext)
    }

    pub fn seal_channel(&mut self, channel: Channel, data: &[u8]) -> Result<Frame, OverlayError> {
        let mut pt = Vec::with_capacity(1 + data.len());
        pt.push(channel as u8);
        pt.extend_from_slice(data);
        self.seal(&pt)
    }

    pub fn keepalive(&mut self, now: Timestamp) -> Result<Frame, OverlayError> {
        self.last_send = now;
        self.seal_typed(MsgType::Keepalive, &[])
    }

    pub fn close(&mut self) -> Result<Frame, OverlayError> {
        let f = self.seal_typed(MsgType::Close, &[])?;
        self.closed = true;
        Ok(f)
    }

    /// Authenticates and decrypts; keepalives yield an empty payload and a
    /// close frame ends the session.
    pub fn open(&mut self, frame: &Frame) -> Result<Vec<u8>, OverlayError> {
        self.open_at(frame, self.last_recv)
    }

    pub fn open_at(&mut self, frame: &Frame, now: Timestamp) -> Result<Vec<u8>, OverlayError> {
        if self.closed {
            return Err(OverlayError::SessionClosed);
        }
        if !matches!(frame.msg_type, MsgType::Data | MsgType::Keepalive | MsgType::Close) {
            return Err(OverlayError::Malformed("not a transport frame"));
        }
        if frame.ciphertext.len() < 8 + TAG_LEN {
            return Err(OverlayError::Malformed("ciphertext too short"));
        }
        let counter = u64::from_be_bytes(frame.ciphertext[..8].try_into().expect("8 bytes"));
        if !self.recv_window.check(counter) {
            return Err(OverlayError::ReplayDetected);
        }
        let pt = open_with(&self.recv_key, counter, &frame.header(), &frame.ciphertext[8..])?;
        self.recv_window.record(counter);
        self.last_recv = self.last_recv.max(now);
        if frame.msg_type == MsgType::Close {
            self.closed = true;
            return Err(OverlayError::SessionClosed);
        }
        Ok(pt)
    }

    pub fn keepalive_due(&self, now: Timestamp) -> bool {
        now.since(self.last_send) >= KEEPALIVE_SECS * MICROS_PER_SEC
    }

    pub fn note_sent(&mut self, now: Timestamp) {
        self.last_send = self.last_send.max(now);
    }

    /// True once three keepalive intervals passed without authenticated traffic.
    pub fn expired(&self, now: Timestamp) -> bool {
        now.since(self.last_recv) > MISSED_KEEPALIVES * KEEPALIVE_SECS * MICROS_PER_SEC
    }
}

/// Splits a data plaintext into its channel and body.
pub fn split_channel(pt: &[u8]) -> Result<(Channel, &[u8]), OverlayError> {
    let (&tag, rest) = pt.split_first().ok_or(OverlayError::Malformed("empty data frame"))?;
    Ok((Channel::from_u8(tag).ok_or(OverlayError::Malformed("channel tag"))?, rest))
}

/// Initiator state between sending the init and receiving the response.
pub struct PendingSession {
    local_id: String,
    hub: PeerIdentity,
    s: StaticSecret,
    e: StaticSecret,
    ck: [u8; 32],
    h: [u8; 32],
}

/// Starts a session towards `hub`. `payload` travels encrypted and
/// authenticated inside the init message.
pub fn handshake_initiate<R: RngCore + CryptoRng>(
    local_id: &str,
    keys: &StaticKeypair,
    hub: &PeerIdentity,
    payload: &[u8],
    now: Timestamp,
    rng: &mut R,
) -> Result<(PendingSession, Frame), OverlayError> {
    if hub.role != Role::Hub || hub.static_public_key == [0; 32] {
        return Err(OverlayError::UnknownHub);
    }
    if local_id.len() > MAX_NODE_ID {
        return Err(OverlayError::Malformed("node id too long"));
    }
    let mut eb = [0u8; 32];
    rng.fill_bytes(&mut eb);
    let e = StaticSecret::from(eb);
    let e_pub = *PublicKey::from(&e).as_bytes();
    let (ck0, h0) = initial_state(&hub.static_public_key);
    let h1 = hash2(&h0, &e_pub);
    let (ck1, k1) = mix(&ck0, &dh(&e, &hub.static_public_key)?);
    let enc_s = seal_with(&k1, 0, &h1, keys.public.as_bytes());
    let h2 = hash2(&h1, &enc_s);
    let (ck2, k2) = mix(&ck1, &dh(&keys.secret, &hub.static_public_key)?);
    let mut body = Vec::with_capacity(8 + payload.len());
    body.extend_from_slice(&now.as_micros().to_be_bytes());
    body.extend_from_slice(payload);
    let enc_p = seal_with(&k2, 0, &h2, &body);
    let h3 = hash2(&h2, &enc_p);
    let mut ct = Vec::with_capacity(32 + enc_s.len() + enc_p.len());
    ct.extend_from_slice(&e_pub);
    ct.extend_from_slice(&enc_s);
    ct.extend_from_slice(&enc_p);
    let frame = Frame::new(MsgType::HandshakeInit, local_id, &hub.node_id, ct);
    Ok((
        PendingSession {
            local_id: local_id.to_string(),
            hub: hub.clone(),
            s: keys.secret.clone(),
            e,
            ck: ck2,
            h: h3,
        },
        frame,
    ))
}

impl PendingSession {
    pub fn ephemeral_public(&self) -> [u8; 32] {
        *PublicKey::from(&self.e).as_bytes()
    }

    /// Completes the handshake; returns the session and the hub's response
    /// payload.
    pub fn complete(self, resp: &Frame, now: Timestamp) -> Result<(Session, Vec<u8>), OverlayError> {
        if resp.msg_type != MsgType::HandshakeResp || resp.src_id != self.hub.node_id || resp.dst_id != self.local_id {
            return Err(OverlayError::Malformed("unexpected handshake response"));
        }
        if resp.ciphertext.len() < 32 + TAG_LEN {
            return Err(OverlayError::Malformed("handshake response too short"));
        }
        let er: [u8; 32] = resp.ciphertext[..32].try_into().expect("32 bytes");
        let h = hash2(&self.h, &er);
        let (ck, _) = mix(&self.ck, &dh(&self.e, &er)?);
        let (ck, k) = mix(&ck, &dh(&self.s, &er)?);
        let payload = open_with(&k, 0, &h, &resp.ciphertext[32..])?;
        let (i2r, r2i) = mix(&ck, b"");
        Ok((Session::new(&self.local_id, self.hub, i2r, r2i, now), payload))
    }
}

/// What an unregistered static key presented during a handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub static_key: [u8; 32],
    pub claimed_id: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OverlayEvent {
    SessionEstablished(String),
    PolicyViolation { src: String, dst: String },
    ReplayRejected(String),
    SessionExpired(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardDecision {
    /// Authenticated data for the hub itself.
    Deliver { from: String, plaintext: Vec<u8> },
    Keepalive { from: String },
    Closed { from: String },
}

/// Hub side: registry of pinned sensor keys and live sessions.
pub struct Hub {
    identity: PeerIdentity,
    keys: StaticKeypair,
    by_key: HashMap<[u8; 32], String>,
    peers: HashMap<String, PeerIdentity>,
    sessions: HashMap<String, Session>,
    last_init: HashMap<String, u64>,
    events: Vec<OverlayEvent>,
}

impl Hub {
    pub fn new(node_id: &str, keys: StaticKeypair) -> Self {
        Hub {
            identity: keys.identity(node_id, Role::Hub),
            keys,
            by_key: HashMap::new(),
            peers: HashMap::new(),
            sessions: HashMap::new(),
            last_init: HashMap::new(),
            events: Vec::new(),
        }
    }

    pub fn identity(&self) -> &PeerIdentity {
        &self.identity
    }

    pub fn register(&mut self, peer: PeerIdentity) -> Result<(), OverlayError> {
        if peer.node_id == self.identity.node_id || self.peers.contains_key(&peer.node_id) {
            return Err(OverlayError::DuplicateNode(peer.node_id));
        }
        if self.by_key.contains_key(&peer.static_public_key) {
            return Err(OverlayError::DuplicateNode(peer.node_id));
        }
        self.by_key.insert(peer.static_public_key, peer.node_id.clone());
        self.peers.insert(peer.node_id.clone(), peer);
        Ok(())
    }

    pub fn is_registered(&self, node_id: &str) -> bool {
        self.peers.contains_key(node_id)
    }

    pub fn session(&self, node_id: &str) -> Option<&Session> {
        self.sessions.get(node_id)
    }

    pub fn session_mut(&mut self, node_id: &str) -> Option<&mut Session> {
        self.sessions.get_mut(node_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn take_events(&mut self) -> Vec<OverlayEvent> {
        std::mem::take(&mut self.events)
    }

    /// Accepts a handshake from a registered sensor.
    pub fn accept<R: RngCore + CryptoRng>(&mut self, init: &Frame, now: Timestamp, rng: &mut R) -> Result<(Frame, String), OverlayError> {
        self.accept_with(init, now, rng, |_| Err("sensor key not registered".into()))
    }

    /// Accepts a handshake. When the static key is not registered, `admit`
    /// decides; its `Ok` payload is returned to the sensor and the key is
    /// pinned under the claimed id.
    pub fn accept_with<R, F>(&mut self, init: &Frame, now: Timestamp, rng: &mut R, admit: F) -> Result<(Frame, String), OverlayError>
    where
        R: RngCore + CryptoRng,
        F: FnOnce(&Admission) -> Result<Vec<u8>, String>,
    {
        if init.msg_type != MsgType::HandshakeInit {
            return Err(OverlayError::Malformed("expected handshake init"));
        }
        if init.dst_id != self.identity.node_id {
            return Err(OverlayError::UnknownHub);
        }
        let ct = &init.ciphertext;
        let s_len = 32 + TAG_LEN;
        if ct.len() < 32 + s_len + 8 + TAG_LEN {
            return Err(OverlayError::Malformed("handshake init too short"));
        }
        let e_pub: [u8; 32] = ct[..32].try_into().expect("32 bytes");
        let enc_s = &ct[32..32 + s_len];
        let enc_p = &ct[32 + s_len..];
        let (ck0, h0) = initial_state(&self.identity.static_public_key);
        let h1 = hash2(&h0, &e_pub);
        let (ck1, k1) = mix(&ck0, &dh(&self.keys.secret, &e_pub)?);
        let s_pub: [u8; 32] = open_with(&k1, 0, &h1, enc_s)?.try_into().map_err(|_| OverlayError::AuthFailure)?;
        let h2 = hash2(&h1, enc_s);
        let (ck2, k2) = mix(&ck1, &dh(&self.keys.secret, &s_pub)?);
        let body = open_with(&k2, 0, &h2, enc_p)?;
        let h3 = hash2(&h2, enc_p);
        let stamp = u64::from_be_bytes(body[..8].try_into().map_err(|_| OverlayError::AuthFailure)?);
        let payload = &body[8..];

        let (node_id, resp_payload) = match self.by_key.get(&s_pub) {
            Some(id) => {
                if *id != init.src_id {
                    return Err(OverlayError::AuthFailure);
                }
                (id.clone(), Vec::new())
            }
            None => {
                if self.peers.contains_key(&init.src_id) {
                    return Err(OverlayError::AuthFailure);
                }
                let adm = Admission {
                    static_key: s_pub,
                    claimed_id: init.src_id.clone(),
                    payload: payload.to_vec(),
                };
                let resp = admit(&adm).map_err(OverlayError::Refused)?;
                self.register(PeerIdentity {
                    node_id: init.src_id.clone(),
                    static_public_key: s_pub,
                    role: Role::Sensor,
                })?;
                (init.src_id.clone(), resp)
            }
        };
        if let Some(&last) = self.last_init.get(&node_id) {
            if stamp <= last {
                self.events.push(OverlayEvent::ReplayRejected(node_id));
                return Err(OverlayError::ReplayDetected);
            }
        }
        self.last_init.insert(node_id.clone(), stamp);

        let mut eb = [0u8; 32];
        rng.fill_bytes(&mut eb);
        let er = StaticSecret::from(eb);
        let er_pub = *PublicKey::from(&er).as_bytes();
        let h = hash2(&h3, &er_pub);
        let (ck, _) = mix(&ck2, &dh(&er, &e_pub)?);
        let (ck, k) = mix(&ck, &dh(&er, &s_pub)?);
        let enc = seal_with(&k, 0, &h, &resp_payload);
        let (i2r, r2i) = mix(&ck, b"");
        let mut rct = Vec::with_capacity(32 + enc.len());
        rct.extend_from_slice(&er_pub);
        rct.extend_from_slice(&enc);
        let peer = self.peers[&node_id].clone();
        self.sessions
            .insert(node_id.clone(), Session::new(&self.identity.node_id, peer, r2i, i2r, now));
        self.events.push(OverlayEvent::SessionEstablished(node_id.clone()));
        Ok((Frame::new(MsgType::HandshakeResp, &self.identity.node_id, &node_id, rct), node_id))
    }

    fn violation(&mut self, src: &str, dst: &str) -> OverlayError {
        log::warn!("overlay policy violation: {src} addressed {dst}");
        self.events.push(OverlayEvent::PolicyViolation {
            src: src.to_string(),
            dst: dst.to_string(),
        });
        OverlayError::PolicyViolation {
            src: src.to_string(),
            dst: dst.to_string(),
        }
    }

    /// Routes a frame that arrived on `conn`'s session. Only frames addressed
    /// to the hub are ever accepted.
    pub fn hub_route(&mut self, conn: &str, frame: &Frame, now: Timestamp) -> Result<ForwardDecision, OverlayError> {
        if frame.src_id != conn {
            return Err(self.violation(conn, &frame.dst_id));
        }
        if frame.dst_id != self.identity.node_id {
            if frame.dst_id == conn || self.peers.contains_key(&frame.dst_id) {
                return Err(self.violation(conn, &frame.dst_id));
            }
            return Err(OverlayError::UnknownPeer(frame.dst_id.clone()));
        }
        let session = self
            .sessions
            .get_mut(conn)
            .ok_or_else(|| OverlayError::UnknownPeer(conn.to_string()))?;
        match session.open_at(frame, now) {
            Ok(pt) => Ok(match frame.msg_type {
                MsgType::Keepalive => ForwardDecision::Keepalive { from: conn.to_string() },
                _ => ForwardDecision::Deliver {
                    from: conn.to_string(),
                    plaintext: pt,
                },
            }),
            Err(OverlayError::SessionClosed) => {
                self.sessions.remove(conn);
                Ok(ForwardDecision::Closed { from: conn.to_string() })
            }
            Err(OverlayError::ReplayDetected) => {
                self.events.push(OverlayEvent::ReplayRejected(conn.to_string()));
                Err(OverlayError::ReplayDetected)
            }
            Err(e) => Err(e),
        }
    }

    /// Seals a message for `node_id` on its session.
    pub fn send(&mut self, node_id: &str, channel: Channel, data: &[u8], now: Timestamp) -> Result<Frame, OverlayError> {
        let s = self
            .sessions
            .get_mut(node_id)
            .ok_or_else(|| OverlayError::UnknownPeer(node_id.to_string()))?;
        s.note_sent(now);
        s.seal_channel(channel, data)
    }

    /// Drops sessions that missed three keepalives.
    pub fn expire(&mut self, now: Timestamp) -> Vec<String> {
        let mut gone: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.expired(now))
            .map(|(id, _)| id.clone())
            .collect();
        gone.sort();
        for id in &gone {
            self.sessions.remove(id);
            self.events.push(OverlayEvent::SessionExpired(id.clone()));
        }
        gone
    }

    pub fn drop_session(&mut self, node_id: &str) {
        self.sessions.remove(node_id);
    }
}
