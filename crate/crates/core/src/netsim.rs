//! Seeded in-memory network joining principals, with adversary hooks
//! (spoofed floods, in-flight tampering, passive observation, replay) and
//! the rules that turn measured traces into comparison-table verdicts.
//!
//! The event loop is a single FIFO queue; every random choice flows from the
//! scenario seed, so equal seeds give byte-identical reports.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, PayloadBody, PayloadType, NONCE_MAX, NONCE_MIN};
use crate::crypto::{DhGroup, Serial, SignatureSchemeId, Suite, SymmetricKey, SERIAL_LEN};
use crate::protocol::{
    Counters, Credentials, FailureStep, FileCredential, GateMode, HandshakeSession, Outbound, ReplayCache, Role,
    SessionConfig, SessionState, Variant, WireSpan,
};
use crate::token::{DeploymentConfig, DeviceSlot, Fleet, KeySelector, SecurityToken};

pub mod udp;

pub const DEFAULT_SEED: u64 = 0x1CE_5EED;
pub const DEFAULT_XOR: u8 = 0x01;

const BATTERY: [(&str, &str); 4] = [
    ("honest", include_str!("../scenarios/honest.toml")),
    ("flood", include_str!("../scenarios/flood.toml")),
    ("tamper-sa", include_str!("../scenarios/tamper-sa.toml")),
    ("tamper-ke", include_str!("../scenarios/tamper-ke.toml")),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("unknown principal `{0}`")]
    UnknownPrincipal(String),
    #[error("duplicate principal `{0}`")]
    DuplicatePrincipal(String),
    #[error("duplicate address `{0}`")]
    DuplicateAddress(String),
    #[error("malformed scenario: {0}")]
    Malformed(String),
}

// ---------------------------------------------------------------------------
// Scenario configuration

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_group() -> String {
    "desk".into()
}

fn default_nonce_len() -> usize {
    16
}

fn yes() -> bool {
    true
}

fn default_xor() -> u8 {
    DEFAULT_XOR
}

fn default_scheme() -> String {
    "ed25519".into()
}

fn default_cipher() -> String {
    "xchacha20poly1305".into()
}

fn default_suite() -> String {
    "default".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub variant: Variant,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_group")]
    pub group: String,
    #[serde(default = "default_nonce_len")]
    pub nonce_len: usize,
    #[serde(default)]
    pub deployment: DeploymentSpec,
    #[serde(default, rename = "principal")]
    pub principals: Vec<PrincipalSpec>,
    #[serde(default, rename = "handshake")]
    pub handshakes: Vec<HandshakeSpec>,
    #[serde(default, rename = "adversary")]
    pub adversary: Vec<AdversaryAction>,
}

/// Fleet provisioning. Without `key1` the fleet secret is drawn from the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentSpec {
    #[serde(default, skip_serializing)]
    pub key1: Option<String>,
    #[serde(default = "default_scheme")]
    pub signature_scheme: String,
    #[serde(default = "default_cipher")]
    pub cipher: String,
    #[serde(default = "default_suite")]
    pub suite: String,
}

impl Default for DeploymentSpec {
    fn default() -> Self {
        DeploymentSpec {
            key1: None,
            signature_scheme: default_scheme(),
            cipher: default_cipher(),
            suite: default_suite(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalSpec {
    pub name: String,
    #[serde(default)]
    pub address: Option<String>,
    #[serde(default = "yes")]
    pub token: bool,
    /// Seven ASCII characters or fourteen hex digits.
    #[serde(default)]
    pub serial: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandshakeSpec {
    pub initiator: String,
    pub responder: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverKnowledge {
    #[default]
    None,
    /// Holds a token of the same deployment, hence key1.
    HasKey1AndToken,
}

/// One scripted adversary step. `message` counts protocol traffic only,
/// starting at 0; injected packets are never numbered.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum AdversaryAction {
    Flood {
        target: String,
        count: usize,
        #[serde(default = "yes")]
        forge_source: bool,
    },
    Tamper {
        message: usize,
        #[serde(default)]
        payload: Option<String>,
        #[serde(default)]
        byte: Option<usize>,
        #[serde(default)]
        offset: Option<usize>,
        #[serde(default = "default_xor")]
        xor: u8,
    },
    Observe {
        #[serde(default)]
        knowledge: ObserverKnowledge,
    },
    Replay {
        message: usize,
        #[serde(default)]
        delay: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TamperSelector {
    Payload { payload_type: PayloadType, byte: usize },
    Offset(usize),
}

impl fmt::Display for TamperSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TamperSelector::Payload { payload_type, byte } => write!(f, "{}[{byte}]", payload_type.name()),
            TamperSelector::Offset(o) => write!(f, "@{o}"),
        }
    }
}

impl AdversaryAction {
    fn selector(&self) -> Result<Option<TamperSelector>, ConfigError> {
        let AdversaryAction::Tamper { payload, byte, offset, xor, .. } = self else {
            return Ok(None);
        };
        if *xor == 0 {
            return Err(ConfigError::Malformed("tamper xor must be nonzero".into()));
        }
        match (payload, byte, offset) {
            (Some(name), byte, None) => {
                let payload_type = PayloadType::parse_name(name)
                    .ok_or_else(|| ConfigError::Malformed(format!("unknown payload `{name}`")))?;
                Ok(Some(TamperSelector::Payload { payload_type, byte: byte.unwrap_or(0) }))
            }
            (None, None, Some(o)) => Ok(Some(TamperSelector::Offset(*o))),
            _ => Err(ConfigError::Malformed("tamper needs either payload(+byte) or offset".into())),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// One of the fixed battery scenarios, re-targeted at `variant` and `seed`.
    pub fn builtin(name: &str, variant: Variant, seed: u64) -> Option<Self> {
        let (_, text) = BATTERY.iter().find(|(n, _)| *n == name)?;
        let mut cfg = Self::from_toml(text).expect("bundled scenario parses");
        cfg.variant = variant;
        cfg.seed = seed;
        Some(cfg)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BATTERY.iter().map(|(n, _)| *n)
    }

    pub fn principal_mut(&mut self, name: &str) -> Option<&mut PrincipalSpec> {
        self.principals.iter_mut().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut names = BTreeSet::new();
        let mut addresses = BTreeSet::new();
        for (i, p) in self.principals.iter().enumerate() {
            if !names.insert(p.name.as_str()) {
                return Err(ConfigError::DuplicatePrincipal(p.name.clone()));
            }
            if !addresses.insert(principal_address(p, i)) {
                return Err(ConfigError::DuplicateAddress(principal_address(p, i)));
            }
            if let Some(s) = &p.serial {
                parse_serial(s)?;
            }
        }
        let known = |n: &str| {
            if names.contains(n) {
                Ok(())
            } else {
                Err(ConfigError::UnknownPrincipal(n.to_string()))
            }
        };
        for h in &self.handshakes {
            known(&h.initiator)?;
            known(&h.responder)?;
            if h.initiator == h.responder {
                return Err(ConfigError::Malformed(format!("`{}` cannot handshake with itself", h.initiator)));
            }
        }
        for a in &self.adversary {
            a.selector()?;
            if let AdversaryAction::Flood { target, .. } = a {
                known(target)?;
            }
        }
        if DhGroup::by_name(&self.group).is_none() {
            return Err(ConfigError::Malformed(format!("unknown DH group `{}`", self.group)));
        }
        if !(NONCE_MIN..=NONCE_MAX).contains(&self.nonce_len) {
            return Err(ConfigError::Malformed(format!("nonce_len must be in {NONCE_MIN}..={NONCE_MAX}")));
        }
        let d = &self.deployment;
        let parsed = d
            .signature_scheme
            .parse::<SignatureSchemeId>()
            .map(|_| ())
            .and(d.cipher.parse::<crate::crypto::CipherId>().map(|_| ()))
            .and(Suite::parse(&d.suite).map(|_| ()));
        if let Some(k) = &d.key1 {
            SymmetricKey::from_hex(k).map_err(|_| ConfigError::Malformed("key1 must be 64 hex digits".into()))?;
        }
        parsed.map_err(|e| ConfigError::Malformed(e.to_string()))
    }
}

fn principal_address(p: &PrincipalSpec, index: usize) -> String {
    p.address.clone().unwrap_or_else(|| format!("10.0.0.{}", index + 1))
}

fn parse_serial(s: &str) -> Result<Serial, ConfigError> {
    let bytes = if s.len() == SERIAL_LEN && s.is_ascii() {
        s.as_bytes().to_vec()
    } else if s.len() == 2 * SERIAL_LEN {
        hex::decode(s).map_err(|_| ConfigError::Malformed(format!("serial `{s}` is not hex")))?
    } else {
        return Err(ConfigError::Malformed(format!("serial `{s}` must be 7 characters or 14 hex digits")));
    };
    Serial::from_slice(&bytes).map_err(|e| ConfigError::Malformed(e.to_string()))
}

/// Extra knobs not expressible in scenario files.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub gate: GateMode,
}

// ---------------------------------------------------------------------------
// Tampering and observation

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("selector miss: {0}")]
pub struct SelectorMiss(pub String);

/// Absolute byte offset a selector names in `bytes`. Payload selectors only
/// reach payloads that are in clear on the wire.
pub fn resolve_selector(bytes: &[u8], selector: &TamperSelector) -> Result<usize, SelectorMiss> {
    let offset = match *selector {
        TamperSelector::Offset(o) => o,
        TamperSelector::Payload { payload_type, byte } => {
            let msg = codec::decode_message(bytes).map_err(|e| SelectorMiss(format!("unparseable message: {e}")))?;
            let (_, spans) =
                codec::encode_message_with_spans(&msg).map_err(|e| SelectorMiss(format!("re-encode failed: {e}")))?;
            let span = spans
                .iter()
                .find(|s| s.payload_type == payload_type)
                .ok_or_else(|| SelectorMiss(format!("no clear {} payload", payload_type.name())))?;
            if byte >= span.body_len {
                return Err(SelectorMiss(format!("byte {byte} beyond {}-byte body", span.body_len)));
            }
            span.body_offset + byte
        }
    };
    if offset >= bytes.len() {
        return Err(SelectorMiss(format!("offset {offset} beyond {}-byte message", bytes.len())));
    }
    Ok(offset)
}

/// XORs one selected byte. Length is untouched, so the header stays consistent.
pub fn tamper_in_flight(bytes: &[u8], selector: &TamperSelector, xor: u8) -> Result<Vec<u8>, SelectorMiss> {
    let offset = resolve_selector(bytes, selector)?;
    let mut out = bytes.to_vec();
    out[offset] ^= xor;
    Ok(out)
}

/// Plaintext an observer recovered from one message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub message: usize,
    pub payload: String,
    /// Recovered by decryption rather than read in clear.
    pub decrypted: bool,
    pub bytes: usize,
    pub plaintext_hex: String,
}

/// A passive wire observer. An insider holds a token of the deployment and
/// so can open anything sealed under key1-derived keys.
#[derive(Debug)]
pub struct Observer {
    insider: Option<Arc<SecurityToken>>,
    serials: Vec<Serial>,
}

impl Observer {
    pub fn passive() -> Self {
        Observer { insider: None, serials: Vec::new() }
    }

    pub fn insider(token: Arc<SecurityToken>) -> Self {
        Observer { insider: Some(token), serials: Vec::new() }
    }

    pub fn knowledge(&self) -> ObserverKnowledge {
        if self.insider.is_some() {
            ObserverKnowledge::HasKey1AndToken
        } else {
            ObserverKnowledge::None
        }
    }

    pub fn observe(&mut self, message: usize, bytes: &[u8]) -> Vec<Finding> {
        let mut found = Vec::new();
        let Ok(msg) = codec::decode_message(bytes) else {
            return found;
        };
        let finding = |payload: &str, decrypted: bool, data: &[u8]| Finding {
            message,
            payload: payload.to_string(),
            decrypted,
            bytes: data.len(),
            plaintext_hex: hex::encode(data),
        };
        let mut sender = None;
        for p in &msg.payloads {
            match (&p.body, &self.insider) {
                (PayloadBody::Dev(dev), Some(tok)) => {
                    if let Ok(serial) = tok.decrypt(KeySelector::Key1, &dev.sealed()) {
                        found.push(finding("DEV", true, &serial));
                        if let Ok(s) = Serial::from_slice(&serial) {
                            sender = Some(s);
                            if !self.serials.contains(&s) {
                                self.serials.push(s);
                            }
                        }
                    }
                }
                (PayloadBody::Dev(_), None) => {}
                (body, _) => found.push(finding(body.payload_type().name(), false, &body.to_bytes())),
            }
        }
        let (Some(tok), Some(blob), Some(first)) = (&self.insider, &msg.sealed_chain, msg.first_sealed_type()) else {
            return found;
        };
        let candidates: Vec<Serial> = sender.into_iter().chain(self.serials.iter().copied()).collect();
        for serial in candidates {
            let Ok(plain) = tok.decrypt(KeySelector::PeerSession(serial), blob) else {
                continue;
            };
            let Ok(chain) = codec::decode_chain(first, &plain) else {
                break;
            };
            for p in &chain {
                let inner = match &p.body {
                    PayloadBody::Cert(c) => tok.decrypt(KeySelector::PeerSerial(serial), &c.data).ok(),
                    PayloadBody::Sig(s) => tok.decrypt(KeySelector::PeerSerial(serial), &s.signature).ok(),
                    body => Some(body.to_bytes()),
                };
                if let Some(data) = inner {
                    found.push(finding(p.payload_type().name(), true, &data));
                }
            }
            break;
        }
        found
    }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalReport {
    pub address: String,
    pub has_token: bool,
    pub sessions: usize,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeOutcome {
    pub initiator: String,
    pub responder: String,
    pub established: bool,
    pub initiator_state: String,
    pub responder_state: String,
    pub skeyid_match: bool,
    pub skeyid_fingerprint: Option<String>,
    /// Some certificate's plaintext encoding appeared verbatim in this handshake's traffic.
    pub cert_plaintext_on_wire: bool,
    pub failure: Option<FailureStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderPayload {
    pub payload: String,
    pub body_len: usize,
    pub sealed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderRecord {
    pub index: usize,
    pub handshake: usize,
    pub message: u8,
    pub from: String,
    pub to: String,
    pub bytes: usize,
    pub encrypted: bool,
    pub tampered: bool,
    pub payloads: Vec<LadderPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperRecord {
    pub message: usize,
    pub handshake: usize,
    pub selector: String,
    pub xor: u8,
    pub applied: bool,
    pub offset: Option<usize>,
    /// The wire selector missed and the sender's sealed layout located the byte.
    pub via_sender_layout: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub message: usize,
    pub delay: usize,
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloodStats {
    pub target: String,
    pub count: usize,
    pub distinct_sources: usize,
    pub target_dh_ops: u64,
    pub target_rejected_pre_dh: u64,
    pub replies_blackholed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub delivery: usize,
    pub principal: String,
    pub role: Role,
    pub handshake: Option<usize>,
    pub injected: bool,
    pub step: FailureStep,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub handshake: usize,
    pub principal: String,
    pub role: Role,
    pub op: String,
    pub from: String,
    pub to: String,
    pub received_len: Option<usize>,
    pub emitted_len: Option<usize>,
    pub counters_delta: Counters,
    pub failure: Option<FailureStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperEvidence {
    pub message: usize,
    pub detected: bool,
    pub detected_pre_signature: bool,
    pub failure_step: Option<FailureStep>,
    pub sig_verifies: u64,
    pub initiator_dh_ops: u64,
    pub responder_dh_ops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObserverEvidence {
    pub messages_observed: usize,
    pub messages_with_findings: usize,
    pub sa_ke_bytes: usize,
    pub id_bytes: usize,
    pub cert_sig_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloodEvidence {
    pub forged: usize,
    pub dh_ops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SigningEvidence {
    pub device_signatures: u64,
    pub host_signatures: u64,
}

/// Measurements the verdict rules read. Filled from counters and traces only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub tamper: Vec<TamperEvidence>,
    /// Passive (no key) observation only.
    pub observer: Option<ObserverEvidence>,
    pub flood: Vec<FloodEvidence>,
    pub signing: Option<SigningEvidence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub group: String,
    pub suite: String,
    pub principals: BTreeMap<String, PrincipalReport>,
    pub handshakes: Vec<HandshakeOutcome>,
    pub ladder: Vec<LadderRecord>,
    pub tamper_log: Vec<TamperRecord>,
    pub replays: Vec<ReplayRecord>,
    pub floods: Vec<FloodStats>,
    pub observer_findings: Vec<Finding>,
    pub insider_findings: Vec<Finding>,
    pub failure_trace: Vec<FailureEvent>,
    pub transitions: Vec<TransitionRecord>,
    pub blackholed: usize,
    pub evidence: Evidence,
    /// Columns this scenario alone has evidence for.
    pub verdicts: BTreeMap<String, String>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Line-delimited trace: transitions, then failures, one JSON object per line.
    pub fn trace_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .transitions
            .iter()
            .map(|t| serde_json::json!({"kind": "transition", "event": t}).to_string())
            .collect();
        lines.extend(
            self.failure_trace
                .iter()
                .map(|f| serde_json::json!({"kind": "failure", "event": f}).to_string()),
        );
        lines
    }

    pub fn all_established(&self) -> bool {
        !self.handshakes.is_empty() && self.handshakes.iter().all(|h| h.established && h.skeyid_match)
    }
}

// ---------------------------------------------------------------------------
// Simulator

struct Node {
    name: String,
    address: String,
    config: SessionConfig,
    creds: Credentials,
    certificate: Vec<u8>,
    replay: Arc<ReplayCache>,
    slots: Vec<Slot>,
}

struct Slot {
    session: HandshakeSession,
    handshake: Option<usize>,
    injected: bool,
}

#[derive(Clone, Copy)]
enum Origin {
    Protocol { handshake: usize },
    Injected,
}

#[derive(Clone)]
struct Packet {
    src: String,
    dst: String,
    bytes: Vec<u8>,
    origin: Origin,
}

struct World {
    nodes: Vec<Node>,
    fleet: Fleet,
    suite: Suite,
    group: Arc<DhGroup>,
}

fn build_world(cfg: &ScenarioConfig, opts: RunOptions, rng: &mut ChaCha20Rng) -> Result<World, ConfigError> {
    cfg.validate()?;
    let d = &cfg.deployment;
    let key1 = match &d.key1 {
        Some(k) => k.clone(),
        None => hex::encode(SymmetricKey::random(rng).as_bytes()),
    };
    let deployment = DeploymentConfig::from_ids(&key1, &d.signature_scheme, &d.cipher)
        .map_err(|e| ConfigError::Malformed(e.to_string()))?;
    let scheme = deployment.signature_scheme;
    let suite = Suite::parse(&d.suite).map_err(|e| ConfigError::Malformed(e.to_string()))?;
    let group = Arc::new(DhGroup::by_name(&cfg.group).expect("validated group"));
    let mut fleet = Fleet::new(deployment);
    let mut nodes = Vec::new();
    for (i, p) in cfg.principals.iter().enumerate() {
        let serial = match &p.serial {
            Some(s) => parse_serial(s)?,
            None => Serial::from_slice(format!("TK{i:05}").as_bytes()).expect("7 bytes"),
        };
        let device = if p.token {
            let token = fleet
                .issue(serial.as_bytes(), &p.name, rng)
                .map_err(|e| ConfigError::Malformed(e.to_string()))?;
            DeviceSlot::present(Arc::new(token))
        } else {
            DeviceSlot::absent()
        };
        let file = Arc::new(FileCredential::generate(&p.name, scheme, rng));
        let certificate = match cfg.variant {
            Variant::Improved => device.get_certificate().map(|c| c.encoded().to_vec()).unwrap_or_default(),
            Variant::Baseline => file.certificate.encoded().to_vec(),
        };
        let config = SessionConfig {
            variant: cfg.variant,
            suite,
            group: group.clone(),
            identity: p.name.clone(),
            nonce_len: cfg.nonce_len,
            gate: opts.gate,
        };
        nodes.push(Node {
            name: p.name.clone(),
            address: principal_address(p, i),
            config,
            creds: Credentials { device, file: Some(file) },
            certificate,
            replay: Arc::new(ReplayCache::default()),
            slots: Vec::new(),
        });
    }
    Ok(World { nodes, fleet, suite, group })
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    rng: ChaCha20Rng,
    nodes: Vec<Node>,
    by_address: HashMap<String, usize>,
    queue: VecDeque<Packet>,
    deliveries: usize,
    next_index: usize,
    pending_replays: Vec<(usize, usize, Packet)>,
    observers: Vec<Observer>,
    ladder: Vec<LadderRecord>,
    tamper_log: Vec<TamperRecord>,
    replays: Vec<ReplayRecord>,
    observer_findings: Vec<Finding>,
    insider_findings: Vec<Finding>,
    observed_messages: usize,
    failure_trace: Vec<FailureEvent>,
    wire: Vec<(usize, Vec<u8>)>,
    blackholed: usize,
}

fn peek_cookies(bytes: &[u8]) -> ([u8; 8], [u8; 8]) {
    let mut i = [0u8; 8];
    let mut r = [0u8; 8];
    if bytes.len() >= 16 {
        i.copy_from_slice(&bytes[..8]);
        r.copy_from_slice(&bytes[8..16]);
    }
    (i, r)
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

impl Sim<'_> {
    fn name_of(&self, address: &str) -> String {
        self.by_address
            .get(address)
            .map_or_else(|| address.to_string(), |&i| self.nodes[i].name.clone())
    }

    fn send(&mut self, from: usize, dst: String, out: Outbound, handshake: Option<usize>, message: u8) {
        let src = self.nodes[from].address.clone();
        let Some(h) = handshake else {
            self.queue.push_back(Packet { src, dst, bytes: out.bytes, origin: Origin::Injected });
            return;
        };
        let index = self.next_index;
        self.next_index += 1;
        let mut bytes = out.bytes;
        let mut tampered = false;
        for action in &self.cfg.adversary {
            let AdversaryAction::Tamper { message: m, xor, .. } = action else {
                continue;
            };
            if *m != index {
                continue;
            }
            let selector = action.selector().expect("validated").expect("tamper selector");
            let mut record = TamperRecord {
                message: index,
                handshake: h,
                selector: selector.to_string(),
                xor: *xor,
                applied: false,
                offset: None,
                via_sender_layout: false,
                note: None,
            };
            let resolved = match resolve_selector(&bytes, &selector) {
                Ok(o) => Ok(o),
                Err(miss) => match selector {
                    TamperSelector::Payload { payload_type, byte } => {
                        record.via_sender_layout = true;
                        record.note = Some(miss.0.clone());
                        sealed_offset(&out.spans, payload_type, byte, bytes.len()).ok_or(miss)
                    }
                    TamperSelector::Offset(_) => Err(miss),
                },
            };
            match resolved {
                Ok(o) => {
                    bytes[o] ^= xor;
                    record.applied = true;
                    record.offset = Some(o);
                    tampered = true;
                }
                Err(miss) => {
                    record.via_sender_layout = false;
                    record.note = Some(miss.0);
                }
            }
            self.tamper_log.push(record);
        }

        let decoded = codec::decode_message(&bytes).ok();
        self.ladder.push(LadderRecord {
            index,
            handshake: h,
            message,
            from: self.nodes[from].name.clone(),
            to: self.name_of(&dst),
            bytes: bytes.len(),
            encrypted: decoded.as_ref().is_some_and(|m| m.header.encrypted()),
            tampered,
            payloads: out
                .spans
                .iter()
                .map(|s| LadderPayload { payload: s.payload_type.to_string(), body_len: s.body_len, sealed: s.sealed })
                .collect(),
        });

        if !self.observers.is_empty() {
            self.observed_messages += 1;
        }
        for obs in &mut self.observers {
            let found = obs.observe(index, &bytes);
            match obs.knowledge() {
                ObserverKnowledge::None => self.observer_findings.extend(found),
                ObserverKnowledge::HasKey1AndToken => self.insider_findings.extend(found),
            }
        }

        let packet = Packet { src, dst, bytes, origin: Origin::Protocol { handshake: h } };
        for action in &self.cfg.adversary {
            if let AdversaryAction::Replay { message: m, delay } = action {
                if *m == index {
                    let copy = Packet { origin: Origin::Injected, ..packet.clone() };
                    self.pending_replays.push((self.deliveries + delay, self.replays.len(), copy));
                    self.replays.push(ReplayRecord { message: index, delay: *delay, delivered: false });
                }
            }
        }
        self.wire.push((h, packet.bytes.clone()));
        self.queue.push_back(packet);
    }

    fn release_replays(&mut self, force: bool) {
        let mut i = 0;
        while i < self.pending_replays.len() {
            if force || self.pending_replays[i].0 <= self.deliveries {
                let (_, record, packet) = self.pending_replays.remove(i);
                self.replays[record].delivered = true;
                self.queue.push_back(packet);
            } else {
                i += 1;
            }
        }
    }

    fn deliver(&mut self, pkt: Packet) {
        let Some(&ni) = self.by_address.get(&pkt.dst) else {
            self.blackholed += 1;
            return;
        };
        let (cky_i, cky_r) = peek_cookies(&pkt.bytes);
        let node = &mut self.nodes[ni];
        let slot_index = if cky_r == [0; 8] {
            let seed = self.rng.gen();
            let session =
                HandshakeSession::responder(node.config.clone(), node.creds.clone(), Some(node.replay.clone()), seed);
            let (handshake, injected) = match pkt.origin {
                Origin::Protocol { handshake } => (Some(handshake), false),
                Origin::Injected => (None, true),
            };
            node.slots.push(Slot { session, handshake, injected });
            Some(node.slots.len() - 1)
        } else {
            node.slots
                .iter()
                .position(|s| s.session.role() == Role::Responder && s.session.cookies() == (cky_i, cky_r))
                .or_else(|| {
                    node.slots
                        .iter()
                        .position(|s| s.session.role() == Role::Initiator && s.session.cookies().0 == cky_i)
                })
        };
        let injected = matches!(pkt.origin, Origin::Injected);
        let Some(si) = slot_index else {
            self.failure_trace.push(FailureEvent {
                delivery: self.deliveries,
                principal: node.name.clone(),
                role: Role::Responder,
                handshake: None,
                injected,
                step: FailureStep::CookieMismatch,
                detail: "no session for cookie pair".into(),
            });
            return;
        };
        let slot = &mut node.slots[si];
        let result = slot.session.handle(&pkt.bytes);
        let role = slot.session.role();
        let handshake = if slot.injected { None } else { slot.handshake };
        match result {
            Ok(Some(out)) => {
                let message = if role == Role::Responder { 2 } else { 3 };
                self.send(ni, pkt.src, out, handshake, message);
            }
            Ok(None) => {}
            Err(f) => self.failure_trace.push(FailureEvent {
                delivery: self.deliveries,
                principal: node.name.clone(),
                role,
                handshake: slot.handshake,
                injected: injected || slot.injected,
                step: f.step,
                detail: f.detail,
            }),
        }
    }

    fn forged_source(&mut self, forge: bool) -> String {
        if !forge {
            return "203.0.113.66".into();
        }
        loop {
            let a = format!("198.18.{}.{}", self.rng.gen::<u8>(), self.rng.gen::<u8>());
            if !self.by_address.contains_key(&a) {
                return a;
            }
        }
    }

    fn flood(&mut self, world: &World, target: usize, count: usize, forge: bool) -> FloodStats {
        let variant = self.cfg.variant;
        let creds = match variant {
            // strongest forgery without key1: a genuine token of some other deployment
            Variant::Improved => {
                let rogue = DeploymentConfig {
                    key1: SymmetricKey::random(&mut self.rng),
                    ..world.fleet.deployment().clone()
                };
                let serial: [u8; SERIAL_LEN] = self.rng.gen();
                let token = crate::token::create_token(&serial, &rogue, "mallory", &mut self.rng)
                    .expect("7-byte serial");
                Credentials { device: DeviceSlot::present(Arc::new(token)), file: None }
            }
            Variant::Baseline => Credentials {
                device: DeviceSlot::absent(),
                file: Some(Arc::new(FileCredential::generate(
                    "mallory",
                    world.fleet.deployment().signature_scheme,
                    &mut self.rng,
                ))),
            },
        };
        let config = SessionConfig {
            variant,
            suite: world.suite,
            group: world.group.clone(),
            identity: "mallory".into(),
            nonce_len: self.cfg.nonce_len,
            gate: GateMode::Enforced,
        };
        let mut sources = BTreeSet::new();
        let dst = self.nodes[target].address.clone();
        for _ in 0..count {
            let mut attacker = HandshakeSession::initiator(config.clone(), creds.clone(), self.rng.gen());
            let msg1 = attacker.initiator_start().expect("attacker holds credentials");
            let src = self.forged_source(forge);
            sources.insert(src.clone());
            self.queue.push_back(Packet { src, dst: dst.clone(), bytes: msg1.bytes, origin: Origin::Injected });
        }
        FloodStats {
            target: self.nodes[target].name.clone(),
            count,
            distinct_sources: sources.len(),
            target_dh_ops: 0,
            target_rejected_pre_dh: 0,
            replies_blackholed: 0,
        }
    }
}

// Offset of a sealed body byte in the sender's layout.
fn sealed_offset(spans: &[WireSpan], ty: PayloadType, byte: usize, len: usize) -> Option<usize> {
    let span = spans.iter().find(|s| s.payload_type == ty && s.sealed)?;
    let o = span.body_offset + byte;
    (byte < span.body_len && o < len).then_some(o)
}

/// Runs a scenario to quiescence and measures it.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, ConfigError> {
    run_scenario_with(cfg, RunOptions::default())
}

pub fn run_scenario_with(cfg: &ScenarioConfig, opts: RunOptions) -> Result<ScenarioReport, ConfigError> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut world = build_world(cfg, opts, &mut rng)?;
    let nodes = std::mem::take(&mut world.nodes);
    let by_address = nodes.iter().enumerate().map(|(i, n)| (n.address.clone(), i)).collect();
    let index_of = |name: &str| cfg.principals.iter().position(|p| p.name == name).expect("validated principal");

    let mut observers = Vec::new();
    for (i, action) in cfg.adversary.iter().enumerate() {
        if let AdversaryAction::Observe { knowledge } = action {
            observers.push(match knowledge {
                ObserverKnowledge::None => Observer::passive(),
                ObserverKnowledge::HasKey1AndToken => {
                    let serial = format!("OBS{i:04}");
                    let token = world
                        .fleet
                        .issue(serial.as_bytes(), "observer", &mut rng)
                        .map_err(|e| ConfigError::Malformed(e.to_string()))?;
                    Observer::insider(Arc::new(token))
                }
            });
        }
    }

    let mut sim = Sim {
        cfg,
        rng,
        nodes,
        by_address,
        queue: VecDeque::new(),
        deliveries: 0,
        next_index: 0,
        pending_replays: Vec::new(),
        observers,
        ladder: Vec::new(),
        tamper_log: Vec::new(),
        replays: Vec::new(),
        observer_findings: Vec::new(),
        insider_findings: Vec::new(),
        observed_messages: 0,
        failure_trace: Vec::new(),
        wire: Vec::new(),
        blackholed: 0,
    };

    let mut floods = Vec::new();
    for action in &cfg.adversary {
        if let AdversaryAction::Flood { target, count, forge_source } = action {
            let t = index_of(target);
            floods.push((t, sim.flood(&world, t, *count, *forge_source)));
        }
    }

    for (h, spec) in cfg.handshakes.iter().enumerate() {
        let ni = index_of(&spec.initiator);
        let dst = sim.nodes[index_of(&spec.responder)].address.clone();
        let seed = sim.rng.gen();
        let node = &mut sim.nodes[ni];
        let mut session = HandshakeSession::initiator(node.config.clone(), node.creds.clone(), seed);
        let started = session.initiator_start();
        node.slots.push(Slot { session, handshake: Some(h), injected: false });
        match started {
            Ok(out) => sim.send(ni, dst, out, Some(h), 1),
            Err(f) => sim.failure_trace.push(FailureEvent {
                delivery: 0,
                principal: spec.initiator.clone(),
                role: Role::Initiator,
                handshake: Some(h),
                injected: false,
                step: f.step,
                detail: f.detail,
            }),
        }
    }

    loop {
        while let Some(pkt) = sim.queue.pop_front() {
            sim.deliver(pkt);
            sim.deliveries += 1;
            sim.release_replays(false);
        }
        if sim.pending_replays.is_empty() {
            break;
        }
        sim.release_replays(true);
    }

    let blackholed = sim.blackholed;
    let floods = floods
        .into_iter()
        .map(|(t, mut stats)| {
            let injected = sim.nodes[t].slots.iter().filter(|s| s.injected);
            let c = injected.fold(Counters::default(), |mut acc, s| {
                acc += s.session.counters();
                acc
            });
            stats.target_dh_ops = c.dh_ops;
            stats.target_rejected_pre_dh = c.messages_rejected_pre_dh;
            stats.replies_blackholed = blackholed;
            stats
        })
        .collect();
    Ok(finish(sim, cfg, floods))
}

fn honest_slot(nodes: &[Node], node: usize, h: usize, role: Role) -> Option<&Slot> {
    nodes[node]
        .slots
        .iter()
        .find(|s| !s.injected && s.handshake == Some(h) && s.session.role() == role)
}

fn finish(sim: Sim<'_>, cfg: &ScenarioConfig, floods: Vec<FloodStats>) -> ScenarioReport {
    let index_of = |name: &str| cfg.principals.iter().position(|p| p.name == name).expect("validated principal");
    let principals = sim
        .nodes
        .iter()
        .map(|n| {
            let counters = n.slots.iter().fold(Counters::default(), |mut acc, s| {
                acc += s.session.counters();
                acc
            });
            let report = PrincipalReport {
                address: n.address.clone(),
                has_token: n.creds.device.is_present(),
                sessions: n.slots.len(),
                counters,
            };
            (n.name.clone(), report)
        })
        .collect();

    let mut handshakes = Vec::new();
    let mut transitions = Vec::new();
    let mut signing = SigningEvidence::default();
    let mut any_established = false;
    for (h, spec) in cfg.handshakes.iter().enumerate() {
        let (ii, ri) = (index_of(&spec.initiator), index_of(&spec.responder));
        let init = honest_slot(&sim.nodes, ii, h, Role::Initiator);
        let resp = honest_slot(&sim.nodes, ri, h, Role::Responder);
        let state = |s: Option<&Slot>| s.map_or_else(|| "absent".to_string(), |s| s.session.state().to_string());
        let established = [init, resp]
            .iter()
            .all(|s| s.is_some_and(|s| s.session.state() == SessionState::Established));
        let keys = (init.and_then(|s| s.session.skeyid()), resp.and_then(|s| s.session.skeyid()));
        let skeyid_match = matches!(keys, (Some(a), Some(b)) if a == b);
        let certs = [&sim.nodes[ii].certificate, &sim.nodes[ri].certificate];
        let cert_plaintext_on_wire =
            sim.wire.iter().filter(|(wh, _)| *wh == h).any(|(_, b)| certs.iter().any(|c| contains(b, c)));
        let failure = sim.failure_trace.iter().find(|f| f.handshake == Some(h) && !f.injected).map(|f| f.step);
        if established {
            any_established = true;
            for s in [init, resp].into_iter().flatten() {
                signing.device_signatures += s.session.counters().device_signatures;
                signing.host_signatures += s.session.counters().host_signatures;
            }
        }
        for (slot, name) in [(init, &spec.initiator), (resp, &spec.responder)] {
            let Some(slot) = slot else { continue };
            transitions.extend(slot.session.log().iter().map(|e| TransitionRecord {
                handshake: h,
                principal: name.clone(),
                role: e.role,
                op: e.op.to_string(),
                from: e.from.to_string(),
                to: e.to.to_string(),
                received_len: e.received_len,
                emitted_len: e.emitted_len,
                counters_delta: e.counters_delta,
                failure: e.failure,
            }));
        }
        handshakes.push(HandshakeOutcome {
            initiator: spec.initiator.clone(),
            responder: spec.responder.clone(),
            established,
            initiator_state: state(init),
            responder_state: state(resp),
            skeyid_match,
            skeyid_fingerprint: if skeyid_match { keys.0.map(|k| k.fingerprint()) } else { None },
            cert_plaintext_on_wire,
            failure,
        });
    }

    let tamper = sim
        .tamper_log
        .iter()
        .filter(|t| t.applied)
        .map(|t| {
            let spec = &cfg.handshakes[t.handshake];
            let init = honest_slot(&sim.nodes, index_of(&spec.initiator), t.handshake, Role::Initiator);
            let resp = honest_slot(&sim.nodes, index_of(&spec.responder), t.handshake, Role::Responder);
            let counters = |s: Option<&Slot>| s.map(|s| s.session.counters()).unwrap_or_default();
            let (ci, cr) = (counters(init), counters(resp));
            let outcome = &handshakes[t.handshake];
            let detected = !outcome.established;
            let sig_verifies = ci.sig_verifies + cr.sig_verifies;
            TamperEvidence {
                message: t.message,
                detected,
                detected_pre_signature: detected && sig_verifies == 0,
                failure_step: outcome.failure,
                sig_verifies,
                initiator_dh_ops: ci.dh_ops,
                responder_dh_ops: cr.dh_ops,
            }
        })
        .collect();

    let passive = cfg
        .adversary
        .iter()
        .any(|a| matches!(a, AdversaryAction::Observe { knowledge: ObserverKnowledge::None }));
    let observer = passive.then(|| {
        let mut ev = ObserverEvidence { messages_observed: sim.observed_messages, ..Default::default() };
        ev.messages_with_findings = sim.observer_findings.iter().map(|f| f.message).collect::<BTreeSet<_>>().len();
        for f in &sim.observer_findings {
            match f.payload.as_str() {
                "SA" | "KE" => ev.sa_ke_bytes += f.bytes,
                "CERT" | "SIG" => ev.cert_sig_bytes += f.bytes,
                "ID" => ev.id_bytes += f.bytes,
                _ => {}
            }
        }
        ev
    });

    let evidence = Evidence {
        tamper,
        observer,
        flood: floods.iter().map(|f: &FloodStats| FloodEvidence { forged: f.count, dh_ops: f.target_dh_ops }).collect(),
        signing: any_established.then_some(signing),
    };
    let verdicts = partial_verdicts(&evidence);

    ScenarioReport {
        scenario: cfg.name.clone(),
        variant: cfg.variant,
        seed: cfg.seed,
        group: cfg.group.clone(),
        suite: Suite::parse(&cfg.deployment.suite).map(|s| s.id()).unwrap_or_default(),
        principals,
        handshakes,
        ladder: sim.ladder,
        tamper_log: sim.tamper_log,
        replays: sim.replays,
        floods,
        observer_findings: sim.observer_findings,
        insider_findings: sim.insider_findings,
        failure_trace: sim.failure_trace,
        transitions,
        blackholed: sim.blackholed,
        evidence,
        verdicts,
    }
}

// ---------------------------------------------------------------------------
// Verdicts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Supported,
    NotSupported,
}

impl Verdict {
    fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Supported
        } else {
            Verdict::NotSupported
        }
    }

    pub fn glyph(self, ascii: bool) -> &'static str {
        match (self, ascii) {
            (Verdict::Supported, false) => "○",
            (Verdict::NotSupported, false) => "×",
            (Verdict::Supported, true) => "o",
            (Verdict::NotSupported, true) => "x",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateStorage {
    Device,
    File,
}

impl CertificateStorage {
    pub fn name(self) -> &'static str {
        match self {
            CertificateStorage::Device => "device",
            CertificateStorage::File => "file",
        }
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub sa_ke_protection: Verdict,
    pub cert_sig_protection: Verdict,
    pub dos_prevention: Verdict,
    pub certificate_storage: CertificateStorage,
}

impl TableRow {
    /// The pattern each variant is claimed to show.
    pub fn expected(variant: Variant) -> Self {
        match variant {
            Variant::Baseline => TableRow {
                sa_ke_protection: Verdict::NotSupported,
                cert_sig_protection: Verdict::NotSupported,
                dos_prevention: Verdict::NotSupported,
                certificate_storage: CertificateStorage::File,
            },
            Variant::Improved => TableRow {
                sa_ke_protection: Verdict::Supported,
                cert_sig_protection: Verdict::Supported,
                dos_prevention: Verdict::Supported,
                certificate_storage: CertificateStorage::Device,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("incomplete trace: no evidence for {0}")]
    IncompleteTrace(&'static str),
    #[error("trace mixes variants")]
    MixedVariants,
}

// The rules. Each reads measured evidence only.

/// Every applied tamper was caught before any signature check, and a keyless
/// observer read no SA or KE bytes.
fn sa_ke_rule(tamper: &[TamperEvidence], observer: &ObserverEvidence) -> Verdict {
    Verdict::from_bool(tamper.iter().all(|t| t.detected_pre_signature) && observer.sa_ke_bytes == 0)
}

/// A keyless observer read no CERT or SIG bytes.
fn cert_sig_rule(observer: &ObserverEvidence) -> Verdict {
    Verdict::from_bool(observer.cert_sig_bytes == 0)
}

/// A forged flood cost the target zero DH operations.
fn dos_rule(flood: &[FloodEvidence]) -> Verdict {
    Verdict::from_bool(flood.iter().all(|f| f.forged > 0 && f.dh_ops == 0))
}

/// Device iff every signature came from a token operation.
fn storage_rule(signing: &SigningEvidence) -> CertificateStorage {
    if signing.device_signatures > 0 && signing.host_signatures == 0 {
        CertificateStorage::Device
    } else {
        CertificateStorage::File
    }
}

fn merge(evidence: &[&Evidence]) -> Evidence {
    let mut out = Evidence::default();
    for e in evidence {
        out.tamper.extend(e.tamper.iter().cloned());
        out.flood.extend(e.flood.iter().cloned());
        if let Some(o) = &e.observer {
            let acc = out.observer.get_or_insert_with(ObserverEvidence::default);
            acc.messages_observed += o.messages_observed;
            acc.messages_with_findings += o.messages_with_findings;
            acc.sa_ke_bytes += o.sa_ke_bytes;
            acc.id_bytes += o.id_bytes;
            acc.cert_sig_bytes += o.cert_sig_bytes;
        }
        if let Some(s) = &e.signing {
            let acc = out.signing.get_or_insert_with(SigningEvidence::default);
            acc.device_signatures += s.device_signatures;
            acc.host_signatures += s.host_signatures;
        }
    }
    out
}

fn partial_verdicts(e: &Evidence) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let name = |v: Verdict| match v {
        Verdict::Supported => "supported".to_string(),
        Verdict::NotSupported => "not-supported".to_string(),
    };
    if let Some(o) = &e.observer {
        out.insert("cert_sig_protection".into(), name(cert_sig_rule(o)));
        if !e.tamper.is_empty() {
            out.insert("sa_ke_protection".into(), name(sa_ke_rule(&e.tamper, o)));
        }
    }
    if !e.flood.is_empty() {
        out.insert("dos_prevention".into(), name(dos_rule(&e.flood)));
    }
    if let Some(s) = &e.signing {
        out.insert("certificate_storage".into(), storage_rule(s).name().into());
    }
    out
}

/// Derives one table row from a set of reports of the same variant.
pub fn verdicts_from_trace(reports: &[ScenarioReport]) -> Result<TableRow, VerdictError> {
    if reports.windows(2).any(|w| w[0].variant != w[1].variant) {
        return Err(VerdictError::MixedVariants);
    }
    let e = merge(&reports.iter().map(|r| &r.evidence).collect::<Vec<_>>());
    let observer = e.observer.as_ref().ok_or(VerdictError::IncompleteTrace("passive observation"))?;
    if e.tamper.is_empty() {
        return Err(VerdictError::IncompleteTrace("in-flight tampering"));
    }
    if e.flood.is_empty() {
        return Err(VerdictError::IncompleteTrace("forged flood"));
    }
    let signing = e.signing.as_ref().ok_or(VerdictError::IncompleteTrace("an established handshake"))?;
    Ok(TableRow {
        sa_ke_protection: sa_ke_rule(&e.tamper, observer),
        cert_sig_protection: cert_sig_rule(observer),
        dos_prevention: dos_rule(&e.flood),
        certificate_storage: storage_rule(signing),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub variant: Variant,
    pub scenario: String,
    pub established: bool,
    pub evidence: Evidence,
    pub verdicts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub variant: Variant,
    pub measured: TableRow,
    pub expected: TableRow,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub seed: u64,
    pub rows: Vec<MatrixRow>,
    pub scenarios: Vec<ScenarioSummary>,
    pub matches_expected: bool,
}

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Verdict(#[from] VerdictError),
}

/// Runs the fixed battery for one variant.
pub fn run_battery(variant: Variant, seed: u64, opts: RunOptions) -> Result<Vec<ScenarioReport>, ConfigError> {
    ScenarioConfig::builtin_names()
        .map(|name| {
            let cfg = ScenarioConfig::builtin(name, variant, seed).expect("bundled name");
            run_scenario_with(&cfg, opts)
        })
        .collect()
}

/// Runs the battery for both variants and compares with the expected pattern.
pub fn run_matrix(seed: u64, opts: RunOptions) -> Result<MatrixReport, MatrixError> {
    let mut rows = Vec::new();
    let mut scenarios = Vec::new();
    for variant in Variant::ALL {
        let reports = run_battery(variant, seed, opts)?;
        let measured = verdicts_from_trace(&reports)?;
        let expected = TableRow::expected(variant);
        rows.push(MatrixRow { variant, measured, expected, matches: measured == expected });
        scenarios.extend(reports.into_iter().map(|r| ScenarioSummary {
            variant,
            established: r.all_established(),
            scenario: r.scenario,
            evidence: r.evidence,
            verdicts: r.verdicts,
        }));
    }
    let matches_expected = rows.iter().all(|r| r.matches);
    Ok(MatrixReport { seed, rows, scenarios, matches_expected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn honest(variant: Variant, seed: u64) -> ScenarioConfig {
        ScenarioConfig::builtin("honest", variant, seed).unwrap()
    }

    #[test]
    fn honest_scenarios_establish() {
        for variant in Variant::ALL {
            let r = run_scenario(&honest(variant, 3)).unwrap();
            assert!(r.all_established(), "{variant}: {:?}", r.failure_trace);
            assert_eq!(r.ladder.len(), 3);
        }
    }

    #[test]
    fn flood_counts() {
        for (variant, dh, rejected) in [(Variant::Baseline, 1000, 0), (Variant::Improved, 0, 1000)] {
            let cfg = ScenarioConfig::builtin("flood", variant, 1).unwrap();
            let r = run_scenario(&cfg).unwrap();
            let bob = &r.principals["bob"].counters;
            assert_eq!(bob.dh_ops, dh, "{variant}");
            assert_eq!(bob.messages_rejected_pre_dh, rejected, "{variant}");
            assert_eq!(r.floods[0].distinct_sources, r.floods[0].count.min(r.floods[0].distinct_sources));
        }
    }

    #[test]
    fn disabled_gate_is_noticed() {
        let cfg = ScenarioConfig::builtin("flood", Variant::Improved, 1).unwrap();
        let r = run_scenario_with(&cfg, RunOptions { gate: GateMode::Disabled }).unwrap();
        assert_eq!(r.principals["bob"].counters.dh_ops, 1000);
        assert_eq!(r.verdicts["dos_prevention"], "not-supported");
    }

    #[test]
    fn selector_behaviour() {
        let r = run_scenario(&honest(Variant::Baseline, 4)).unwrap();
        assert!(r.tamper_log.is_empty());
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let cfg = SessionConfig::new(Variant::Baseline, "alice");
        let creds = Credentials {
            device: DeviceSlot::absent(),
            file: Some(Arc::new(FileCredential::generate("alice", SignatureSchemeId::Ed25519, &mut rng))),
        };
        let m1 = HandshakeSession::initiator(cfg, creds, rng.gen()).initiator_start().unwrap();
        let ke = TamperSelector::Payload { payload_type: PayloadType::Ke, byte: 0 };
        let tampered = tamper_in_flight(&m1.bytes, &ke, 0xff).unwrap();
        assert_ne!(tampered, m1.bytes);
        assert!(codec::decode_message(&tampered).is_ok());
        assert!(tamper_in_flight(&m1.bytes, &TamperSelector::Offset(m1.bytes.len()), 1).is_err());
        let cert = TamperSelector::Payload { payload_type: PayloadType::Cert, byte: 0 };
        assert!(tamper_in_flight(&m1.bytes, &cert, 1).is_err());
    }

    #[test]
    fn improved_selector_misses_then_falls_back() {
        let cfg = ScenarioConfig::builtin("tamper-ke", Variant::Improved, 5).unwrap();
        let r = run_scenario(&cfg).unwrap();
        let t = &r.tamper_log[0];
        assert!(t.applied && t.via_sender_layout, "{t:?}");
        assert!(r.evidence.tamper[0].detected_pre_signature);
    }

    #[test]
    fn incomplete_trace_is_reported() {
        let reports = run_battery(Variant::Baseline, 2, RunOptions::default()).unwrap();
        let without_flood: Vec<_> = reports.iter().filter(|r| r.scenario != "flood").cloned().collect();
        assert_eq!(verdicts_from_trace(&without_flood), Err(VerdictError::IncompleteTrace("forged flood")));
        let mixed = vec![reports[0].clone(), run_scenario(&honest(Variant::Improved, 2)).unwrap()];
        assert_eq!(verdicts_from_trace(&mixed), Err(VerdictError::MixedVariants));
    }

    #[test]
    fn config_errors() {
        let base = include_str!("../scenarios/honest.toml");
        assert!(matches!(
            ScenarioConfig::from_toml(&base.replace("initiator = \"alice\"", "initiator = \"zed\"")),
            Err(ConfigError::UnknownPrincipal(_))
        ));
        assert!(matches!(ScenarioConfig::from_toml("name = 1"), Err(ConfigError::Parse(_))));
        let bad_tamper = format!("{base}\n[[adversary]]\naction = \"tamper\"\nmessage = 0\n");
        assert!(matches!(ScenarioConfig::from_toml(&bad_tamper), Err(ConfigError::Malformed(_))));
    }

    #[test]
    fn insider_recovers_serial() {
        let mut cfg = honest(Variant::Improved, 6);
        cfg.adversary.push(AdversaryAction::Observe { knowledge: ObserverKnowledge::HasKey1AndToken });
        let r = run_scenario(&cfg).unwrap();
        assert!(r.observer_findings.is_empty());
        let dev = r.insider_findings.iter().find(|f| f.message == 0 && f.payload == "DEV").unwrap();
        assert_eq!(dev.plaintext_hex, hex::encode(b"ALICE01"));
    }

    #[test]
    fn replayed_msg1() {
        for (variant, dh) in [(Variant::Baseline, 2), (Variant::Improved, 1)] {
            let mut cfg = honest(variant, 7);
            cfg.adversary.push(AdversaryAction::Replay { message: 0, delay: 3 });
            let r = run_scenario(&cfg).unwrap();
            assert!(r.all_established());
            assert!(r.replays[0].delivered);
            assert_eq!(r.principals["bob"].counters.dh_ops, dh, "{variant}");
        }
    }
}
