//! Phase-1 aggressive-mode state machines.
//!
//! Both variants run the same three-message ladder:
//!
//! ```text
//! Baseline                          Improved
//! 1  HDR, SA, KE, Ni, IDii          HDR*, DEV(UMi), [SA, KE, Ni, IDii]
//! 2  HDR, SA, KE, Nr, IDir,         HDR*, DEV(UMr), [SA, KE, Nr, IDir,
//!    CERT, SIG_R                         {CERT}, {SIG_R}]
//! 3  HDR, CERT, SIG_I               HDR*, [{CERT}, {SIG_I}]
//! ```
//!
//! `[..]` is one chain sealed under kdf_session(key1, sender serial) and
//! `{..}` a body sealed under kdf_serial(sender serial). UMi/UMr carry the
//! sender's serial sealed under key1. The improved responder authenticates
//! UMi before it performs any Diffie-Hellman work.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::ops::{AddAssign, Sub};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::codec::{
    self, CertBody, DevPayloadBody, IdBody, IsakmpHeader, IsakmpMessage, IsakmpPayload, KeBody, NonceBody,
    PayloadBody, PayloadSpan, PayloadType, SaBody, SigBody, CERT_ENCODING_SEALED, CERT_ENCODING_SELF_CONTAINED,
    ID_FQDN,
};
use crate::crypto::{
    self, DhGroup, DhSecret, PrivateKey, Serial, Signature, SignatureSchemeId, SkeyidBundle, Suite, Transcript,
    NONCE_LEN,
};
use crate::token::{Certificate, DeviceSlot, KeySelector, TokenError};

/// Default bound of the responder's DEV nonce replay set.
pub const REPLAY_CACHE_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Improved,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Baseline, Variant::Improved];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Improved => "improved",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "improved" => Ok(Variant::Improved),
            other => Err(format!("unknown variant `{other}` (expected baseline or improved)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Initiator,
    Responder,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Initiator => "initiator",
            Role::Responder => "responder",
        })
    }
}

/// Where a handshake stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureStep {
    /// Negotiation stopped: the principal has no security device.
    NoDevice,
    /// Baseline principal has no certificate file.
    NoCredential,
    Malformed,
    CookieMismatch,
    OutOfOrder,
    /// Responder: UMi missing or not sealed under key1.
    BadDevPayload,
    /// Responder: DEV nonce seen before.
    Replay,
    /// Initiator: UMr missing or not sealed under key1.
    Umr,
    /// Sealed payload chain failed authentication.
    Chain,
    /// Sealed CERT body failed authentication.
    Cert,
    /// Sealed SIG body failed authentication.
    Sig,
    /// Certificate malformed, self-signature bad, or bound to the wrong peer.
    CertMismatch,
    WeakPublicValue,
    SigVerify,
}

impl FailureStep {
    pub fn label(self) -> &'static str {
        match self {
            FailureStep::NoDevice => "no-device",
            FailureStep::NoCredential => "no-credential",
            FailureStep::Malformed => "malformed",
            FailureStep::CookieMismatch => "cookie-mismatch",
            FailureStep::OutOfOrder => "out-of-order",
            FailureStep::BadDevPayload => "bad-dev-payload",
            FailureStep::Replay => "replay",
            FailureStep::Umr => "umr",
            FailureStep::Chain => "chain",
            FailureStep::Cert => "cert",
            FailureStep::Sig => "sig",
            FailureStep::CertMismatch => "cert-mismatch",
            FailureStep::WeakPublicValue => "weak-public-value",
            FailureStep::SigVerify => "sig-verify",
        }
    }

    /// Failed authenticated decryption under a token key.
    pub fn is_decrypt(self) -> bool {
        matches!(
            self,
            FailureStep::BadDevPayload | FailureStep::Umr | FailureStep::Chain | FailureStep::Cert | FailureStep::Sig
        )
    }
}

impl fmt::Display for FailureStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{step}: {detail}")]
pub struct Failure {
    pub step: FailureStep,
    pub detail: String,
}

impl Failure {
    pub fn new(step: FailureStep, detail: impl Into<String>) -> Self {
        Failure { step, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    Sent1,
    Sent2,
    Established,
    Failed(FailureStep),
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Established | SessionState::Failed(_))
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionState::Idle => f.write_str("idle"),
            SessionState::Sent1 => f.write_str("sent1"),
            SessionState::Sent2 => f.write_str("sent2"),
            SessionState::Established => f.write_str("established"),
            SessionState::Failed(step) => write!(f, "failed({step})"),
        }
    }
}

impl Serialize for SessionState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Per-session work and outcome counters. Monotone within a session.
///
/// `dh_ops` counts ephemeral Diffie-Hellman operations (one per side per
/// handshake, charged when the side commits to DH work); `modexps` counts the
/// raw modular exponentiations behind them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub dh_ops: u64,
    pub modexps: u64,
    pub sig_verifies: u64,
    pub decrypt_failures: u64,
    pub messages_rejected_pre_dh: u64,
    pub device_signatures: u64,
    pub host_signatures: u64,
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        self.dh_ops += o.dh_ops;
        self.modexps += o.modexps;
        self.sig_verifies += o.sig_verifies;
        self.decrypt_failures += o.decrypt_failures;
        self.messages_rejected_pre_dh += o.messages_rejected_pre_dh;
        self.device_signatures += o.device_signatures;
        self.host_signatures += o.host_signatures;
    }
}

impl Sub for Counters {
    type Output = Counters;

    fn sub(self, o: Counters) -> Counters {
        Counters {
            dh_ops: self.dh_ops - o.dh_ops,
            modexps: self.modexps - o.modexps,
            sig_verifies: self.sig_verifies - o.sig_verifies,
            decrypt_failures: self.decrypt_failures - o.decrypt_failures,
            messages_rejected_pre_dh: self.messages_rejected_pre_dh - o.messages_rejected_pre_dh,
            device_signatures: self.device_signatures - o.device_signatures,
            host_signatures: self.host_signatures - o.host_signatures,
        }
    }
}

/// Whether the improved responder authenticates UMi before DH work.
/// `Disabled` exists only to check that the measurement harness notices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Enforced,
    Disabled,
}

type NonceSet = (VecDeque<[u8; NONCE_LEN]>, HashSet<[u8; NONCE_LEN]>);

/// Bounded set of DEV nonces a responder has accepted, evicting oldest first.
#[derive(Debug)]
pub struct ReplayCache {
    capacity: usize,
    inner: Mutex<NonceSet>,
}

impl ReplayCache {
    pub fn new(capacity: usize) -> Self {
        ReplayCache {
            capacity: capacity.max(1),
            inner: Mutex::new((VecDeque::new(), HashSet::new())),
        }
    }

    /// Atomic test-and-insert. Returns `false` if the nonce was already present.
    pub fn check_and_insert(&self, nonce: [u8; NONCE_LEN]) -> bool {
        let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let (order, set) = &mut *guard;
        if !set.insert(nonce) {
            return false;
        }
        order.push_back(nonce);
        if order.len() > self.capacity {
            if let Some(old) = order.pop_front() {
                set.remove(&old);
            }
        }
        true
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ReplayCache {
    fn default() -> Self {
        ReplayCache::new(REPLAY_CACHE_CAPACITY)
    }
}

/// Signing key and certificate held by the host, as a `.p12` file would be.
#[derive(Debug)]
pub struct FileCredential {
    pub private_key: PrivateKey,
    pub certificate: Certificate,
}

impl FileCredential {
    pub fn generate<R: RngCore + CryptoRng>(subject: &str, scheme: SignatureSchemeId, rng: &mut R) -> Self {
        let private_key = PrivateKey::generate(scheme, rng);
        let certificate = Certificate::issue(subject, &private_key, Serial::new([0; crypto::SERIAL_LEN]));
        FileCredential { private_key, certificate }
    }
}

/// What a principal can authenticate with.
#[derive(Debug, Clone, Default)]
pub struct Credentials {
    pub device: DeviceSlot,
    pub file: Option<Arc<FileCredential>>,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub variant: Variant,
    pub suite: Suite,
    pub group: Arc<DhGroup>,
    /// Identity placed in the ID payload; must match the certificate subject.
    pub identity: String,
    pub nonce_len: usize,
    pub gate: GateMode,
}

impl SessionConfig {
    pub fn new(variant: Variant, identity: &str) -> Self {
        SessionConfig {
            variant,
            suite: Suite::default(),
            group: Arc::new(DhGroup::desk()),
            identity: identity.to_string(),
            nonce_len: 16,
            gate: GateMode::Enforced,
        }
    }
}

/// Location of one payload body in an emitted message. `sealed` bodies sit
/// inside the encrypted chain at the same offset their plaintext would have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireSpan {
    pub payload_type: PayloadType,
    pub body_offset: usize,
    pub body_len: usize,
    pub sealed: bool,
}

#[derive(Debug, Clone)]
pub struct Outbound {
    pub bytes: Vec<u8>,
    pub spans: Vec<WireSpan>,
}

/// One entry of a session's transition log.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionEvent {
    pub role: Role,
    pub op: &'static str,
    pub from: SessionState,
    pub to: SessionState,
    pub received_len: Option<usize>,
    pub emitted_len: Option<usize>,
    pub counters_delta: Counters,
    pub failure: Option<FailureStep>,
}

enum Expect {
    Initiator(SessionState),
    Responder(SessionState),
}

pub struct HandshakeSession {
    role: Role,
    config: SessionConfig,
    creds: Credentials,
    replay: Option<Arc<ReplayCache>>,
    state: SessionState,
    rng: ChaCha20Rng,
    cky_i: [u8; 8],
    cky_r: [u8; 8],
    own_nonce: Vec<u8>,
    peer_nonce: Vec<u8>,
    dh: Option<DhSecret>,
    own_gx: Vec<u8>,
    peer_gx: Vec<u8>,
    sa_i: Vec<u8>,
    sa_r: Vec<u8>,
    id_i: Vec<u8>,
    id_r: Vec<u8>,
    peer_identity: Option<String>,
    peer_serial: Option<Serial>,
    skeyid: Option<SkeyidBundle>,
    counters: Counters,
    log: Vec<TransitionEvent>,
}

impl fmt::Debug for HandshakeSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HandshakeSession")
            .field("role", &self.role)
            .field("variant", &self.config.variant)
            .field("state", &self.state)
            .field("cky_i", &hex::encode(self.cky_i))
            .field("cky_r", &hex::encode(self.cky_r))
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

fn device_failure(e: TokenError) -> Failure {
    match e {
        TokenError::DeviceAbsent => Failure::new(FailureStep::NoDevice, "negotiation stopped: no device"),
        other => Failure::new(FailureStep::Malformed, other.to_string()),
    }
}

fn malformed(e: impl fmt::Display) -> Failure {
    Failure::new(FailureStep::Malformed, e.to_string())
}

fn expect_types(payloads: &[IsakmpPayload], want: &[PayloadType]) -> Result<(), Failure> {
    let got: Vec<PayloadType> = payloads.iter().map(|p| p.payload_type()).collect();
    if got != want {
        return Err(Failure::new(FailureStep::Malformed, format!("unexpected payload chain {got:?}")));
    }
    Ok(())
}

impl HandshakeSession {
    fn new(role: Role, config: SessionConfig, creds: Credentials, replay: Option<Arc<ReplayCache>>, seed: [u8; 32]) -> Self {
        HandshakeSession {
            role,
            config,
            creds,
            replay,
            state: SessionState::Idle,
            rng: ChaCha20Rng::from_seed(seed),
            cky_i: [0; 8],
            cky_r: [0; 8],
            own_nonce: Vec::new(),
            peer_nonce: Vec::new(),
            dh: None,
            own_gx: Vec::new(),
            peer_gx: Vec::new(),
            sa_i: Vec::new(),
            sa_r: Vec::new(),
            id_i: Vec::new(),
            id_r: Vec::new(),
            peer_identity: None,
            peer_serial: None,
            skeyid: None,
            counters: Counters::default(),
            log: Vec::new(),
        }
    }

    pub fn initiator(config: SessionConfig, creds: Credentials, seed: [u8; 32]) -> Self {
        Self::new(Role::Initiator, config, creds, None, seed)
    }

    /// A responder session; improved responders sharing one cache reject replayed UMi.
    pub fn responder(config: SessionConfig, creds: Credentials, replay: Option<Arc<ReplayCache>>, seed: [u8; 32]) -> Self {
        Self::new(Role::Responder, config, creds, replay, seed)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn skeyid(&self) -> Option<&SkeyidBundle> {
        self.skeyid.as_ref()
    }

    pub fn peer_serial(&self) -> Option<Serial> {
        self.peer_serial
    }

    pub fn peer_identity(&self) -> Option<&str> {
        self.peer_identity.as_deref()
    }

    pub fn cookies(&self) -> ([u8; 8], [u8; 8]) {
        (self.cky_i, self.cky_r)
    }

    pub fn log(&self) -> &[TransitionEvent] {
        &self.log
    }

    fn improved(&self) -> bool {
        self.config.variant == Variant::Improved
    }

    // Runs one ladder step: state check, transition, log entry.
    fn step<T>(
        &mut self,
        op: &'static str,
        expect: Expect,
        received_len: Option<usize>,
        f: impl FnOnce(&mut Self) -> Result<(T, SessionState), Failure>,
        emitted: impl Fn(&T) -> Option<usize>,
    ) -> Result<T, Failure> {
        let (want_role, want_state) = match expect {
            Expect::Initiator(s) => (Role::Initiator, s),
            Expect::Responder(s) => (Role::Responder, s),
        };
        let from = self.state;
        let before = self.counters;
        if from.is_terminal() {
            return Err(Failure::new(FailureStep::OutOfOrder, format!("session already {from}")));
        }
        let result = if self.role != want_role || from != want_state {
            Err(Failure::new(FailureStep::OutOfOrder, format!("{op} while {from}")))
        } else {
            f(self)
        };
        let (out, failure) = match result {
            Ok((value, next)) => {
                self.state = next;
                (Ok(value), None)
            }
            Err(failure) => {
                self.state = SessionState::Failed(failure.step);
                let step = failure.step;
                (Err(failure), Some(step))
            }
        };
        self.log.push(TransitionEvent {
            role: self.role,
            op,
            from,
            to: self.state,
            received_len,
            emitted_len: out.as_ref().ok().and_then(&emitted),
            counters_delta: self.counters - before,
            failure,
        });
        out
    }

    /// Feeds one received message to whichever ladder step the session expects.
    pub fn handle(&mut self, bytes: &[u8]) -> Result<Option<Outbound>, Failure> {
        match (self.role, self.state) {
            (Role::Responder, SessionState::Idle) => self.responder_on_msg1(bytes).map(Some),
            (Role::Initiator, SessionState::Sent1) => self.initiator_on_msg2(bytes).map(Some),
            (Role::Responder, SessionState::Sent2) => self.responder_on_msg3(bytes).map(|()| None),
            // everything else is out of order; let the step wrapper record it
            (Role::Initiator, _) => self.initiator_on_msg2(bytes).map(Some),
            (Role::Responder, _) => self.responder_on_msg3(bytes).map(|()| None),
        }
    }

    fn random_cookie(&mut self) -> [u8; 8] {
        loop {
            let c: [u8; 8] = self.rng.gen();
            if c != [0; 8] {
                return c;
            }
        }
    }

    fn random_nonce(&mut self) -> Vec<u8> {
        let mut n = vec![0u8; self.config.nonce_len];
        self.rng.fill_bytes(&mut n);
        n
    }

    fn own_id_body(&self) -> IdBody {
        IdBody { id_type: ID_FQDN, identity: self.config.identity.as_bytes().to_vec() }
    }

    fn own_certificate(&self) -> Result<Certificate, Failure> {
        if self.improved() {
            self.creds.device.get_certificate().map_err(device_failure)
        } else {
            self.creds
                .file
                .as_ref()
                .map(|f| f.certificate.clone())
                .ok_or_else(|| Failure::new(FailureStep::NoCredential, "no certificate file"))
        }
    }

    fn sign(&mut self, data: &[u8]) -> Result<Signature, Failure> {
        if self.improved() {
            let sig = self.creds.device.sign(data).map_err(device_failure)?;
            self.counters.device_signatures += 1;
            Ok(sig)
        } else {
            let file = self
                .creds
                .file
                .as_ref()
                .ok_or_else(|| Failure::new(FailureStep::NoCredential, "no certificate file"))?;
            self.counters.host_signatures += 1;
            Ok(crypto::sign(&file.private_key, data))
        }
    }

    fn seal(&self, sel: KeySelector, data: &[u8]) -> Result<Vec<u8>, Failure> {
        self.creds.device.encrypt(sel, data).map_err(device_failure)
    }

    fn open(&mut self, sel: KeySelector, data: &[u8], step: FailureStep) -> Result<Vec<u8>, Failure> {
        match self.creds.device.decrypt(sel, data) {
            Ok(plain) => Ok(plain),
            Err(TokenError::DeviceAbsent) => Err(device_failure(TokenError::DeviceAbsent)),
            Err(e) => {
                self.counters.decrypt_failures += 1;
                Err(Failure::new(step, e.to_string()))
            }
        }
    }

    fn generate_dh(&mut self) {
        let (x, gx) = self.config.group.keypair(&mut self.rng);
        self.dh = Some(x);
        self.own_gx = gx;
        self.counters.dh_ops += 1;
        self.counters.modexps += 1;
    }

    fn agree(&mut self) -> Result<Vec<u8>, Failure> {
        let secret = self.dh.as_ref().expect("DH keypair generated before agreement");
        let gxy = self
            .config
            .group
            .shared(secret, &self.peer_gx)
            .map_err(|e| Failure::new(FailureStep::WeakPublicValue, e.to_string()))?;
        self.counters.modexps += 1;
        Ok(gxy)
    }

    fn transcript(&self) -> Transcript<'_> {
        let (gx_i, gx_r) = match self.role {
            Role::Initiator => (&self.own_gx, &self.peer_gx),
            Role::Responder => (&self.peer_gx, &self.own_gx),
        };
        Transcript {
            gx_i,
            gx_r,
            cky_i: &self.cky_i,
            cky_r: &self.cky_r,
            sa_i: &self.sa_i,
            sa_r: &self.sa_r,
            id_i: &self.id_i,
            id_r: &self.id_r,
        }
    }

    fn header(&self) -> IsakmpHeader {
        IsakmpHeader::aggressive(self.cky_i, self.cky_r)
    }

    // Serializes the message; for improved, `core` is sealed as one chain
    // under the own session key behind an optional UMx DEV payload.
    fn emit(&mut self, core: Vec<PayloadBody>, with_dev: bool) -> Result<Outbound, Failure> {
        let header = self.header();
        if !self.improved() {
            let msg = IsakmpMessage::plain(header, core);
            let (bytes, spans) = codec::encode_message_with_spans(&msg).map_err(malformed)?;
            return Ok(Outbound { bytes, spans: spans.into_iter().map(|s| clear_span(&s)).collect() });
        }

        let first = core.first().expect("non-empty chain").payload_type();
        let chain = codec::link_payloads(core, 0);
        let (plain, chain_spans) = codec::encode_chain_with_spans(&chain).map_err(malformed)?;
        let blob = self.seal(KeySelector::OwnSession, &plain)?;
        let mut clear = Vec::new();
        if with_dev {
            let serial = self.creds.device.get_serial().map_err(device_failure)?;
            let sealed_serial = self.seal(KeySelector::Key1, serial.as_bytes())?;
            let dev = DevPayloadBody::from_sealed(&sealed_serial).ok_or_else(|| malformed("short DEV box"))?;
            clear.push(PayloadBody::Dev(dev));
        }
        let blob_len = blob.len();
        let msg = IsakmpMessage::sealed(header, clear, first, blob);
        let (bytes, spans) = codec::encode_message_with_spans(&msg).map_err(malformed)?;
        let blob_start = bytes.len() - blob_len;
        let mut out: Vec<WireSpan> = spans.iter().map(clear_span).collect();
        out.extend(chain_spans.iter().map(|s| WireSpan {
            payload_type: s.payload_type,
            body_offset: blob_start + NONCE_LEN + s.body_offset,
            body_len: s.body_len,
            sealed: true,
        }));
        Ok(Outbound { bytes, spans: out })
    }

    // CERT and SIG bodies: clear in baseline, sealed under kdf_serial(own) in improved.
    fn identity_payloads(&mut self, hash: &[u8]) -> Result<[PayloadBody; 2], Failure> {
        let cert = self.own_certificate()?;
        let sig = self.sign(hash)?;
        if self.improved() {
            Ok([
                PayloadBody::Cert(CertBody {
                    encoding: CERT_ENCODING_SEALED,
                    data: self.seal(KeySelector::OwnSerial, cert.encoded())?,
                }),
                PayloadBody::Sig(SigBody { signature: self.seal(KeySelector::OwnSerial, sig.as_bytes())? }),
            ])
        } else {
            Ok([
                PayloadBody::Cert(CertBody { encoding: CERT_ENCODING_SELF_CONTAINED, data: cert.encoded().to_vec() }),
                PayloadBody::Sig(SigBody { signature: sig.as_bytes().to_vec() }),
            ])
        }
    }

    // Recovers and checks the peer's certificate and signature bytes.
    fn peer_identity_material(&mut self, cert: &PayloadBody, sig: &PayloadBody) -> Result<(Certificate, Vec<u8>), Failure> {
        let (PayloadBody::Cert(cert), PayloadBody::Sig(sig)) = (cert, sig) else {
            return Err(malformed("expected CERT and SIG"));
        };
        let (cert_bytes, sig_bytes) = if self.improved() {
            let serial = self.peer_serial.expect("peer serial known before identity payloads");
            if cert.encoding != CERT_ENCODING_SEALED {
                return Err(Failure::new(FailureStep::Cert, "certificate not sealed"));
            }
            let c = self.open(KeySelector::PeerSerial(serial), &cert.data, FailureStep::Cert)?;
            let s = self.open(KeySelector::PeerSerial(serial), &sig.signature, FailureStep::Sig)?;
            (c, s)
        } else {
            if cert.encoding != CERT_ENCODING_SELF_CONTAINED {
                return Err(Failure::new(FailureStep::CertMismatch, "unsupported certificate encoding"));
            }
            (cert.data.clone(), sig.signature.clone())
        };
        let certificate =
            Certificate::decode(&cert_bytes).map_err(|e| Failure::new(FailureStep::CertMismatch, e.to_string()))?;
        let expected = self.peer_identity.as_deref().unwrap_or_default();
        if certificate.subject() != expected {
            return Err(Failure::new(
                FailureStep::CertMismatch,
                format!("certificate subject `{}` does not match identity `{expected}`", certificate.subject()),
            ));
        }
        if let Some(serial) = self.peer_serial {
            if certificate.serial_binding() != serial {
                return Err(Failure::new(FailureStep::CertMismatch, "certificate bound to another device"));
            }
        }
        Ok((certificate, sig_bytes))
    }

    fn verify_peer(&mut self, cert: &Certificate, hash: &[u8], sig: &[u8]) -> Result<(), Failure> {
        self.counters.sig_verifies += 1;
        let ok = Signature::from_slice(sig).is_some_and(|s| crypto::verify(cert.public_key(), hash, &s));
        if ok {
            Ok(())
        } else {
            Err(Failure::new(FailureStep::SigVerify, "signature does not verify over the exchange hash"))
        }
    }

    fn record_peer_id(&mut self, body: &PayloadBody) -> Result<Vec<u8>, Failure> {
        let PayloadBody::Id(id) = body else {
            return Err(malformed("expected ID"));
        };
        self.peer_identity = Some(String::from_utf8_lossy(&id.identity).into_owned());
        Ok(body.to_bytes())
    }

    /// Builds message 1. Improved principals without a device stop here and emit nothing.
    pub fn initiator_start(&mut self) -> Result<Outbound, Failure> {
        self.step("initiator_start", Expect::Initiator(SessionState::Idle), None, |s| {
            if s.improved() {
                s.creds.device.get_serial().map_err(device_failure)?;
            }
            s.cky_i = s.random_cookie();
            s.own_nonce = s.random_nonce();
            s.generate_dh();
            s.sa_i = codec::DEFAULT_SA.to_vec();
            let id = s.own_id_body();
            s.id_i = PayloadBody::Id(id.clone()).to_bytes();
            let core = vec![
                PayloadBody::Sa(SaBody { proposal: s.sa_i.clone() }),
                PayloadBody::Ke(KeBody { public_value: s.own_gx.clone() }),
                PayloadBody::Nonce(NonceBody { nonce: s.own_nonce.clone() }),
                PayloadBody::Id(id),
            ];
            Ok((s.emit(core, true)?, SessionState::Sent1))
        }, |o| Some(o.bytes.len()))
    }

    /// Processes message 1 and builds message 2.
    pub fn responder_on_msg1(&mut self, bytes: &[u8]) -> Result<Outbound, Failure> {
        self.step("responder_on_msg1", Expect::Responder(SessionState::Idle), Some(bytes.len()), |s| {
            let before = s.counters.dh_ops;
            let r = s.admit_msg1(bytes);
            if r.is_err() && s.counters.dh_ops == before {
                s.counters.messages_rejected_pre_dh += 1;
            }
            r.map(|o| (o, SessionState::Sent2))
        }, |o| Some(o.bytes.len()))
    }

    fn admit_msg1(&mut self, bytes: &[u8]) -> Result<Outbound, Failure> {
        if self.improved() && self.config.gate == GateMode::Disabled {
            self.generate_dh();
        }
        let msg = codec::decode_message(bytes).map_err(malformed)?;
        if msg.header.responder_cookie != [0; 8] {
            return Err(malformed("message 1 carries a responder cookie"));
        }
        let core = if self.improved() {
            if !self.creds.device.is_present() {
                return Err(device_failure(TokenError::DeviceAbsent));
            }
            let Some(PayloadBody::Dev(dev)) = msg.payloads.first().map(|p| &p.body) else {
                return Err(Failure::new(FailureStep::BadDevPayload, "no DEV payload"));
            };
            let serial = self.open(KeySelector::Key1, &dev.sealed(), FailureStep::BadDevPayload)?;
            let serial = Serial::from_slice(&serial)
                .map_err(|_| Failure::new(FailureStep::BadDevPayload, "devinfo record is not 7 bytes"))?;
            if let Some(cache) = &self.replay {
                if !cache.check_and_insert(dev.nonce) {
                    return Err(Failure::new(FailureStep::Replay, "DEV nonce already seen"));
                }
            }
            self.peer_serial = Some(serial);
            let (Some(blob), Some(first)) = (msg.sealed_chain.as_ref(), msg.first_sealed_type()) else {
                return Err(malformed("no sealed chain"));
            };
            let plain = self.open(KeySelector::PeerSession(serial), blob, FailureStep::Chain)?;
            codec::decode_chain(first, &plain).map_err(malformed)?
        } else {
            if msg.sealed_chain.is_some() {
                return Err(malformed("unexpected encrypted message"));
            }
            msg.payloads
        };
        expect_types(&core, &[PayloadType::Sa, PayloadType::Ke, PayloadType::Nonce, PayloadType::Id])?;
        let [PayloadBody::Sa(sa), PayloadBody::Ke(ke), PayloadBody::Nonce(nonce), id] =
            [&core[0].body, &core[1].body, &core[2].body, &core[3].body]
        else {
            unreachable!("types checked above");
        };
        self.config
            .group
            .parse_public(&ke.public_value)
            .map_err(|e| Failure::new(FailureStep::WeakPublicValue, e.to_string()))?;

        // admission passed: from here on the responder spends DH work
        self.cky_i = msg.header.initiator_cookie;
        self.sa_i = sa.proposal.clone();
        self.sa_r = sa.proposal.clone();
        self.peer_gx = ke.public_value.clone();
        self.peer_nonce = nonce.nonce.clone();
        self.id_i = self.record_peer_id(id)?;
        if self.dh.is_none() {
            self.generate_dh();
        }
        let gxy = self.agree()?;
        self.cky_r = self.random_cookie();
        self.own_nonce = self.random_nonce();
        let own_id = self.own_id_body();
        self.id_r = PayloadBody::Id(own_id.clone()).to_bytes();
        let skeyid =
            crypto::derive_skeyid(&self.config.suite, &self.peer_nonce, &self.own_nonce, &gxy, &self.cky_i, &self.cky_r);
        let hash_r = crypto::compute_hash_r(&self.config.suite, &skeyid, &self.transcript());
        self.skeyid = Some(skeyid);
        let [cert, sig] = self.identity_payloads(&hash_r)?;
        let core = vec![
            PayloadBody::Sa(SaBody { proposal: self.sa_r.clone() }),
            PayloadBody::Ke(KeBody { public_value: self.own_gx.clone() }),
            PayloadBody::Nonce(NonceBody { nonce: self.own_nonce.clone() }),
            PayloadBody::Id(own_id),
            cert,
            sig,
        ];
        self.emit(core, true)
    }

    /// Processes message 2 and builds message 3; the initiator is established on success.
    pub fn initiator_on_msg2(&mut self, bytes: &[u8]) -> Result<Outbound, Failure> {
        self.step("initiator_on_msg2", Expect::Initiator(SessionState::Sent1), Some(bytes.len()), |s| {
            s.process_msg2(bytes).map(|o| (o, SessionState::Established))
        }, |o| Some(o.bytes.len()))
    }

    fn process_msg2(&mut self, bytes: &[u8]) -> Result<Outbound, Failure> {
        let msg = codec::decode_message(bytes).map_err(malformed)?;
        if msg.header.initiator_cookie != self.cky_i {
            return Err(Failure::new(FailureStep::CookieMismatch, "initiator cookie"));
        }
        if msg.header.responder_cookie == [0; 8] {
            return Err(malformed("message 2 lacks a responder cookie"));
        }
        let core = if self.improved() {
            let Some(PayloadBody::Dev(dev)) = msg.payloads.first().map(|p| &p.body) else {
                return Err(Failure::new(FailureStep::Umr, "no DEV payload"));
            };
            let serial = self.open(KeySelector::Key1, &dev.sealed(), FailureStep::Umr)?;
            let serial =
                Serial::from_slice(&serial).map_err(|_| Failure::new(FailureStep::Umr, "devinfo record is not 7 bytes"))?;
            self.peer_serial = Some(serial);
            let (Some(blob), Some(first)) = (msg.sealed_chain.as_ref(), msg.first_sealed_type()) else {
                return Err(malformed("no sealed chain"));
            };
            let plain = self.open(KeySelector::PeerSession(serial), blob, FailureStep::Chain)?;
            codec::decode_chain(first, &plain).map_err(malformed)?
        } else {
            if msg.sealed_chain.is_some() {
                return Err(malformed("unexpected encrypted message"));
            }
            msg.payloads
        };
        expect_types(
            &core,
            &[PayloadType::Sa, PayloadType::Ke, PayloadType::Nonce, PayloadType::Id, PayloadType::Cert, PayloadType::Sig],
        )?;
        let [PayloadBody::Sa(sa), PayloadBody::Ke(ke), PayloadBody::Nonce(nonce)] =
            [&core[0].body, &core[1].body, &core[2].body]
        else {
            unreachable!("types checked above");
        };
        self.cky_r = msg.header.responder_cookie;
        self.sa_r = sa.proposal.clone();
        self.peer_gx = ke.public_value.clone();
        self.peer_nonce = nonce.nonce.clone();
        self.id_r = self.record_peer_id(&core[3].body)?;
        let (cert, sig) = self.peer_identity_material(&core[4].body, &core[5].body)?;

        let gxy = self.agree()?;
        let skeyid =
            crypto::derive_skeyid(&self.config.suite, &self.own_nonce, &self.peer_nonce, &gxy, &self.cky_i, &self.cky_r);
        let hash_r = crypto::compute_hash_r(&self.config.suite, &skeyid, &self.transcript());
        self.verify_peer(&cert, &hash_r, &sig)?;
        let hash_i = crypto::compute_hash_i(&self.config.suite, &skeyid, &self.transcript());
        self.skeyid = Some(skeyid);
        let [cert, sig] = self.identity_payloads(&hash_i)?;
        self.emit(vec![cert, sig], false)
    }

    /// Processes message 3; the responder is established on success.
    pub fn responder_on_msg3(&mut self, bytes: &[u8]) -> Result<(), Failure> {
        self.step("responder_on_msg3", Expect::Responder(SessionState::Sent2), Some(bytes.len()), |s| {
            s.process_msg3(bytes).map(|()| ((), SessionState::Established))
        }, |_| None)
    }

    fn process_msg3(&mut self, bytes: &[u8]) -> Result<(), Failure> {
        let msg = codec::decode_message(bytes).map_err(malformed)?;
        if msg.header.initiator_cookie != self.cky_i || msg.header.responder_cookie != self.cky_r {
            return Err(Failure::new(FailureStep::CookieMismatch, "cookie pair"));
        }
        let core = if self.improved() {
            let serial = self.peer_serial.expect("peer serial recorded at message 1");
            let (Some(blob), Some(first), true) =
                (msg.sealed_chain.as_ref(), msg.first_sealed_type(), msg.payloads.is_empty())
            else {
                return Err(malformed("message 3 must be one sealed chain"));
            };
            let plain = self.open(KeySelector::PeerSession(serial), blob, FailureStep::Chain)?;
            codec::decode_chain(first, &plain).map_err(malformed)?
        } else {
            if msg.sealed_chain.is_some() {
                return Err(malformed("unexpected encrypted message"));
            }
            msg.payloads
        };
        expect_types(&core, &[PayloadType::Cert, PayloadType::Sig])?;
        let (cert, sig) = self.peer_identity_material(&core[0].body, &core[1].body)?;
        let skeyid = self.skeyid.clone().expect("skeyid derived at message 1");
        let hash_i = crypto::compute_hash_i(&self.config.suite, &skeyid, &self.transcript());
        self.verify_peer(&cert, &hash_i, &sig)
    }
}

fn clear_span(s: &PayloadSpan) -> WireSpan {
    WireSpan { payload_type: s.payload_type, body_offset: s.body_offset, body_len: s.body_len, sealed: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SymmetricKey;
    use crate::token::{create_token, DeploymentConfig, Fleet};

    struct Pair {
        init: HandshakeSession,
        resp: HandshakeSession,
    }

    fn creds(fleet: &mut Fleet, serial: &[u8; 7], name: &str, rng: &mut ChaCha20Rng) -> Credentials {
        let token = fleet.issue(serial, name, rng).unwrap();
        Credentials {
            device: DeviceSlot::present(Arc::new(token)),
            file: Some(Arc::new(FileCredential::generate(name, SignatureSchemeId::Ed25519, rng))),
        }
    }

    fn pair(variant: Variant, seed: u64) -> Pair {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut fleet = Fleet::new(DeploymentConfig::new(SymmetricKey::new([0x42; 32])));
        let a = creds(&mut fleet, b"ALICE01", "alice", &mut rng);
        let b = creds(&mut fleet, b"BOB0001", "bob", &mut rng);
        Pair {
            init: HandshakeSession::initiator(SessionConfig::new(variant, "alice"), a, rng.gen()),
            resp: HandshakeSession::responder(
                SessionConfig::new(variant, "bob"),
                b,
                Some(Arc::new(ReplayCache::default())),
                rng.gen(),
            ),
        }
    }

    fn run(p: &mut Pair) -> (Outbound, Outbound, Outbound) {
        let m1 = p.init.initiator_start().unwrap();
        let m2 = p.resp.responder_on_msg1(&m1.bytes).unwrap();
        let m3 = p.init.initiator_on_msg2(&m2.bytes).unwrap();
        p.resp.responder_on_msg3(&m3.bytes).unwrap();
        (m1, m2, m3)
    }

    fn types(bytes: &[u8]) -> Vec<u8> {
        let m = codec::decode_message(bytes).unwrap();
        m.payloads.iter().map(|p| p.payload_type().code()).collect()
    }

    #[test]
    fn honest_runs_establish_with_equal_keys() {
        for variant in Variant::ALL {
            let mut p = pair(variant, 1);
            run(&mut p);
            assert_eq!(p.init.state(), SessionState::Established);
            assert_eq!(p.resp.state(), SessionState::Established);
            assert_eq!(p.init.skeyid(), p.resp.skeyid());
            assert!(p.init.skeyid().is_some());
        }
    }

    #[test]
    fn baseline_message_shapes() {
        let mut p = pair(Variant::Baseline, 2);
        let (m1, m2, m3) = run(&mut p);
        assert_eq!(types(&m1.bytes), vec![1, 4, 10, 5]);
        assert_eq!(types(&m2.bytes), vec![1, 4, 10, 5, 6, 9]);
        assert_eq!(types(&m3.bytes), vec![6, 9]);
    }

    #[test]
    fn improved_message_shapes() {
        let mut p = pair(Variant::Improved, 3);
        let (m1, m2, m3) = run(&mut p);
        assert_eq!(m1.bytes[16], 55);
        assert_eq!(types(&m1.bytes), vec![55]);
        assert_eq!(types(&m2.bytes), vec![55]);
        assert!(types(&m3.bytes).is_empty());
        for m in [&m1, &m2, &m3] {
            assert!(codec::decode_message(&m.bytes).unwrap().header.encrypted());
        }
        assert_eq!(p.resp.peer_serial(), Some(Serial::new(*b"ALICE01")));
        assert_eq!(p.init.peer_serial(), Some(Serial::new(*b"BOB0001")));
    }

    #[test]
    fn improved_start_without_device_emits_nothing() {
        let cfg = SessionConfig::new(Variant::Improved, "alice");
        let mut s = HandshakeSession::initiator(cfg, Credentials::default(), [0; 32]);
        let err = s.initiator_start().unwrap_err();
        assert_eq!(err.step, FailureStep::NoDevice);
        assert_eq!(s.state(), SessionState::Failed(FailureStep::NoDevice));
        assert_eq!(s.counters().dh_ops, 0);
    }

    #[test]
    fn forged_dev_rejected_before_dh() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let rogue_deploy = DeploymentConfig::new(SymmetricKey::random(&mut rng));
        let rogue = create_token(b"EVIL000", &rogue_deploy, "mallory", &mut rng).unwrap();
        let mut attacker = HandshakeSession::initiator(
            SessionConfig::new(Variant::Improved, "mallory"),
            Credentials { device: DeviceSlot::present(Arc::new(rogue)), file: None },
            rng.gen(),
        );
        let forged = attacker.initiator_start().unwrap();
        let mut p = pair(Variant::Improved, 4);
        let err = p.resp.responder_on_msg1(&forged.bytes).unwrap_err();
        assert_eq!(err.step, FailureStep::BadDevPayload);
        let c = p.resp.counters();
        assert_eq!((c.dh_ops, c.modexps, c.messages_rejected_pre_dh, c.decrypt_failures), (0, 0, 1, 1));
    }

    #[test]
    fn baseline_responder_spends_dh_on_any_wellformed_msg1() {
        let mut p = pair(Variant::Baseline, 5);
        let m1 = p.init.initiator_start().unwrap();
        p.resp.responder_on_msg1(&m1.bytes).unwrap();
        assert_eq!(p.resp.counters().dh_ops, 1);
        assert_eq!(p.resp.counters().modexps, 2);
    }

    #[test]
    fn disabled_gate_spends_dh_before_checking() {
        let mut p = pair(Variant::Improved, 6);
        p.resp.config.gate = GateMode::Disabled;
        let err = p.resp.responder_on_msg1(b"garbage").unwrap_err();
        assert_eq!(err.step, FailureStep::Malformed);
        assert_eq!(p.resp.counters().dh_ops, 1);
        assert_eq!(p.resp.counters().messages_rejected_pre_dh, 0);
    }

    #[test]
    fn replayed_msg1_rejected_pre_dh() {
        let mut p = pair(Variant::Improved, 7);
        let m1 = p.init.initiator_start().unwrap();
        p.resp.responder_on_msg1(&m1.bytes).unwrap();
        let cache = p.resp.replay.clone();
        let mut fresh = pair(Variant::Improved, 7).resp;
        fresh.replay = cache;
        let err = fresh.responder_on_msg1(&m1.bytes).unwrap_err();
        assert_eq!(err.step, FailureStep::Replay);
        assert_eq!(fresh.counters().dh_ops, 0);
    }

    #[test]
    fn replay_cache_evicts_oldest() {
        let cache = ReplayCache::new(2);
        assert!(cache.check_and_insert([1; 16]));
        assert!(!cache.check_and_insert([1; 16]));
        assert!(cache.check_and_insert([2; 16]));
        assert!(cache.check_and_insert([3; 16]));
        assert_eq!(cache.len(), 2);
        assert!(cache.check_and_insert([1; 16]), "oldest entry was evicted");
    }

    #[test]
    fn tampered_ke_in_msg2() {
        for variant in Variant::ALL {
            let mut p = pair(variant, 8);
            let m1 = p.init.initiator_start().unwrap();
            let mut m2 = p.resp.responder_on_msg1(&m1.bytes).unwrap();
            let ke = m2.spans.iter().find(|s| s.payload_type == PayloadType::Ke).unwrap();
            m2.bytes[ke.body_offset + 2] ^= 0x01;
            let err = p.init.initiator_on_msg2(&m2.bytes).unwrap_err();
            match variant {
                Variant::Improved => {
                    assert_eq!(err.step, FailureStep::Chain);
                    assert_eq!(p.init.counters().sig_verifies, 0);
                }
                Variant::Baseline => {
                    assert_eq!(err.step, FailureStep::SigVerify);
                    assert_eq!(p.init.counters().sig_verifies, 1);
                    assert!(p.init.counters().dh_ops >= 1);
                }
            }
        }
    }

    #[test]
    fn out_of_order_messages_fail() {
        let mut p = pair(Variant::Baseline, 9);
        let m1 = p.init.initiator_start().unwrap();
        // initiator fed its own message 1 as if it were message 2
        let err = p.init.initiator_on_msg2(&m1.bytes).unwrap_err();
        assert!(matches!(p.init.state(), SessionState::Failed(_)), "{err}");
        let mut p = pair(Variant::Baseline, 9);
        let err = p.resp.responder_on_msg3(b"anything").unwrap_err();
        assert_eq!(err.step, FailureStep::OutOfOrder);
        assert_eq!(p.resp.state(), SessionState::Failed(FailureStep::OutOfOrder));
    }

    #[test]
    fn terminal_states_absorb() {
        let mut p = pair(Variant::Improved, 10);
        let (m1, _, _) = run(&mut p);
        assert!(p.resp.handle(&m1.bytes).is_err());
        assert_eq!(p.resp.state(), SessionState::Established);
    }

    #[test]
    fn transition_log_records_each_step() {
        let mut p = pair(Variant::Improved, 11);
        run(&mut p);
        let ops: Vec<_> = p.init.log().iter().map(|e| e.op).collect();
        assert_eq!(ops, ["initiator_start", "initiator_on_msg2"]);
        let total = p.resp.log().iter().fold(Counters::default(), |mut acc, e| {
            acc += e.counters_delta;
            acc
        });
        assert_eq!(total, p.resp.counters());
    }

    #[test]
    fn responder_without_device_cannot_take_part() {
        let mut p = pair(Variant::Improved, 12);
        p.resp.creds.device = DeviceSlot::absent();
        let m1 = p.init.initiator_start().unwrap();
        let err = p.resp.responder_on_msg1(&m1.bytes).unwrap_err();
        assert_eq!(err.step, FailureStep::NoDevice);
        assert_eq!(p.resp.counters().dh_ops, 0);
    }
    // Every sequence of up to four messages drawn from a real ladder, a
    // foreign ladder and junk. Only the exact ladder order may establish.
    #[test]
    fn exhaustive_message_permutations() {
        for variant in Variant::ALL {
            let (m1, m2, m3) = run(&mut pair(variant, 20));
            let (f1, f2, _) = run(&mut pair(variant, 21));
            let alphabet = [m1.bytes, m2.bytes, m3.bytes, f1.bytes, f2.bytes, vec![0u8; 40]];
            let mut seqs: Vec<Vec<usize>> = vec![vec![]];
            for len in 1..=4 {
                let prev: Vec<_> = seqs.iter().filter(|s| s.len() == len - 1).cloned().collect();
                for s in prev {
                    for sym in 0..alphabet.len() {
                        let mut t = s.clone();
                        t.push(sym);
                        seqs.push(t);
                    }
                }
            }
            for seq in &seqs {
                let mut p = pair(variant, 20);
                p.init.initiator_start().unwrap();
                for &sym in seq {
                    let _ = p.resp.handle(&alphabet[sym]);
                    let _ = p.init.handle(&alphabet[sym]);
                }
                let resp_ok = seq.len() >= 2 && seq[0] == 0 && seq[1] == 2;
                let init_ok = seq.first() == Some(&1);
                assert_eq!(p.resp.state() == SessionState::Established, resp_ok, "{variant} responder {seq:?}");
                assert_eq!(p.init.state() == SessionState::Established, init_ok, "{variant} initiator {seq:?}");
                for s in [&p.init, &p.resp] {
                    if s.state() == SessionState::Established {
                        assert!(s.skeyid().is_some() && s.counters().sig_verifies == 1);
                        let path: Vec<_> = s.log().iter().filter(|e| e.failure.is_none()).map(|e| e.to).collect();
                        let want = match s.role() {
                            Role::Initiator => vec![SessionState::Sent1, SessionState::Established],
                            Role::Responder => vec![SessionState::Sent2, SessionState::Established],
                        };
                        assert_eq!(path, want);
                    }
                }
            }
        }
    }
}
