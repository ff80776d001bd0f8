//! Emulated security USB key.
//!
//! A token holds a 7-byte serial, the deployment-wide `key1`, a signing key and
//! a self-contained certificate in manager regions the host cannot touch. The
//! host only ever sees the results of on-device operations.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, CipherId, CryptoError, PrivateKey, PublicKey, Serial, Signature, SignatureSchemeId, SymmetricKey,
    PUBLIC_KEY_LEN, SERIAL_LEN, SIGNATURE_LEN,
};

const VIRTUAL_CD_IMAGE: &[u8] = b"TOKENIKE-VCD\0host-driver-image-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("serial must be exactly {SERIAL_LEN} bytes, got {0}")]
    InvalidSerialLength(usize),
    #[error("serial {0} already issued in this deployment")]
    DuplicateSerial(Serial),
    #[error("no security device present")]
    DeviceAbsent,
    #[error("authentication failed")]
    AuthFailure,
    #[error("ciphertext of {0} bytes is too short")]
    MalformedCiphertext(usize),
    #[error("permission denied: {op} on {region:?}")]
    PermissionDenied { region: RegionId, op: &'static str },
    #[error("input must not be empty")]
    EmptyInput,
    #[error("key selector {0:?} not valid for this operation")]
    InvalidSelector(KeySelector),
}

impl From<CryptoError> for TokenError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::MalformedCiphertext(n) => TokenError::MalformedCiphertext(n),
            CryptoError::InvalidSerialLength(n) => TokenError::InvalidSerialLength(n),
            _ => TokenError::AuthFailure,
        }
    }
}

/// Provisioning parameters shared by every token of one deployment.
#[derive(Clone, Debug)]
pub struct DeploymentConfig {
    pub key1: SymmetricKey,
    pub signature_scheme: SignatureSchemeId,
    pub cipher: CipherId,
}

impl DeploymentConfig {
    pub fn new(key1: SymmetricKey) -> Self {
        DeploymentConfig {
            key1,
            signature_scheme: SignatureSchemeId::default(),
            cipher: CipherId::default(),
        }
    }

    pub fn from_ids(key1_hex: &str, signature_scheme: &str, cipher: &str) -> Result<Self, CryptoError> {
        Ok(DeploymentConfig {
            key1: SymmetricKey::from_hex(key1_hex)?,
            signature_scheme: signature_scheme.parse()?,
            cipher: cipher.parse()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionId {
    ManagerPrivateKey,
    ManagerAlgorithm,
    ManagerCertificate,
    VirtualCd,
    UserData,
}

impl RegionId {
    pub const ALL: [RegionId; 5] = [
        RegionId::ManagerPrivateKey,
        RegionId::ManagerAlgorithm,
        RegionId::ManagerCertificate,
        RegionId::VirtualCd,
        RegionId::UserData,
    ];

    pub fn policy(&self) -> AccessPolicy {
        match self {
            RegionId::ManagerPrivateKey | RegionId::ManagerAlgorithm | RegionId::ManagerCertificate => {
                AccessPolicy { host_read: false, host_write: false }
            }
            RegionId::VirtualCd => AccessPolicy { host_read: true, host_write: false },
            RegionId::UserData => AccessPolicy { host_read: true, host_write: true },
        }
    }
}

/// Host access rights to a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessPolicy {
    pub host_read: bool,
    pub host_write: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionOp<'a> {
    Read,
    Write(&'a [u8]),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionReply {
    Data(Vec<u8>),
    Ack,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertificateError {
    #[error("malformed certificate encoding")]
    Malformed,
    #[error("certificate self-signature does not verify")]
    BadSelfSignature,
}

/// Self-contained certificate: subject, public key and issuing serial, signed
/// by the matching private key.
///
/// Encoding: `"TIKC" | 0x01 | subject_len u16 | subject | public_key[32] |
/// serial[7] | signature[64]`, the signature covering every preceding byte.
#[derive(Clone, PartialEq, Eq)]
pub struct Certificate {
    subject: String,
    public_key: PublicKey,
    serial_binding: Serial,
    encoded: Vec<u8>,
}

const CERT_MAGIC: &[u8; 4] = b"TIKC";
const CERT_VERSION: u8 = 1;

impl Certificate {
    pub fn issue(subject: &str, key: &PrivateKey, serial: Serial) -> Self {
        let public_key = key.public_key();
        let mut encoded = Vec::with_capacity(7 + subject.len() + PUBLIC_KEY_LEN + SERIAL_LEN + SIGNATURE_LEN);
        encoded.extend_from_slice(CERT_MAGIC);
        encoded.push(CERT_VERSION);
        encoded.extend_from_slice(&(subject.len() as u16).to_be_bytes());
        encoded.extend_from_slice(subject.as_bytes());
        encoded.extend_from_slice(public_key.as_bytes());
        encoded.extend_from_slice(serial.as_bytes());
        let sig = crypto::sign(key, &encoded);
        encoded.extend_from_slice(sig.as_bytes());
        Certificate {
            subject: subject.to_string(),
            public_key,
            serial_binding: serial,
            encoded,
        }
    }

    /// Parses an encoding and checks its self-signature.
    pub fn decode(bytes: &[u8]) -> Result<Self, CertificateError> {
        let rest = bytes.strip_prefix(CERT_MAGIC.as_slice()).ok_or(CertificateError::Malformed)?;
        let (&version, rest) = rest.split_first().ok_or(CertificateError::Malformed)?;
        if version != CERT_VERSION || rest.len() < 2 {
            return Err(CertificateError::Malformed);
        }
        let subject_len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
        let rest = &rest[2..];
        if rest.len() != subject_len + PUBLIC_KEY_LEN + SERIAL_LEN + SIGNATURE_LEN {
            return Err(CertificateError::Malformed);
        }
        let subject = std::str::from_utf8(&rest[..subject_len]).map_err(|_| CertificateError::Malformed)?;
        let rest = &rest[subject_len..];
        let public_key = PublicKey::from_slice(&rest[..PUBLIC_KEY_LEN]).ok_or(CertificateError::Malformed)?;
        let serial = Serial::from_slice(&rest[PUBLIC_KEY_LEN..PUBLIC_KEY_LEN + SERIAL_LEN])
            .map_err(|_| CertificateError::Malformed)?;
        let sig = Signature::from_slice(&rest[PUBLIC_KEY_LEN + SERIAL_LEN..]).ok_or(CertificateError::Malformed)?;
        let signed_len = bytes.len() - SIGNATURE_LEN;
        if !crypto::verify(&public_key, &bytes[..signed_len], &sig) {
            return Err(CertificateError::BadSelfSignature);
        }
        Ok(Certificate {
            subject: subject.to_string(),
            public_key,
            serial_binding: serial,
            encoded: bytes.to_vec(),
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn serial_binding(&self) -> Serial {
        self.serial_binding
    }

    pub fn encoded(&self) -> &[u8] {
        &self.encoded
    }
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Certificate")
            .field("subject", &self.subject)
            .field("serial_binding", &self.serial_binding)
            .finish_non_exhaustive()
    }
}

/// Which on-device key an encrypt/decrypt call uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySelector {
    /// The fleet-wide admission key.
    Key1,
    /// kdf_serial(own serial).
    OwnSerial,
    /// kdf_serial(peer serial); decrypt only.
    PeerSerial(Serial),
    /// kdf_session(key1, own serial).
    OwnSession,
    /// kdf_session(key1, peer serial); decrypt only.
    PeerSession(Serial),
}

struct TokenState {
    rng: ChaCha20Rng,
    regions: BTreeMap<RegionId, Vec<u8>>,
}

/// One emulated device. Operations are serialized through an internal lock.
pub struct SecurityToken {
    serial: Serial,
    key1: SymmetricKey,
    cipher: CipherId,
    private_key: PrivateKey,
    certificate: Certificate,
    state: Mutex<TokenState>,
}

/// Provisions a token: fresh keypair, self-contained certificate, regions per policy.
pub fn create_token<R: RngCore + CryptoRng>(
    serial: &[u8],
    deployment: &DeploymentConfig,
    subject: &str,
    rng: &mut R,
) -> Result<SecurityToken, TokenError> {
    let serial = Serial::from_slice(serial).map_err(|_| TokenError::InvalidSerialLength(serial.len()))?;
    let private_key = PrivateKey::generate(deployment.signature_scheme, rng);
    let certificate = Certificate::issue(subject, &private_key, serial);

    let mut regions = BTreeMap::new();
    regions.insert(RegionId::ManagerPrivateKey, private_key.secret_bytes().to_vec());
    regions.insert(RegionId::ManagerAlgorithm, vec![deployment.cipher.algorithm_byte()]);
    regions.insert(RegionId::ManagerCertificate, certificate.encoded().to_vec());
    regions.insert(RegionId::VirtualCd, VIRTUAL_CD_IMAGE.to_vec());
    regions.insert(RegionId::UserData, Vec::new());

    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);

    Ok(SecurityToken {
        serial,
        key1: deployment.key1.clone(),
        cipher: deployment.cipher,
        private_key,
        certificate,
        state: Mutex::new(TokenState {
            rng: ChaCha20Rng::from_seed(seed),
            regions,
        }),
    })
}

impl SecurityToken {
    fn lock(&self) -> MutexGuard<'_, TokenState> {
        // a poisoned lock only means another caller panicked mid-operation;
        // token state is never left half-written
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn serial(&self) -> Serial {
        self.serial
    }

    pub fn certificate(&self) -> Certificate {
        self.certificate.clone()
    }

    pub fn cipher(&self) -> CipherId {
        self.cipher
    }

    /// Algorithm identifier byte from the manager algorithm region.
    pub fn algorithm_id(&self) -> u8 {
        self.lock().regions[&RegionId::ManagerAlgorithm][0]
    }

    fn key_for(&self, sel: KeySelector) -> SymmetricKey {
        match sel {
            KeySelector::Key1 => self.key1.clone(),
            KeySelector::OwnSerial => crypto::serial_key(&self.serial),
            KeySelector::PeerSerial(s) => crypto::serial_key(&s),
            KeySelector::OwnSession => crypto::session_key(&self.key1, &self.serial),
            KeySelector::PeerSession(s) => crypto::session_key(&self.key1, &s),
        }
    }

    /// Seals `plaintext` under the selected on-device key with a fresh nonce.
    pub fn encrypt(&self, sel: KeySelector, plaintext: &[u8]) -> Result<Vec<u8>, TokenError> {
        if plaintext.is_empty() {
            return Err(TokenError::EmptyInput);
        }
        if matches!(sel, KeySelector::PeerSerial(_) | KeySelector::PeerSession(_)) {
            return Err(TokenError::InvalidSelector(sel));
        }
        let key = self.key_for(sel);
        let mut state = self.lock();
        Ok(self.cipher.seal(&key, &mut state.rng, plaintext))
    }

    /// Opens a sealed box; `AuthFailure` means the sender did not hold the key.
    pub fn decrypt(&self, sel: KeySelector, ciphertext: &[u8]) -> Result<Vec<u8>, TokenError> {
        let key = self.key_for(sel);
        let _serialized = self.lock();
        Ok(self.cipher.open(&key, ciphertext)?)
    }

    pub fn sign(&self, data: &[u8]) -> Result<Signature, TokenError> {
        if data.is_empty() {
            return Err(TokenError::EmptyInput);
        }
        let _serialized = self.lock();
        Ok(crypto::sign(&self.private_key, data))
    }

    pub fn region_access(&self, region: RegionId, op: RegionOp<'_>) -> Result<RegionReply, TokenError> {
        let policy = region.policy();
        let mut state = self.lock();
        match op {
            RegionOp::Read if policy.host_read => Ok(RegionReply::Data(state.regions[&region].clone())),
            RegionOp::Read => Err(TokenError::PermissionDenied { region, op: "read" }),
            RegionOp::Write(data) if policy.host_write => {
                state.regions.insert(region, data.to_vec());
                Ok(RegionReply::Ack)
            }
            RegionOp::Write(_) => Err(TokenError::PermissionDenied { region, op: "write" }),
        }
    }
}

impl fmt::Debug for SecurityToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecurityToken")
            .field("serial", &self.serial)
            .field("subject", &self.certificate.subject)
            .finish_non_exhaustive()
    }
}

/// A principal's device slot, possibly empty.
#[derive(Clone, Default)]
pub struct DeviceSlot(Option<Arc<SecurityToken>>);

impl DeviceSlot {
    pub fn present(token: Arc<SecurityToken>) -> Self {
        DeviceSlot(Some(token))
    }

    pub fn absent() -> Self {
        DeviceSlot(None)
    }

    pub fn is_present(&self) -> bool {
        self.0.is_some()
    }

    pub fn token(&self) -> Result<&SecurityToken, TokenError> {
        self.0.as_deref().ok_or(TokenError::DeviceAbsent)
    }

    pub fn get_serial(&self) -> Result<Serial, TokenError> {
        Ok(self.token()?.serial())
    }

    pub fn get_certificate(&self) -> Result<Certificate, TokenError> {
        Ok(self.token()?.certificate())
    }

    pub fn encrypt(&self, sel: KeySelector, plaintext: &[u8]) -> Result<Vec<u8>, TokenError> {
        self.token()?.encrypt(sel, plaintext)
    }

    pub fn decrypt(&self, sel: KeySelector, ciphertext: &[u8]) -> Result<Vec<u8>, TokenError> {
        self.token()?.decrypt(sel, ciphertext)
    }

    pub fn sign(&self, data: &[u8]) -> Result<Signature, TokenError> {
        self.token()?.sign(data)
    }
}

impl fmt::Debug for DeviceSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(t) => write!(f, "DeviceSlot({})", t.serial()),
            None => f.write_str("DeviceSlot(absent)"),
        }
    }
}

/// Issues tokens for one deployment and keeps serials unique.
#[derive(Debug)]
pub struct Fleet {
    deployment: DeploymentConfig,
    issued: HashSet<Serial>,
}

impl Fleet {
    pub fn new(deployment: DeploymentConfig) -> Self {
        Fleet { deployment, issued: HashSet::new() }
    }

    pub fn deployment(&self) -> &DeploymentConfig {
        &self.deployment
    }

    pub fn issue<R: RngCore + CryptoRng>(
        &mut self,
        serial: &[u8],
        subject: &str,
        rng: &mut R,
    ) -> Result<SecurityToken, TokenError> {
        let token = create_token(serial, &self.deployment, subject, rng)?;
        if !self.issued.insert(token.serial()) {
            return Err(TokenError::DuplicateSerial(token.serial()));
        }
        Ok(token)
    }
}
