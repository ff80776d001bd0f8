//! Cryptographic primitives and the phase-1 key derivations.
//!
//! Everything here is a pure function of its inputs except key and nonce
//! generation, which draw from a caller-supplied RNG so simulations stay
//! reproducible. Primitive identities are selected through [`Suite`]; the
//! single default suite is XChaCha20-Poly1305 / HMAC-SHA256 / Ed25519.

use std::fmt;
use std::str::FromStr;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

/// Symmetric key width for every cipher in the suite.
pub const KEY_LEN: usize = 32;
/// Nonce carried in front of every sealed box.
pub const NONCE_LEN: usize = 16;
/// AEAD tag width.
pub const TAG_LEN: usize = 16;
/// Bytes a sealed box adds on top of its plaintext.
pub const SEAL_OVERHEAD: usize = NONCE_LEN + TAG_LEN;
/// Device serial width (`dev_serial[7]`).
pub const SERIAL_LEN: usize = 7;

const SERIAL_KDF_SALT: &[u8] = b"tokenike/kdf-serial/v1";
const SESSION_KDF_SALT: &[u8] = b"tokenike/kdf-session/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("authentication failed")]
    AuthFailure,
    #[error("ciphertext of {0} bytes is too short to hold nonce and tag")]
    MalformedCiphertext(usize),
    #[error("weak or out-of-range Diffie-Hellman public value")]
    WeakPublicValue,
    #[error("serial must be exactly {SERIAL_LEN} bytes, got {0}")]
    InvalidSerialLength(usize),
    #[error("unknown primitive identifier `{0}`")]
    UnknownPrimitive(String),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
}

/// A 7-byte device serial number.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Serial([u8; SERIAL_LEN]);

impl Serial {
    pub fn new(bytes: [u8; SERIAL_LEN]) -> Self {
        Serial(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SERIAL_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidSerialLength(bytes.len()))?;
        Ok(Serial(arr))
    }

    pub fn as_bytes(&self) -> &[u8; SERIAL_LEN] {
        &self.0
    }
}

impl fmt::Display for Serial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.iter().all(|b| b.is_ascii_graphic()) {
            // graphic ASCII only, so this cannot fail
            f.write_str(std::str::from_utf8(&self.0).unwrap_or_default())
        } else {
            f.write_str(&hex::encode(self.0))
        }
    }
}

impl fmt::Debug for Serial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Serial({self})")
    }
}

/// Full-width symmetric key. `Debug` never prints the key bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s.trim()).map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        let arr: [u8; KEY_LEN] = raw
            .as_slice()
            .try_into()
            .map_err(|_| CryptoError::InvalidKey(format!("expected {KEY_LEN} bytes, got {}", raw.len())))?;
        Ok(SymmetricKey(arr))
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        SymmetricKey(k)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

macro_rules! primitive_id {
    ($name:ident { $($variant:ident => $id:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
        pub enum $name {
            #[default]
            $(#[serde(rename = $id)] $variant),+
        }

        impl $name {
            pub fn id(&self) -> &'static str {
                match self {
                    $($name::$variant => $id),+
                }
            }
        }

        impl FromStr for $name {
            type Err = CryptoError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($id => Ok($name::$variant),)+
                    other => Err(CryptoError::UnknownPrimitive(other.to_string())),
                }
            }
        }
    };
}

primitive_id!(CipherId { XChaCha20Poly1305 => "xchacha20poly1305" });
primitive_id!(PrfId { HmacSha256 => "hmac-sha256" });
primitive_id!(SignatureSchemeId { Ed25519 => "ed25519" });

impl CipherId {
    /// Algorithm identifier byte as stored in a token's algorithm region.
    pub fn algorithm_byte(&self) -> u8 {
        match self {
            CipherId::XChaCha20Poly1305 => 0x01,
        }
    }

    fn seal_with_nonce(&self, key: &SymmetricKey, nonce: &[u8; NONCE_LEN], aad: &[u8], pt: &[u8]) -> Vec<u8> {
        match self {
            CipherId::XChaCha20Poly1305 => {
                let cipher = XChaCha20Poly1305::new(key.as_bytes().into());
                cipher
                    .encrypt(&extend_nonce(nonce), Payload { msg: pt, aad })
                    .expect("xchacha20poly1305 encryption is infallible for in-memory buffers")
            }
        }
    }

    fn open_with_nonce(&self, key: &SymmetricKey, nonce: &[u8; NONCE_LEN], aad: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
        match self {
            CipherId::XChaCha20Poly1305 => {
                let cipher = XChaCha20Poly1305::new(key.as_bytes().into());
                cipher
                    .decrypt(&extend_nonce(nonce), Payload { msg: ct, aad })
                    .map_err(|_| CryptoError::AuthFailure)
            }
        }
    }

    /// Seals `pt` into `nonce || ciphertext || tag` with a fresh random nonce.
    pub fn seal<R: RngCore + CryptoRng>(&self, key: &SymmetricKey, rng: &mut R, pt: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut out = Vec::with_capacity(pt.len() + SEAL_OVERHEAD);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&self.seal_with_nonce(key, &nonce, &[], pt));
        out
    }

    /// Opens a box produced by [`CipherId::seal`], authenticating before returning.
    pub fn open(&self, key: &SymmetricKey, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if sealed.len() < SEAL_OVERHEAD {
            return Err(CryptoError::MalformedCiphertext(sealed.len()));
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        let nonce: &[u8; NONCE_LEN] = nonce.try_into().expect("split at NONCE_LEN");
        self.open_with_nonce(key, nonce, &[], ct)
    }
}

// The 16-byte wire nonce feeds HChaCha20; the trailing 8 bytes stay zero.
fn extend_nonce(nonce: &[u8; NONCE_LEN]) -> XNonce {
    let mut x = [0u8; 24];
    x[..NONCE_LEN].copy_from_slice(nonce);
    XNonce::from(x)
}

/// The primitive suite a deployment runs with. Its id is recorded in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Suite {
    pub cipher: CipherId,
    pub prf: PrfId,
    pub signature: SignatureSchemeId,
}

impl Suite {
    pub fn id(&self) -> String {
        format!("{}+{}+{}", self.cipher.id(), self.prf.id(), self.signature.id())
    }

    /// Parses `"default"` or a `cipher+prf+signature` triple.
    pub fn parse(s: &str) -> Result<Self, CryptoError> {
        if s == "default" {
            return Ok(Suite::default());
        }
        let parts: Vec<&str> = s.split('+').collect();
        match parts.as_slice() {
            [c, p, sig] => Ok(Suite {
                cipher: c.parse()?,
                prf: p.parse()?,
                signature: sig.parse()?,
            }),
            _ => Err(CryptoError::UnknownPrimitive(s.to_string())),
        }
    }

    /// prf(key, parts[0] | parts[1] | ...)
    pub fn prf(&self, key: &[u8], parts: &[&[u8]]) -> Vec<u8> {
        match self.prf {
            PrfId::HmacSha256 => {
                let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
                for p in parts {
                    mac.update(p);
                }
                mac.finalize().into_bytes().to_vec()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Signatures

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_slice(b: &[u8]) -> Option<Self> {
        b.try_into().ok().map(PublicKey)
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..8]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature([u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_slice(b: &[u8]) -> Option<Self> {
        b.try_into().ok().map(Signature)
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

/// Signing key. Never printed and never serialized.
pub struct PrivateKey {
    scheme: SignatureSchemeId,
    inner: ed25519_dalek::SigningKey,
}

impl PrivateKey {
    pub fn generate<R: RngCore + CryptoRng>(scheme: SignatureSchemeId, rng: &mut R) -> Self {
        match scheme {
            SignatureSchemeId::Ed25519 => PrivateKey {
                scheme,
                inner: ed25519_dalek::SigningKey::generate(rng),
            },
        }
    }

    pub fn scheme(&self) -> SignatureSchemeId {
        self.scheme
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.inner.verifying_key().to_bytes())
    }

    /// Raw secret bytes. Crate-internal: only token region storage sees them.
    pub(crate) fn secret_bytes(&self) -> [u8; 32] {
        self.inner.to_bytes()
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({:?}, ..)", self.scheme)
    }
}

pub fn sign(key: &PrivateKey, data: &[u8]) -> Signature {
    Signature(key.inner.sign(data).to_bytes())
}

pub fn verify(public_key: &PublicKey, data: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    vk.verify(data, &ed25519_dalek::Signature::from_bytes(&sig.0)).is_ok()
}

// ---------------------------------------------------------------------------
// Diffie-Hellman

/// RFC 3526 group 14.
const MODP_2048_P: &str = "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1\
29024E088A67CC74020BBEA63B139B22514A08798E3404DD\
EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245\
E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D\
C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
83655D23DCA3AD961C62F356208552BB9ED529077096966D\
670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9\
DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
15728E5A8AACAA68FFFFFFFFFFFFFFFF";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhGroup {
    name: &'static str,
    p: BigUint,
    g: BigUint,
    exponent_bits: u64,
}

impl DhGroup {
    pub fn new(name: &'static str, p: BigUint, g: BigUint, exponent_bits: u64) -> Self {
        DhGroup { name, p, g, exponent_bits }
    }

    /// p = 23, g = 2. Only for hand-checkable examples.
    pub fn tiny() -> Self {
        DhGroup::new("tiny", BigUint::from(23u32), BigUint::from(2u32), 5)
    }

    /// 64-bit safe prime with p = 7 (mod 8), so g = 2 generates the order-q subgroup.
    pub fn desk() -> Self {
        DhGroup::new("desk", BigUint::from(0xffff_ffff_ffff_ded7u64), BigUint::from(2u32), 64)
    }

    pub fn modp2048() -> Self {
        let p = BigUint::parse_bytes(MODP_2048_P.as_bytes(), 16).expect("valid group constant");
        DhGroup::new("modp2048", p, BigUint::from(2u32), 256)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "desk" => Some(Self::desk()),
            "modp2048" => Some(Self::modp2048()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn prime(&self) -> &BigUint {
        &self.p
    }

    pub fn generator(&self) -> &BigUint {
        &self.g
    }

    /// Fixed encoding width of public values and shared secrets.
    pub fn width(&self) -> usize {
        self.p.bits().div_ceil(8) as usize
    }

    fn encode(&self, v: &BigUint) -> Vec<u8> {
        let raw = v.to_bytes_be();
        let mut out = vec![0u8; self.width() - raw.len()];
        out.extend_from_slice(&raw);
        out
    }

    /// Parses a peer public value, rejecting 0, 1, p-1 and anything outside [2, p-2].
    pub fn parse_public(&self, bytes: &[u8]) -> Result<BigUint, CryptoError> {
        if bytes.len() != self.width() {
            return Err(CryptoError::WeakPublicValue);
        }
        let v = BigUint::from_bytes_be(bytes);
        let two = BigUint::from(2u32);
        if v < two || v > &self.p - &two {
            return Err(CryptoError::WeakPublicValue);
        }
        Ok(v)
    }

    /// Draws an exponent in [2, p-2], redrawing if g^x lands on a value peers reject.
    pub fn keypair<R: RngCore + CryptoRng>(&self, rng: &mut R) -> (DhSecret, Vec<u8>) {
        let mut buf = vec![0u8; self.exponent_bits.div_ceil(8) as usize];
        let span = &self.p - BigUint::from(3u32);
        loop {
            rng.fill_bytes(&mut buf);
            let x = BigUint::from_bytes_be(&buf) % &span + BigUint::from(2u32);
            let (secret, gx) = self.keypair_with_exponent(x);
            if self.parse_public(&gx).is_ok() {
                return (secret, gx);
            }
        }
    }

    pub fn keypair_with_exponent(&self, x: BigUint) -> (DhSecret, Vec<u8>) {
        let gx = self.g.modpow(&x, &self.p);
        (DhSecret(x), self.encode(&gx))
    }

    /// g^xy mod p, fixed-width big-endian.
    pub fn shared(&self, secret: &DhSecret, peer_public: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let peer = self.parse_public(peer_public)?;
        Ok(self.encode(&peer.modpow(&secret.0, &self.p)))
    }
}

/// Secret DH exponent.
pub struct DhSecret(BigUint);

impl fmt::Debug for DhSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DhSecret(..)")
    }
}

// ---------------------------------------------------------------------------
// Phase-1 derivations

#[derive(Clone, PartialEq, Eq)]
pub struct SkeyidBundle {
    pub skeyid: Vec<u8>,
    pub skeyid_d: Vec<u8>,
    pub skeyid_a: Vec<u8>,
    pub skeyid_e: Vec<u8>,
}

impl SkeyidBundle {
    /// Short digest for display; never exposes the material itself.
    pub fn fingerprint(&self) -> String {
        use sha2::Digest;
        let mut h = Sha256::new();
        for part in [&self.skeyid, &self.skeyid_d, &self.skeyid_a, &self.skeyid_e] {
            h.update(part);
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl fmt::Debug for SkeyidBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SkeyidBundle({})", self.fingerprint())
    }
}

/// Signature-authentication SKEYID and its three children.
pub fn derive_skeyid(suite: &Suite, ni: &[u8], nr: &[u8], gxy: &[u8], cky_i: &[u8], cky_r: &[u8]) -> SkeyidBundle {
    let nonces = [ni, nr].concat();
    let skeyid = suite.prf(&nonces, &[gxy]);
    let skeyid_d = suite.prf(&skeyid, &[gxy, cky_i, cky_r, &[0]]);
    let skeyid_a = suite.prf(&skeyid, &[&skeyid_d, gxy, cky_i, cky_r, &[1]]);
    let skeyid_e = suite.prf(&skeyid, &[&skeyid_a, gxy, cky_i, cky_r, &[2]]);
    SkeyidBundle { skeyid, skeyid_d, skeyid_a, skeyid_e }
}

/// Exchange values both HASH_I and HASH_R are computed over.
///
/// `sa_i` and `id_*` are payload bodies without generic headers. `sa_r` is the
/// responder's accepted proposal body; it only enters HASH_R.
#[derive(Debug, Clone, Copy)]
pub struct Transcript<'a> {
    pub gx_i: &'a [u8],
    pub gx_r: &'a [u8],
    pub cky_i: &'a [u8],
    pub cky_r: &'a [u8],
    pub sa_i: &'a [u8],
    pub sa_r: &'a [u8],
    pub id_i: &'a [u8],
    pub id_r: &'a [u8],
}

/// HASH_I = prf(SKEYID, g^xi | g^xr | CKY-I | CKY-R | SAi_b | IDii_b)
pub fn compute_hash_i(suite: &Suite, skeyid: &SkeyidBundle, t: &Transcript<'_>) -> Vec<u8> {
    suite.prf(&skeyid.skeyid, &[t.gx_i, t.gx_r, t.cky_i, t.cky_r, t.sa_i, t.id_i])
}

/// HASH_R = prf(SKEYID, g^xr | g^xi | CKY-R | CKY-I | SAi_b | IDir_b | SAr_b)
pub fn compute_hash_r(suite: &Suite, skeyid: &SkeyidBundle, t: &Transcript<'_>) -> Vec<u8> {
    suite.prf(&skeyid.skeyid, &[t.gx_r, t.gx_i, t.cky_r, t.cky_i, t.sa_i, t.id_r, t.sa_r])
}

// ---------------------------------------------------------------------------
// Token key derivations

/// Stretches a 7-byte serial into a cipher key.
pub fn kdf_serial(serial: &[u8]) -> Result<SymmetricKey, CryptoError> {
    let serial = Serial::from_slice(serial)?;
    Ok(serial_key(&serial))
}

pub(crate) fn serial_key(serial: &Serial) -> SymmetricKey {
    hkdf_expand(SERIAL_KDF_SALT, serial.as_bytes(), b"serial")
}

/// Binds the fleet key to a sender serial; keys the encrypted payload chains.
pub fn kdf_session(key1: &SymmetricKey, serial: &[u8]) -> Result<SymmetricKey, CryptoError> {
    let serial = Serial::from_slice(serial)?;
    Ok(session_key(key1, &serial))
}

pub(crate) fn session_key(key1: &SymmetricKey, serial: &Serial) -> SymmetricKey {
    let info = [b"session".as_slice(), serial.as_bytes()].concat();
    hkdf_expand(SESSION_KDF_SALT, key1.as_bytes(), &info)
}

fn hkdf_expand(salt: &[u8], ikm: &[u8], info: &[u8]) -> SymmetricKey {
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    let mut okm = [0u8; KEY_LEN];
    hk.expand(info, &mut okm).expect("32 bytes is a valid HKDF-SHA256 output length");
    SymmetricKey(okm)
}
