//! ISAKMP phase-1 wire codec.
//!
//! Big-endian throughout. A message is the 28-byte header followed by a chain
//! of generic payloads. When the header's encryption flag is set, only DEV
//! payloads travel in clear; the rest of the chain follows as one sealed blob
//! (`nonce || ciphertext || tag`), and the pointer in front of the blob names
//! the first sealed payload type.

use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{CipherId, CryptoError, SymmetricKey, NONCE_LEN, SEAL_OVERHEAD, TAG_LEN};

pub const HEADER_LEN: usize = 28;
pub const GENERIC_HEADER_LEN: usize = 4;
pub const ISAKMP_VERSION: u8 = 0x10;
pub const EXCHANGE_AGGRESSIVE: u8 = 4;
/// Header flag bit 0: the payloads after the clear DEV prefix are encrypted.
pub const FLAG_ENCRYPTION: u8 = 0x01;

pub const NONCE_MIN: usize = 8;
pub const NONCE_MAX: usize = 256;

pub const DEV_FORMAT_VERSION: u8 = 1;
/// version byte + nonce + tag; the 7-byte serial ciphertext comes on top.
pub const DEV_MIN_BODY: usize = 1 + NONCE_LEN + TAG_LEN;

pub const ID_FQDN: u8 = 2;
/// Private-use certificate encodings.
pub const CERT_ENCODING_SELF_CONTAINED: u8 = 201;
pub const CERT_ENCODING_SEALED: u8 = 202;

/// The one proposal this artifact offers: DOI 1 (IPsec), situation
/// SIT_IDENTITY_ONLY, proposal #1 for ISAKMP with a single KEY_IKE transform
/// carrying encryption, hash, group and authentication-method attributes.
pub const DEFAULT_SA: &[u8] = &[
    0x00, 0x00, 0x00, 0x01, // DOI
    0x00, 0x00, 0x00, 0x01, // situation
    // proposal: next, reserved, length 32, #1, protocol ISAKMP, spi size 0, 1 transform
    0x00, 0x00, 0x00, 0x20, 0x01, 0x01, 0x00, 0x01,
    // transform: next, reserved, length 24, #1, KEY_IKE, reserved
    0x00, 0x00, 0x00, 0x18, 0x01, 0x01, 0x00, 0x00,
    0x80, 0x01, 0x00, 0x07, // encryption algorithm
    0x80, 0x02, 0x00, 0x04, // hash algorithm
    0x80, 0x04, 0x00, 0x0e, // group description
    0x80, 0x03, 0x00, 0x03, // authentication method: signatures
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PayloadType {
    Sa = 1,
    Ke = 4,
    Id = 5,
    Cert = 6,
    Sig = 9,
    Nonce = 10,
    Dev = 55,
}

impl PayloadType {
    pub const ALL: [PayloadType; 7] = [
        PayloadType::Sa,
        PayloadType::Ke,
        PayloadType::Id,
        PayloadType::Cert,
        PayloadType::Sig,
        PayloadType::Nonce,
        PayloadType::Dev,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        PayloadType::ALL.into_iter().find(|t| *t as u8 == v)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            PayloadType::Sa => "SA",
            PayloadType::Ke => "KE",
            PayloadType::Id => "ID",
            PayloadType::Cert => "CERT",
            PayloadType::Sig => "SIG",
            PayloadType::Nonce => "NONCE",
            PayloadType::Dev => "DEV",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        PayloadType::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for PayloadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("truncated at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("unsupported version {found:#04x} at offset {offset}")]
    BadVersion { offset: usize, found: u8 },
    #[error("unsupported exchange type {found} at offset {offset}")]
    BadExchangeType { offset: usize, found: u8 },
    #[error("unknown flag bits {found:#04x} at offset {offset}")]
    BadFlags { offset: usize, found: u8 },
    #[error("bad length at offset {offset}: declared {declared}, actual {actual}")]
    BadLength { offset: usize, declared: usize, actual: usize },
    #[error("unknown payload type {payload_type} named at offset {offset}")]
    UnknownPayloadType { offset: usize, payload_type: u8 },
    #[error("nonzero reserved byte at offset {offset}")]
    NonzeroReserved { offset: usize },
    #[error("invalid payload body at offset {offset}: {reason}")]
    InvalidBody { offset: usize, reason: &'static str },
    #[error("encryption flag set but no sealed chain follows (offset {offset})")]
    MissingSealedChain { offset: usize },
    #[error("payload chain mismatch at link {index}: expected {expected}, found {found}")]
    ChainMismatch { index: usize, expected: u8, found: u8 },
    #[error("encryption flag disagrees with message contents")]
    FlagMismatch,
    #[error("sealed chain failed authentication")]
    AuthFailure,
}

impl From<CryptoError> for CodecError {
    fn from(_: CryptoError) -> Self {
        CodecError::AuthFailure
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsakmpHeader {
    pub initiator_cookie: [u8; 8],
    pub responder_cookie: [u8; 8],
    pub next_payload: u8,
    pub version: u8,
    pub exchange_type: u8,
    pub flags: u8,
    pub message_id: u32,
}

impl IsakmpHeader {
    pub fn aggressive(initiator_cookie: [u8; 8], responder_cookie: [u8; 8]) -> Self {
        IsakmpHeader {
            initiator_cookie,
            responder_cookie,
            next_payload: 0,
            version: ISAKMP_VERSION,
            exchange_type: EXCHANGE_AGGRESSIVE,
            flags: 0,
            message_id: 0,
        }
    }

    pub fn encrypted(&self) -> bool {
        self.flags & FLAG_ENCRYPTION != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaBody {
    pub proposal: Vec<u8>,
}

impl SaBody {
    pub fn default_sa() -> Self {
        SaBody { proposal: DEFAULT_SA.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeBody {
    pub public_value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonceBody {
    pub nonce: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdBody {
    pub id_type: u8,
    pub identity: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertBody {
    pub encoding: u8,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigBody {
    pub signature: Vec<u8>,
}

/// Encrypted `devinfo` record: the 7-byte device serial sealed under a token key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevPayloadBody {
    pub format_version: u8,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl DevPayloadBody {
    /// Wraps a token sealed box (`nonce || ciphertext || tag`).
    pub fn from_sealed(sealed: &[u8]) -> Option<Self> {
        if sealed.len() < NONCE_LEN + TAG_LEN {
            return None;
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        Some(DevPayloadBody {
            format_version: DEV_FORMAT_VERSION,
            nonce: nonce.try_into().ok()?,
            ciphertext: ct.to_vec(),
        })
    }

    pub fn sealed(&self) -> Vec<u8> {
        [self.nonce.as_slice(), &self.ciphertext].concat()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PayloadBody {
    Sa(SaBody),
    Ke(KeBody),
    Nonce(NonceBody),
    Id(IdBody),
    Cert(CertBody),
    Sig(SigBody),
    Dev(DevPayloadBody),
}

impl PayloadBody {
    pub fn payload_type(&self) -> PayloadType {
        match self {
            PayloadBody::Sa(_) => PayloadType::Sa,
            PayloadBody::Ke(_) => PayloadType::Ke,
            PayloadBody::Nonce(_) => PayloadType::Nonce,
            PayloadBody::Id(_) => PayloadType::Id,
            PayloadBody::Cert(_) => PayloadType::Cert,
            PayloadBody::Sig(_) => PayloadType::Sig,
            PayloadBody::Dev(_) => PayloadType::Dev,
        }
    }

    /// Body bytes exactly as they appear on the wire after the generic header.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            PayloadBody::Sa(b) => b.proposal.clone(),
            PayloadBody::Ke(b) => b.public_value.clone(),
            PayloadBody::Nonce(b) => b.nonce.clone(),
            PayloadBody::Id(b) => [&[b.id_type][..], &b.identity].concat(),
            PayloadBody::Cert(b) => [&[b.encoding][..], &b.data].concat(),
            PayloadBody::Sig(b) => b.signature.clone(),
            PayloadBody::Dev(b) => {
                let mut out = Vec::with_capacity(1 + NONCE_LEN + b.ciphertext.len());
                out.push(b.format_version);
                out.extend_from_slice(&b.nonce);
                out.extend_from_slice(&b.ciphertext);
                out
            }
        }
    }

    fn parse(ty: PayloadType, body: &[u8], offset: usize) -> Result<Self, CodecError> {
        let invalid = |reason| CodecError::InvalidBody { offset, reason };
        Ok(match ty {
            PayloadType::Sa if body.is_empty() => return Err(invalid("empty SA proposal")),
            PayloadType::Sa => PayloadBody::Sa(SaBody { proposal: body.to_vec() }),
            PayloadType::Ke if body.is_empty() => return Err(invalid("empty KE value")),
            PayloadType::Ke => PayloadBody::Ke(KeBody { public_value: body.to_vec() }),
            PayloadType::Nonce if !(NONCE_MIN..=NONCE_MAX).contains(&body.len()) => {
                return Err(invalid("nonce length outside [8, 256]"))
            }
            PayloadType::Nonce => PayloadBody::Nonce(NonceBody { nonce: body.to_vec() }),
            PayloadType::Id => {
                let (&id_type, identity) = body.split_first().ok_or(invalid("empty ID body"))?;
                PayloadBody::Id(IdBody { id_type, identity: identity.to_vec() })
            }
            PayloadType::Cert => {
                let (&encoding, data) = body.split_first().ok_or(invalid("empty CERT body"))?;
                PayloadBody::Cert(CertBody { encoding, data: data.to_vec() })
            }
            PayloadType::Sig if body.is_empty() => return Err(invalid("empty SIG body")),
            PayloadType::Sig => PayloadBody::Sig(SigBody { signature: body.to_vec() }),
            PayloadType::Dev => {
                if body.len() < DEV_MIN_BODY {
                    return Err(invalid("DEV body shorter than version + nonce + tag"));
                }
                if body[0] != DEV_FORMAT_VERSION {
                    return Err(invalid("unsupported DEV format version"));
                }
                PayloadBody::Dev(DevPayloadBody {
                    format_version: body[0],
                    nonce: body[1..1 + NONCE_LEN].try_into().expect("length checked"),
                    ciphertext: body[1 + NONCE_LEN..].to_vec(),
                })
            }
        })
    }

    fn validate(&self) -> Result<(), CodecError> {
        let bytes = self.to_bytes();
        Self::parse(self.payload_type(), &bytes, 0)?;
        if bytes.len() + GENERIC_HEADER_LEN > u16::MAX as usize {
            return Err(CodecError::InvalidBody { offset: 0, reason: "payload exceeds 65535 bytes" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsakmpPayload {
    pub next_payload: u8,
    pub body: PayloadBody,
}

impl IsakmpPayload {
    pub fn payload_type(&self) -> PayloadType {
        self.body.payload_type()
    }
}

/// Links bodies into a chain whose final `next_payload` is `trailing`.
pub fn link_payloads(bodies: Vec<PayloadBody>, trailing: u8) -> Vec<IsakmpPayload> {
    let types: Vec<u8> = bodies.iter().map(|b| b.payload_type().code()).collect();
    bodies
        .into_iter()
        .enumerate()
        .map(|(i, body)| IsakmpPayload {
            next_payload: types.get(i + 1).copied().unwrap_or(trailing),
            body,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsakmpMessage {
    pub header: IsakmpHeader,
    /// Clear payloads. With the encryption flag these are DEV payloads only.
    pub payloads: Vec<IsakmpPayload>,
    /// Sealed remainder of the chain, present iff the encryption flag is set.
    pub sealed_chain: Option<Vec<u8>>,
}

impl IsakmpMessage {
    pub fn plain(mut header: IsakmpHeader, bodies: Vec<PayloadBody>) -> Self {
        header.flags &= !FLAG_ENCRYPTION;
        header.next_payload = bodies.first().map_or(0, |b| b.payload_type().code());
        IsakmpMessage { header, payloads: link_payloads(bodies, 0), sealed_chain: None }
    }

    /// Clear DEV prefix followed by a sealed chain starting with `first_sealed`.
    pub fn sealed(mut header: IsakmpHeader, clear: Vec<PayloadBody>, first_sealed: PayloadType, blob: Vec<u8>) -> Self {
        header.flags |= FLAG_ENCRYPTION;
        header.next_payload = clear.first().map_or(first_sealed.code(), |b| b.payload_type().code());
        IsakmpMessage {
            header,
            payloads: link_payloads(clear, first_sealed.code()),
            sealed_chain: Some(blob),
        }
    }

    /// Type of the first payload inside the sealed chain.
    pub fn first_sealed_type(&self) -> Option<u8> {
        self.sealed_chain.as_ref()?;
        Some(self.payloads.last().map_or(self.header.next_payload, |p| p.next_payload))
    }

    pub fn find(&self, ty: PayloadType) -> Option<&PayloadBody> {
        self.payloads.iter().map(|p| &p.body).find(|b| b.payload_type() == ty)
    }
}

/// Location of one payload body within serialized bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadSpan {
    pub payload_type: PayloadType,
    pub body_offset: usize,
    pub body_len: usize,
}

fn check_links(payloads: &[IsakmpPayload], first: u8, trailing_ok: impl Fn(u8) -> bool) -> Result<(), CodecError> {
    if let Some(p) = payloads.first() {
        if first != p.payload_type().code() {
            return Err(CodecError::ChainMismatch { index: 0, expected: p.payload_type().code(), found: first });
        }
    }
    for (i, pair) in payloads.windows(2).enumerate() {
        let expected = pair[1].payload_type().code();
        if pair[0].next_payload != expected {
            return Err(CodecError::ChainMismatch { index: i + 1, expected, found: pair[0].next_payload });
        }
    }
    let tail = payloads.last().map_or(first, |p| p.next_payload);
    if !trailing_ok(tail) {
        return Err(CodecError::ChainMismatch { index: payloads.len(), expected: 0, found: tail });
    }
    Ok(())
}

fn write_payloads(out: &mut Vec<u8>, payloads: &[IsakmpPayload], spans: &mut Vec<PayloadSpan>) -> Result<(), CodecError> {
    for p in payloads {
        p.body.validate()?;
        let body = p.body.to_bytes();
        out.push(p.next_payload);
        out.push(0);
        out.extend_from_slice(&((body.len() + GENERIC_HEADER_LEN) as u16).to_be_bytes());
        spans.push(PayloadSpan {
            payload_type: p.payload_type(),
            body_offset: out.len(),
            body_len: body.len(),
        });
        out.extend_from_slice(&body);
    }
    Ok(())
}

/// Serializes a message, recomputing the header length.
pub fn encode_message(msg: &IsakmpMessage) -> Result<Vec<u8>, CodecError> {
    encode_message_with_spans(msg).map(|(bytes, _)| bytes)
}

/// As [`encode_message`], also returning where each clear payload body landed.
pub fn encode_message_with_spans(msg: &IsakmpMessage) -> Result<(Vec<u8>, Vec<PayloadSpan>), CodecError> {
    let h = &msg.header;
    match &msg.sealed_chain {
        Some(blob) => {
            if !h.encrypted() {
                return Err(CodecError::FlagMismatch);
            }
            if msg.payloads.iter().any(|p| p.payload_type() != PayloadType::Dev) {
                return Err(CodecError::FlagMismatch);
            }
            if blob.len() < SEAL_OVERHEAD {
                return Err(CodecError::InvalidBody { offset: 0, reason: "sealed chain shorter than nonce + tag" });
            }
            check_links(&msg.payloads, h.next_payload, |t| {
                PayloadType::from_u8(t).is_some_and(|t| t != PayloadType::Dev)
            })?;
        }
        None => {
            if h.encrypted() {
                return Err(CodecError::FlagMismatch);
            }
            check_links(&msg.payloads, h.next_payload, |t| t == 0)?;
        }
    }

    let mut out = Vec::with_capacity(256);
    out.extend_from_slice(&h.initiator_cookie);
    out.extend_from_slice(&h.responder_cookie);
    out.push(h.next_payload);
    out.push(h.version);
    out.push(h.exchange_type);
    out.push(h.flags);
    out.extend_from_slice(&h.message_id.to_be_bytes());
    out.extend_from_slice(&[0; 4]);
    let mut spans = Vec::new();
    write_payloads(&mut out, &msg.payloads, &mut spans)?;
    if let Some(blob) = &msg.sealed_chain {
        out.extend_from_slice(blob);
    }
    let len = out.len() as u32;
    out[24..28].copy_from_slice(&len.to_be_bytes());
    Ok((out, spans))
}

fn known_type(v: u8, named_at: usize) -> Result<PayloadType, CodecError> {
    PayloadType::from_u8(v).ok_or(CodecError::UnknownPayloadType { offset: named_at, payload_type: v })
}

struct Parsed {
    payloads: Vec<IsakmpPayload>,
    sealed_from: Option<usize>,
}

// Walks a payload chain starting at `pos`. `stop_at_sealed` ends the clear part
// at the first non-DEV type.
fn parse_chain(bytes: &[u8], mut pos: usize, first: u8, first_named_at: usize, stop_at_sealed: bool) -> Result<Parsed, CodecError> {
    let mut payloads = Vec::new();
    let mut cur = first;
    let mut named_at = first_named_at;
    loop {
        if cur == 0 {
            if stop_at_sealed {
                return Err(CodecError::MissingSealedChain { offset: pos });
            }
            if pos != bytes.len() {
                return Err(CodecError::BadLength { offset: pos, declared: pos, actual: bytes.len() });
            }
            return Ok(Parsed { payloads, sealed_from: None });
        }
        let ty = known_type(cur, named_at)?;
        if stop_at_sealed && ty != PayloadType::Dev {
            if bytes.len() - pos < SEAL_OVERHEAD {
                return Err(CodecError::Truncated { offset: pos, needed: SEAL_OVERHEAD - (bytes.len() - pos) });
            }
            return Ok(Parsed { payloads, sealed_from: Some(pos) });
        }
        if bytes.len() - pos < GENERIC_HEADER_LEN {
            return Err(CodecError::Truncated { offset: pos, needed: GENERIC_HEADER_LEN - (bytes.len() - pos) });
        }
        let next = bytes[pos];
        if bytes[pos + 1] != 0 {
            return Err(CodecError::NonzeroReserved { offset: pos + 1 });
        }
        let plen = u16::from_be_bytes([bytes[pos + 2], bytes[pos + 3]]) as usize;
        if plen < GENERIC_HEADER_LEN {
            return Err(CodecError::BadLength { offset: pos + 2, declared: plen, actual: GENERIC_HEADER_LEN });
        }
        if plen > bytes.len() - pos {
            return Err(CodecError::Truncated { offset: pos, needed: plen - (bytes.len() - pos) });
        }
        let body = PayloadBody::parse(ty, &bytes[pos + GENERIC_HEADER_LEN..pos + plen], pos + GENERIC_HEADER_LEN)?;
        payloads.push(IsakmpPayload { next_payload: next, body });
        named_at = pos;
        cur = next;
        pos += plen;
    }
}

/// Parses a message. Total over arbitrary input: every failure is a named error.
pub fn decode_message(bytes: &[u8]) -> Result<IsakmpMessage, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated { offset: bytes.len(), needed: HEADER_LEN - bytes.len() });
    }
    let header = IsakmpHeader {
        initiator_cookie: bytes[0..8].try_into().expect("fixed slice"),
        responder_cookie: bytes[8..16].try_into().expect("fixed slice"),
        next_payload: bytes[16],
        version: bytes[17],
        exchange_type: bytes[18],
        flags: bytes[19],
        message_id: u32::from_be_bytes(bytes[20..24].try_into().expect("fixed slice")),
    };
    if header.version != ISAKMP_VERSION {
        return Err(CodecError::BadVersion { offset: 17, found: header.version });
    }
    if header.exchange_type != EXCHANGE_AGGRESSIVE {
        return Err(CodecError::BadExchangeType { offset: 18, found: header.exchange_type });
    }
    if header.flags & !FLAG_ENCRYPTION != 0 {
        return Err(CodecError::BadFlags { offset: 19, found: header.flags });
    }
    let declared = u32::from_be_bytes(bytes[24..28].try_into().expect("fixed slice")) as usize;
    if declared != bytes.len() {
        return Err(CodecError::BadLength { offset: 24, declared, actual: bytes.len() });
    }
    let parsed = parse_chain(bytes, HEADER_LEN, header.next_payload, 16, header.encrypted())?;
    Ok(IsakmpMessage {
        header,
        payloads: parsed.payloads,
        sealed_chain: parsed.sealed_from.map(|pos| bytes[pos..].to_vec()),
    })
}

/// Serializes a bare payload chain (no ISAKMP header); last link must be 0.
pub fn encode_chain(payloads: &[IsakmpPayload]) -> Result<Vec<u8>, CodecError> {
    encode_chain_with_spans(payloads).map(|(b, _)| b)
}

pub fn encode_chain_with_spans(payloads: &[IsakmpPayload]) -> Result<(Vec<u8>, Vec<PayloadSpan>), CodecError> {
    let first = payloads.first().map_or(0, |p| p.payload_type().code());
    check_links(payloads, first, |t| t == 0)?;
    let mut out = Vec::new();
    let mut spans = Vec::new();
    write_payloads(&mut out, payloads, &mut spans)?;
    Ok((out, spans))
}

/// Parses a bare payload chain whose first payload has type `first`.
pub fn decode_chain(first: u8, bytes: &[u8]) -> Result<Vec<IsakmpPayload>, CodecError> {
    Ok(parse_chain(bytes, 0, first, 0, false)?.payloads)
}

/// Seals a payload chain under `key`.
pub fn encrypt_payload_chain<R: RngCore + CryptoRng>(
    cipher: CipherId,
    key: &SymmetricKey,
    rng: &mut R,
    payloads: &[IsakmpPayload],
) -> Result<Vec<u8>, CodecError> {
    let plain = encode_chain(payloads)?;
    Ok(cipher.seal(key, rng, &plain))
}

/// Authenticates and then parses a sealed chain.
pub fn decrypt_payload_chain(
    cipher: CipherId,
    key: &SymmetricKey,
    first: u8,
    blob: &[u8],
) -> Result<Vec<IsakmpPayload>, CodecError> {
    let plain = cipher.open(key, blob)?;
    decode_chain(first, &plain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn header() -> IsakmpHeader {
        IsakmpHeader::aggressive([1; 8], [0; 8])
    }

    fn msg1_bodies() -> Vec<PayloadBody> {
        vec![
            PayloadBody::Sa(SaBody::default_sa()),
            PayloadBody::Ke(KeBody { public_value: vec![0xab; 8] }),
            PayloadBody::Nonce(NonceBody { nonce: vec![7; 16] }),
            PayloadBody::Id(IdBody { id_type: ID_FQDN, identity: b"alice".to_vec() }),
        ]
    }

    fn dev() -> PayloadBody {
        PayloadBody::Dev(DevPayloadBody { format_version: 1, nonce: [9; 16], ciphertext: vec![3; 23] })
    }

    #[test]
    fn plain_round_trip() {
        let m = IsakmpMessage::plain(header(), msg1_bodies());
        let bytes = encode_message(&m).unwrap();
        assert_eq!(u32::from_be_bytes(bytes[24..28].try_into().unwrap()) as usize, bytes.len());
        assert_eq!(decode_message(&bytes).unwrap(), m);
        assert_eq!(encode_message(&m).unwrap(), bytes);
    }

    #[test]
    fn sealed_round_trip_and_dev_type_byte() {
        let m = IsakmpMessage::sealed(header(), vec![dev()], PayloadType::Sa, vec![0x5c; 80]);
        let (bytes, spans) = encode_message_with_spans(&m).unwrap();
        assert_eq!(bytes[16], 55, "header names DEV first");
        assert_eq!(spans[0].payload_type, PayloadType::Dev);
        assert_eq!(bytes[HEADER_LEN], PayloadType::Sa.code(), "DEV points at first sealed type");
        let back = decode_message(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.first_sealed_type(), Some(1));
    }

    #[test]
    fn chain_mismatch_detected() {
        let mut m = IsakmpMessage::plain(header(), msg1_bodies());
        m.payloads[0].next_payload = PayloadType::Nonce.code();
        assert_eq!(
            encode_message(&m),
            Err(CodecError::ChainMismatch { index: 1, expected: 4, found: 10 })
        );
        let mut m = IsakmpMessage::plain(header(), msg1_bodies());
        m.header.next_payload = 4;
        assert!(matches!(encode_message(&m), Err(CodecError::ChainMismatch { index: 0, .. })));
    }

    #[test]
    fn flag_must_match_contents() {
        let mut m = IsakmpMessage::plain(header(), msg1_bodies());
        m.header.flags = FLAG_ENCRYPTION;
        assert_eq!(encode_message(&m), Err(CodecError::FlagMismatch));
    }

    #[test]
    fn short_input_truncated() {
        assert_eq!(decode_message(&[0; 10]), Err(CodecError::Truncated { offset: 10, needed: 18 }));
    }

    #[test]
    fn header_errors_name_offsets() {
        let bytes = encode_message(&IsakmpMessage::plain(header(), msg1_bodies())).unwrap();
        let mut b = bytes.clone();
        b[17] = 0x20;
        assert_eq!(decode_message(&b), Err(CodecError::BadVersion { offset: 17, found: 0x20 }));
        let mut b = bytes.clone();
        b[18] = 2;
        assert_eq!(decode_message(&b), Err(CodecError::BadExchangeType { offset: 18, found: 2 }));
        let mut b = bytes.clone();
        b[27] ^= 1;
        assert!(matches!(decode_message(&b), Err(CodecError::BadLength { offset: 24, .. })));
        let mut b = bytes.clone();
        b[29] = 1;
        assert_eq!(decode_message(&b), Err(CodecError::NonzeroReserved { offset: 29 }));
        let mut b = bytes.clone();
        b[16] = 13;
        assert_eq!(decode_message(&b), Err(CodecError::UnknownPayloadType { offset: 16, payload_type: 13 }));
    }

    #[test]
    fn nonce_bounds_enforced() {
        for (len, ok) in [(7, false), (8, true), (256, true), (257, false)] {
            let m = IsakmpMessage::plain(header(), vec![PayloadBody::Nonce(NonceBody { nonce: vec![1; len] })]);
            assert_eq!(encode_message(&m).is_ok(), ok, "nonce len {len}");
        }
    }

    #[test]
    fn dev_body_minimum() {
        let short = PayloadBody::Dev(DevPayloadBody { format_version: 1, nonce: [0; 16], ciphertext: vec![0; 15] });
        let m = IsakmpMessage::sealed(header(), vec![short], PayloadType::Sa, vec![0; 40]);
        assert!(matches!(encode_message(&m), Err(CodecError::InvalidBody { .. })));
    }

    #[test]
    fn chain_encryption_round_trip_and_tamper() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = SymmetricKey::random(&mut rng);
        let chain = link_payloads(msg1_bodies()[..2].to_vec(), 0);
        let blob = encrypt_payload_chain(CipherId::default(), &key, &mut rng, &chain).unwrap();
        assert_eq!(decrypt_payload_chain(CipherId::default(), &key, 1, &blob).unwrap(), chain);
        let other = SymmetricKey::random(&mut rng);
        assert_eq!(decrypt_payload_chain(CipherId::default(), &other, 1, &blob), Err(CodecError::AuthFailure));
        for i in 0..blob.len() {
            let mut t = blob.clone();
            t[i] ^= 0x80;
            assert_eq!(
                decrypt_payload_chain(CipherId::default(), &key, 1, &t),
                Err(CodecError::AuthFailure),
                "byte {i}"
            );
        }
    }

    #[test]
    fn chain_spans_point_at_bodies() {
        let chain = link_payloads(msg1_bodies(), 0);
        let (bytes, spans) = encode_chain_with_spans(&chain).unwrap();
        for (span, p) in spans.iter().zip(&chain) {
            assert_eq!(&bytes[span.body_offset..span.body_offset + span.body_len], p.body.to_bytes().as_slice());
        }
    }
}
