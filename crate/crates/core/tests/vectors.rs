//! Frozen vectors. Expected bytes are assembled by hand from the wire
//! layout, independently of the encoder.

use std::collections::HashMap;

use tokenike::codec::{
    decode_message, encode_message, encode_message_with_spans, DevPayloadBody, IdBody, IsakmpHeader, IsakmpMessage,
    KeBody, NonceBody, PayloadBody, PayloadType, SaBody,
};
use tokenike::crypto::{compute_hash_i, compute_hash_r, derive_skeyid, Suite, Transcript};

fn load_vector(text: &str) -> HashMap<String, Vec<u8>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').expect("key = hex");
            (k.trim().to_string(), hex::decode(v.trim()).expect("hex value"))
        })
        .collect()
}

#[test]
fn skeyid_hmac_sha256_golden() {
    let v = load_vector(include_str!("vectors/skeyid_hmac_sha256.txt"));
    let suite = Suite::default();
    let b = derive_skeyid(&suite, &v["ni"], &v["nr"], &v["gxy"], &v["cky_i"], &v["cky_r"]);
    assert_eq!(b.skeyid, v["skeyid"]);
    assert_eq!(b.skeyid_d, v["skeyid_d"]);
    assert_eq!(b.skeyid_a, v["skeyid_a"]);
    assert_eq!(b.skeyid_e, v["skeyid_e"]);
    let t = Transcript {
        gx_i: &v["gx_i"],
        gx_r: &v["gx_r"],
        cky_i: &v["cky_i"],
        cky_r: &v["cky_r"],
        sa_i: &v["sa_i"],
        sa_r: &v["sa_r"],
        id_i: &v["id_i"],
        id_r: &v["id_r"],
    };
    assert_eq!(compute_hash_i(&suite, &b, &t), v["hash_i"]);
    assert_eq!(compute_hash_r(&suite, &b, &t), v["hash_r"]);
}

/// (offset, bytes, meaning) rows; offsets are checked while concatenating.
fn assemble(rows: &[(usize, &str, &str)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (offset, hex_bytes, meaning) in rows {
        assert_eq!(out.len(), *offset, "row `{meaning}` starts at the wrong offset");
        out.extend(hex::decode(hex_bytes.replace(' ', "")).unwrap());
    }
    out
}

#[test]
fn baseline_message1_golden_dump() {
    let msg = IsakmpMessage::plain(
        IsakmpHeader::aggressive([1, 2, 3, 4, 5, 6, 7, 8], [0; 8]),
        vec![
            PayloadBody::Sa(SaBody { proposal: hex::decode("0000000100000001").unwrap() }),
            PayloadBody::Ke(KeBody { public_value: hex::decode("00000000000000aa").unwrap() }),
            PayloadBody::Nonce(NonceBody { nonce: (0u8..16).collect() }),
            PayloadBody::Id(IdBody { id_type: 2, identity: b"alice".to_vec() }),
        ],
    );
    let (bytes, spans) = encode_message_with_spans(&msg).unwrap();
    let golden = golden_baseline();
    assert_eq!(hex::encode(&bytes), hex::encode(&golden));
    let offsets: Vec<_> = spans.iter().map(|s| (s.payload_type, s.body_offset, s.body_len)).collect();
    assert_eq!(
        offsets,
        [(PayloadType::Sa, 32, 8), (PayloadType::Ke, 44, 8), (PayloadType::Nonce, 56, 16), (PayloadType::Id, 76, 6)]
    );
    assert_eq!(decode_message(&golden).unwrap(), msg);
}

fn golden_baseline() -> Vec<u8> {
    assemble(&[
        (0, "0102030405060708", "initiator cookie"),
        (8, "0000000000000000", "responder cookie"),
        (16, "01", "next payload SA"),
        (17, "10", "version 1.0"),
        (18, "04", "exchange aggressive"),
        (19, "00", "flags"),
        (20, "00000000", "message id"),
        (24, "00000052", "length 82"),
        (28, "04 00 000c", "SA generic header, next KE, len 12"),
        (32, "0000000100000001", "SA body"),
        (40, "0a 00 000c", "KE generic header, next NONCE, len 12"),
        (44, "00000000000000aa", "KE body"),
        (52, "05 00 0014", "NONCE generic header, next ID, len 20"),
        (56, "000102030405060708090a0b0c0d0e0f", "NONCE body"),
        (72, "00 00 000a", "ID generic header, last, len 10"),
        (76, "02 616c696365", "ID body, FQDN alice"),
    ])
}

#[test]
fn improved_message1_framing_golden_dump() {
    let dev_ct: Vec<u8> = (0xc0u8..0xc0 + 23).collect();
    let blob: Vec<u8> = (0u8..40).map(|i| i ^ 0x5a).collect();
    let golden = assemble(&[
        (0, "a1a2a3a4a5a6a7a8", "initiator cookie"),
        (8, "0000000000000000", "responder cookie"),
        (16, "37", "next payload DEV (55)"),
        (17, "10", "version 1.0"),
        (18, "04", "exchange aggressive"),
        (19, "01", "flags: encryption"),
        (20, "00000000", "message id"),
        (24, "00000070", "length 112"),
        (28, "01 00 002c", "DEV generic header, next SA (first sealed), len 44"),
        (32, "01", "DEV format version"),
        (33, "101112131415161718191a1b1c1d1e1f", "DEV nonce"),
        (49, &hex::encode(&dev_ct), "sealed serial: 7 ciphertext + 16 tag"),
        (72, &hex::encode(&blob), "sealed chain: nonce || ciphertext || tag"),
    ]);
    let dev = DevPayloadBody::from_sealed(&[(0x10u8..0x20).collect::<Vec<_>>(), dev_ct].concat()).unwrap();
    let msg = IsakmpMessage::sealed(
        IsakmpHeader::aggressive([0xa1, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8], [0; 8]),
        vec![PayloadBody::Dev(dev)],
        PayloadType::Sa,
        blob,
    );
    assert_eq!(hex::encode(encode_message(&msg).unwrap()), hex::encode(&golden));
    let decoded = decode_message(&golden).unwrap();
    assert_eq!(decoded, msg);
    assert_eq!(decoded.first_sealed_type(), Some(1));
}
