use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tokenike::codec::{self, IsakmpMessage, PayloadBody, PayloadType};
use tokenike::crypto::{SignatureSchemeId, SymmetricKey};
use tokenike::netsim::{self, AdversaryAction, ScenarioConfig};
use tokenike::protocol::{
    Credentials, FailureStep, FileCredential, HandshakeSession, ReplayCache, SessionConfig, SessionState, Variant,
};
use tokenike::token::{create_token, DeploymentConfig, DeviceSlot, Fleet};

struct Cast {
    rng: ChaCha20Rng,
    creds: Vec<Credentials>,
}

const NAMES: [&str; 3] = ["alice", "bob", "carol"];

impl Cast {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut fleet = Fleet::new(DeploymentConfig::new(SymmetricKey::random(&mut rng)));
        let creds = NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| Credentials {
                device: DeviceSlot::present(Arc::new(fleet.issue(format!("SER000{i}").as_bytes(), name, &mut rng).unwrap())),
                file: Some(Arc::new(FileCredential::generate(name, SignatureSchemeId::Ed25519, &mut rng))),
            })
            .collect();
        Cast { rng, creds }
    }

    fn initiator(&mut self, variant: Variant, who: usize) -> HandshakeSession {
        HandshakeSession::initiator(SessionConfig::new(variant, NAMES[who]), self.creds[who].clone(), self.rng.gen())
    }

    fn responder(&mut self, variant: Variant, who: usize) -> HandshakeSession {
        let cache = Some(Arc::new(ReplayCache::default()));
        HandshakeSession::responder(SessionConfig::new(variant, NAMES[who]), self.creds[who].clone(), cache, self.rng.gen())
    }
}

fn with_cookies(bytes: &[u8], from: &HandshakeSession) -> Vec<u8> {
    let (ci, cr) = from.cookies();
    let mut out = bytes.to_vec();
    out[..8].copy_from_slice(&ci);
    out[8..16].copy_from_slice(&cr);
    out
}

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn honest_peers_agree(seed in any::<u64>(), v in variant()) {
        let mut cast = Cast::new(seed);
        let (mut i, mut r) = (cast.initiator(v, 0), cast.responder(v, 1));
        let m1 = i.initiator_start().unwrap();
        let m2 = r.responder_on_msg1(&m1.bytes).unwrap();
        let m3 = i.initiator_on_msg2(&m2.bytes).unwrap();
        r.responder_on_msg3(&m3.bytes).unwrap();
        prop_assert_eq!(i.state(), SessionState::Established);
        prop_assert_eq!(r.state(), SessionState::Established);
        prop_assert!(i.skeyid().is_some());
        prop_assert_eq!(i.skeyid(), r.skeyid());
        prop_assert_eq!(i.peer_identity(), Some("bob"));
        prop_assert_eq!(r.peer_identity(), Some("alice"));
    }

    #[test]
    fn forged_dev_never_costs_dh(seed in any::<u64>()) {
        let mut cast = Cast::new(seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xbad);
        let rogue = create_token(b"ROGUE00", &DeploymentConfig::new(SymmetricKey::random(&mut rng)), "mallory", &mut rng).unwrap();
        let mut attacker = HandshakeSession::initiator(
            SessionConfig::new(Variant::Improved, "mallory"),
            Credentials { device: DeviceSlot::present(Arc::new(rogue)), file: None },
            rng.gen(),
        );
        let forged = attacker.initiator_start().unwrap();
        let mut r = cast.responder(Variant::Improved, 1);
        prop_assert!(r.responder_on_msg1(&forged.bytes).is_err());
        prop_assert_eq!(r.counters().dh_ops, 0);
        prop_assert_eq!(r.counters().modexps, 0);
        prop_assert_eq!(r.counters().messages_rejected_pre_dh, 1);

        let mut b = cast.responder(Variant::Baseline, 1);
        let mut a = cast.initiator(Variant::Baseline, 0);
        let m1 = a.initiator_start().unwrap();
        prop_assert!(b.responder_on_msg1(&m1.bytes).is_ok());
        prop_assert_eq!(b.counters().dh_ops, 1);
    }

    #[test]
    fn tamper_detection_order(seed in any::<u64>(), v in variant(), msg in 0usize..2, ke in any::<bool>(), byte in 0usize..8, xor in 1u8..=255) {
        let mut cfg = ScenarioConfig::builtin("honest", v, seed).unwrap();
        cfg.adversary = vec![AdversaryAction::Tamper {
            message: msg,
            payload: Some(if ke { "KE" } else { "SA" }.into()),
            byte: Some(byte),
            offset: None,
            xor,
        }];
        let r = netsim::run_scenario(&cfg).unwrap();
        prop_assert!(r.tamper_log[0].applied);
        let t = &r.evidence.tamper[0];
        prop_assert!(t.detected);
        match v {
            Variant::Improved => {
                prop_assert!(t.detected_pre_signature);
                prop_assert!(t.failure_step.unwrap().is_decrypt());
            }
            // a KE flip can leave [2, p-2]; that is caught as a weak value, still after DH work
            Variant::Baseline => {
                prop_assert!(!t.detected_pre_signature || t.failure_step == Some(FailureStep::WeakPublicValue));
                prop_assert!(t.responder_dh_ops >= 1 || msg == 0);
            }
        }
    }

    #[test]
    fn certificate_plaintext_on_wire_only_in_baseline(seed in any::<u64>(), v in variant()) {
        let r = netsim::run_scenario(&ScenarioConfig::builtin("honest", v, seed).unwrap()).unwrap();
        prop_assert!(r.all_established());
        prop_assert_eq!(r.handshakes[0].cert_plaintext_on_wire, v == Variant::Baseline);
    }

    #[test]
    fn reports_are_deterministic(seed in any::<u64>(), v in variant(), name in prop::sample::select(vec!["honest", "tamper-sa", "tamper-ke"])) {
        let cfg = ScenarioConfig::builtin(name, v, seed).unwrap();
        prop_assert_eq!(netsim::run_scenario(&cfg).unwrap().to_json(), netsim::run_scenario(&cfg).unwrap().to_json());
    }
}

#[test]
fn spliced_certificate_rejected() {
    for v in Variant::ALL {
        let mut cast = Cast::new(5);
        let (mut a, mut b) = (cast.initiator(v, 0), cast.responder(v, 1));
        let (mut c, mut b2) = (cast.initiator(v, 2), cast.responder(v, 1));
        let m1 = a.initiator_start().unwrap();
        let m2 = b.responder_on_msg1(&m1.bytes).unwrap();
        let m3 = a.initiator_on_msg2(&m2.bytes).unwrap();
        let n1 = c.initiator_start().unwrap();
        let n2 = b2.responder_on_msg1(&n1.bytes).unwrap();
        let n3 = c.initiator_on_msg2(&n2.bytes).unwrap();

        let spliced = match v {
            Variant::Baseline => {
                let mine = codec::decode_message(&m3.bytes).unwrap();
                let theirs = codec::decode_message(&n3.bytes).unwrap();
                let cert = theirs.find(PayloadType::Cert).unwrap().clone();
                let sig = mine.find(PayloadType::Sig).unwrap().clone();
                codec::encode_message(&IsakmpMessage::plain(mine.header, vec![cert, sig])).unwrap()
            }
            // the sealed chain cannot be edited, so the whole foreign message is spliced
            Variant::Improved => with_cookies(&n3.bytes, &b),
        };
        let err = b.responder_on_msg3(&spliced).unwrap_err();
        let want = if v == Variant::Baseline { FailureStep::CertMismatch } else { FailureStep::Chain };
        assert_eq!(err.step, want, "{v}");
        assert_eq!(b.counters().sig_verifies, 0);
    }
}

#[test]
fn stale_message3_fails_signature_check() {
    for v in Variant::ALL {
        let mut cast = Cast::new(6);
        let (mut a, mut b) = (cast.initiator(v, 0), cast.responder(v, 1));
        let m1 = a.initiator_start().unwrap();
        let m2 = b.responder_on_msg1(&m1.bytes).unwrap();
        let stale = a.initiator_on_msg2(&m2.bytes).unwrap();
        b.responder_on_msg3(&stale.bytes).unwrap();

        let (mut a2, mut b2) = (cast.initiator(v, 0), cast.responder(v, 1));
        let f1 = a2.initiator_start().unwrap();
        b2.responder_on_msg1(&f1.bytes).unwrap();
        let err = b2.responder_on_msg3(&with_cookies(&stale.bytes, &b2)).unwrap_err();
        assert_eq!(err.step, FailureStep::SigVerify, "{v}");
        assert_eq!(b2.state(), SessionState::Failed(FailureStep::SigVerify));
    }
}

#[test]
fn improved_cert_and_sig_bodies_are_not_plaintext() {
    let mut cast = Cast::new(7);
    let (mut a, mut b) = (cast.initiator(Variant::Improved, 0), cast.responder(Variant::Improved, 1));
    let m1 = a.initiator_start().unwrap();
    let m2 = b.responder_on_msg1(&m1.bytes).unwrap();
    let msg = codec::decode_message(&m2.bytes).unwrap();
    assert!(msg.find(PayloadType::Cert).is_none(), "CERT must not be readable in clear");
    let cert = cast.creds[1].device.get_certificate().unwrap();
    assert!(!m2.bytes.windows(cert.encoded().len()).any(|w| w == cert.encoded()));
    assert!(matches!(msg.payloads[0].body, PayloadBody::Dev(_)));
}
