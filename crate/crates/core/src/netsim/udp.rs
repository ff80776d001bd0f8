//! Loopback UDP bridge: the first handshake of a scenario over real
//! datagrams, one blocking endpoint per thread. Adversary actions are ignored.

use std::io;
use std::net::UdpSocket;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use super::{build_world, ConfigError, RunOptions, ScenarioConfig};
use crate::protocol::{HandshakeSession, SessionState};

const READ_TIMEOUT: Duration = Duration::from_secs(5);
const MAX_DATAGRAM: usize = 65_535;

#[derive(Debug, Error)]
pub enum UdpError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("socket error: {0}")]
    Io(#[from] io::Error),
    #[error("scenario has no handshake")]
    NoHandshake,
}

#[derive(Debug, Clone, Serialize)]
pub struct UdpDatagram {
    pub message: u8,
    pub from: String,
    pub to: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct UdpOutcome {
    pub initiator: String,
    pub responder: String,
    pub datagrams: Vec<UdpDatagram>,
    pub initiator_state: String,
    pub responder_state: String,
    pub established: bool,
    pub skeyid_match: bool,
    pub failure: Option<String>,
}

pub fn run_loopback(cfg: &ScenarioConfig, opts: RunOptions) -> Result<UdpOutcome, UdpError> {
    let spec = cfg.handshakes.first().ok_or(UdpError::NoHandshake)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let world = build_world(cfg, opts, &mut rng)?;
    let node = |name: &str| world.nodes.iter().find(|n| n.name == name).expect("validated principal");
    let (a, b) = (node(&spec.initiator), node(&spec.responder));
    let mut initiator = HandshakeSession::initiator(a.config.clone(), a.creds.clone(), rng.gen());
    let mut responder =
        HandshakeSession::responder(b.config.clone(), b.creds.clone(), Some(b.replay.clone()), rng.gen());

    let mut outcome = UdpOutcome {
        initiator: spec.initiator.clone(),
        responder: spec.responder.clone(),
        datagrams: Vec::new(),
        initiator_state: String::new(),
        responder_state: String::new(),
        established: false,
        skeyid_match: false,
        failure: None,
    };
    let msg1 = match initiator.initiator_start() {
        Ok(m) => m,
        Err(f) => {
            outcome.initiator_state = initiator.state().to_string();
            outcome.responder_state = responder.state().to_string();
            outcome.failure = Some(f.to_string());
            return Ok(outcome);
        }
    };

    let rsock = UdpSocket::bind("127.0.0.1:0")?;
    rsock.set_read_timeout(Some(READ_TIMEOUT))?;
    let isock = UdpSocket::bind("127.0.0.1:0")?;
    isock.set_read_timeout(Some(READ_TIMEOUT))?;
    let (raddr, iaddr) = (rsock.local_addr()?, isock.local_addr()?);

    let server = thread::spawn(move || -> io::Result<(HandshakeSession, Vec<UdpDatagram>)> {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        let mut sent = Vec::new();
        while !responder.state().is_terminal() {
            let (n, peer) = match rsock.recv_from(&mut buf) {
                Ok(x) => x,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => break,
                Err(e) => return Err(e),
            };
            // failures are dropped silently, as on the simulated network
            if let Ok(Some(out)) = responder.handle(&buf[..n]) {
                rsock.send_to(&out.bytes, peer)?;
                sent.push(UdpDatagram {
                    message: 2,
                    from: rsock.local_addr()?.to_string(),
                    to: peer.to_string(),
                    bytes: out.bytes.len(),
                });
            }
        }
        Ok((responder, sent))
    });

    isock.send_to(&msg1.bytes, raddr)?;
    outcome.datagrams.push(UdpDatagram { message: 1, from: iaddr.to_string(), to: raddr.to_string(), bytes: msg1.bytes.len() });
    let mut buf = vec![0u8; MAX_DATAGRAM];
    match isock.recv_from(&mut buf) {
        Ok((n, _)) => match initiator.handle(&buf[..n]) {
            Ok(Some(msg3)) => {
                isock.send_to(&msg3.bytes, raddr)?;
                outcome.datagrams.push(UdpDatagram {
                    message: 3,
                    from: iaddr.to_string(),
                    to: raddr.to_string(),
                    bytes: msg3.bytes.len(),
                });
            }
            Ok(None) => {}
            Err(f) => outcome.failure = Some(f.to_string()),
        },
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            outcome.failure = Some("no reply from responder".into());
        }
        Err(e) => return Err(e.into()),
    }

    let (responder, sent) = server.join().expect("responder thread")?;
    outcome.datagrams.splice(1..1, sent);
    outcome.initiator_state = initiator.state().to_string();
    outcome.responder_state = responder.state().to_string();
    outcome.established =
        initiator.state() == SessionState::Established && responder.state() == SessionState::Established;
    outcome.skeyid_match = matches!((initiator.skeyid(), responder.skeyid()), (Some(x), Some(y)) if x == y);
    if outcome.failure.is_none() && !outcome.established {
        outcome.failure = Some(format!("responder ended {}", outcome.responder_state));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Variant;

    #[test]
    fn loopback_handshake_establishes() {
        for variant in Variant::ALL {
            let cfg = ScenarioConfig::builtin("honest", variant, 11).unwrap();
            let out = run_loopback(&cfg, RunOptions::default()).unwrap();
            assert!(out.established && out.skeyid_match, "{out:?}");
            assert_eq!(out.datagrams.iter().map(|d| d.message).collect::<Vec<_>>(), [1, 2, 3]);
        }
    }
}
