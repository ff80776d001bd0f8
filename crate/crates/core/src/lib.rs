//! IKEv1 aggressive-mode phase 1, in a baseline form and in a form gated by an
//! emulated security USB key, plus a deterministic adversarial simulator that
//! measures what each form protects against.

pub mod codec;
pub mod crypto;
pub mod netsim;
pub mod protocol;
pub mod token;
