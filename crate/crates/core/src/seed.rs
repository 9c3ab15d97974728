//! Counter-based random substreams.
//!
//! Every random quantity in the crate descends from one master seed through
//! [`substream`], keyed by an operation domain string and a counter. Streams
//! for distinct keys are independent, and a sample loop that derives one
//! substream per index produces the same output whether it runs sequentially
//! or in parallel.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// RNG used throughout the crate.
pub type Stream = ChaCha12Rng;

/// Derive an independent substream from `(master, domain, index)`.
pub fn substream(master: u64, domain: &str, index: u64) -> Stream {
    ChaCha12Rng::from_seed(key(master, domain, index))
}

/// Derive a fresh master seed for a nested bulk operation, so the inner
/// operation's substreams are independent of the outer ones.
pub fn derive(master: u64, domain: &str, index: u64) -> u64 {
    let k = key(master, domain, index);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}

fn key(master: u64, domain: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(domain.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}
