//! Entropy share extraction and the exclusive-or combination step of the
//! BA path.
//!
//! Shares are fixed at 32 bytes: wide enough to dominate any requested
//! output width, and the same size as the digest. Combination is a plain
//! byte-wise XOR over the `2f+1` collected shares, so one honest
//! high-entropy contribution makes the combined value uniformly random.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::protocol::ReplicaId;

/// 32-byte entropy contribution from one replica.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomShare(pub [u8; 32]);

impl std::fmt::Debug for RandomShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RandomShare({})", hex::encode(&self.0[..8]))
    }
}

/// The agreed set of `2f+1` (share, contributor) tuples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShareSet {
    pub entries: Vec<(RandomShare, ReplicaId)>,
}

impl ShareSet {
    /// Contributor ids, in set order.
    pub fn contributors(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.entries.iter().map(|(_, id)| *id)
    }

    pub fn share_of(&self, id: ReplicaId) -> Option<&RandomShare> {
        self.entries
            .iter()
            .find(|(_, i)| *i == id)
            .map(|(s, _)| s)
    }
}

/// Result of combining a full share set.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct CombinedRandom(pub [u8; 32]);

impl std::fmt::Debug for CombinedRandom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CombinedRandom({})", hex::encode(&self.0[..8]))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntropyError {
    #[error("scripted entropy source exhausted")]
    ScriptExhausted,
    #[error("share set has {got} entries, expected {expected}")]
    WrongEntryCount { got: usize, expected: usize },
    #[error("duplicate contributor {0:?} in share set")]
    DuplicateContributor(ReplicaId),
    #[error("unsupported output width {0} bits")]
    UnsupportedWidth(u32),
}

/// Where a replica draws its entropy shares from.
///
/// `Seeded` and `Scripted` exist for reproducible tests; `Os` delegates to
/// the platform entropy facility.
#[derive(Debug)]
pub enum EntropySource {
    Os,
    Seeded(Box<ChaCha20Rng>),
    Scripted(VecDeque<RandomShare>),
}

impl EntropySource {
    pub fn os() -> Self {
        EntropySource::Os
    }

    /// Equal seeds yield equal share streams.
    pub fn seeded(seed: u64) -> Self {
        EntropySource::Seeded(Box::new(ChaCha20Rng::seed_from_u64(seed)))
    }

    pub fn scripted(shares: Vec<RandomShare>) -> Self {
        EntropySource::Scripted(shares.into())
    }

    /// Draw the next 32-byte share from the source.
    pub fn extract_share(&mut self) -> Result<RandomShare, EntropyError> {
        let mut bytes = [0u8; 32];
        match self {
            EntropySource::Os => rand::rng().fill_bytes(&mut bytes),
            EntropySource::Seeded(rng) => rng.fill_bytes(&mut bytes),
            EntropySource::Scripted(q) => {
                return q.pop_front().ok_or(EntropyError::ScriptExhausted)
            }
        }
        Ok(RandomShare(bytes))
    }
}

/// Byte-wise exclusive-or of all `2f+1` shares. Order-independent;
/// rejects wrong entry counts and duplicate contributors.
pub fn combine(set: &ShareSet, f: u64) -> Result<CombinedRandom, EntropyError> {
    let expected = (2 * f + 1) as usize;
    if set.entries.len() != expected {
        return Err(EntropyError::WrongEntryCount {
            got: set.entries.len(),
            expected,
        });
    }
    let mut seen: Vec<ReplicaId> = Vec::with_capacity(expected);
    let mut out = [0u8; 32];
    for (share, id) in &set.entries {
        if seen.contains(id) {
            return Err(EntropyError::DuplicateContributor(*id));
        }
        seen.push(*id);
        for (o, s) in out.iter_mut().zip(share.0.iter()) {
            *o ^= s;
        }
    }
    Ok(CombinedRandom(out))
}

/// Leading `bits` of `bytes`, read big-endian. Supported widths: 8/16/32/64.
pub fn leading_bits_be(bytes: &[u8], bits: u32) -> Result<u64, EntropyError> {
    let n = match bits {
        8 | 16 | 32 | 64 => (bits / 8) as usize,
        other => return Err(EntropyError::UnsupportedWidth(other)),
    };
    debug_assert!(bytes.len() >= n);
    let mut out = 0u64;
    for b in &bytes[..n] {
        out = (out << 8) | u64::from(*b);
    }
    Ok(out)
}

/// Truncate a combined random value to the requested width by taking its
/// most significant bits.
pub fn truncate(r: &CombinedRandom, bits: u32) -> Result<u64, EntropyError> {
    leading_bits_be(&r.0, bits)
}
