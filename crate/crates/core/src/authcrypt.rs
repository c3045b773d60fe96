//! MAC and authenticator generation/verification protecting all protocol
//! messages, plus digest computation.
//!
//! Point-to-point messages carry a single HMAC-SHA-256 tag; multicast
//! messages carry an authenticator, a vector of MACs with one entry per
//! target. Session keys are derived per ordered (sender, receiver) pair from
//! a configured root secret, so key distribution stays a configuration
//! concern rather than a protocol one.

use hmac::{Hmac, KeyInit, Mac as HmacTrait};
use sha2::{Digest as Sha2Digest, Sha256};
use thiserror::Error;

use crate::protocol::{Digest, ReplicaId};

type HmacSha256 = Hmac<Sha256>;

/// Either end of a point-to-point session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PeerId {
    Replica(ReplicaId),
    Client(u64),
}

impl PeerId {
    fn encode(&self) -> [u8; 9] {
        let mut out = [0u8; 9];
        match self {
            PeerId::Replica(r) => {
                out[0] = 0;
                out[1..].copy_from_slice(&r.0.to_be_bytes());
            }
            PeerId::Client(c) => {
                out[0] = 1;
                out[1..].copy_from_slice(&c.to_be_bytes());
            }
        }
        out
    }
}

/// Symmetric session key for one ordered (sender, receiver) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub key: [u8; 32],
    /// The receiver this key authenticates towards.
    pub peer: PeerId,
    pub epoch: u64,
}

/// 32-byte HMAC-SHA-256 tag.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Mac(pub [u8; 32]);

impl std::fmt::Debug for Mac {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mac({})", hex::encode(&self.0[..8]))
    }
}

/// One MAC per multicast target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authenticator {
    pub entries: Vec<(ReplicaId, Mac)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("no session keys supplied")]
    NoKeys,
    #[error("duplicate authenticator target {0:?}")]
    DuplicateTarget(ReplicaId),
    #[error("session key peer is not a replica")]
    NotAReplica,
}

/// SHA-256 of `bytes`.
pub fn sha256(bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest(h.finalize().into())
}

/// Deterministic HMAC-SHA-256 over `payload`.
pub fn mac_sign(key: &SessionKey, payload: &[u8]) -> Mac {
    let mut h = HmacSha256::new_from_slice(&key.key).expect("HMAC accepts any key length");
    HmacTrait::update(&mut h, payload);
    Mac(h.finalize().into_bytes().into())
}

/// Constant-shape comparison; tag forgery succeeds with probability 2^-256.
pub fn mac_verify(key: &SessionKey, payload: &[u8], mac: &Mac) -> bool {
    let expected = mac_sign(key, payload);
    // Bitwise accumulate to avoid early exit on mismatch.
    let mut diff = 0u8;
    for (a, b) in expected.0.iter().zip(mac.0.iter()) {
        diff |= a ^ b;
    }
    diff == 0
}

/// Build an authenticator with one MAC per target key.
pub fn authenticator_sign(
    keys: &[SessionKey],
    payload: &[u8],
) -> Result<Authenticator, AuthError> {
    if keys.is_empty() {
        return Err(AuthError::NoKeys);
    }
    let mut entries = Vec::with_capacity(keys.len());
    for key in keys {
        let target = match key.peer {
            PeerId::Replica(r) => r,
            PeerId::Client(_) => return Err(AuthError::NotAReplica),
        };
        if entries.iter().any(|(t, _)| *t == target) {
            return Err(AuthError::DuplicateTarget(target));
        }
        entries.push((target, mac_sign(key, payload)));
    }
    Ok(Authenticator { entries })
}

/// True iff the entry for `self_id` exists and verifies under `self_key`.
/// A missing entry is a verification failure, not an error.
pub fn authenticator_verify(
    self_key: &SessionKey,
    payload: &[u8],
    a: &Authenticator,
    self_id: ReplicaId,
) -> bool {
    match a.entries.iter().find(|(t, _)| *t == self_id) {
        Some((_, mac)) => mac_verify(self_key, payload, mac),
        None => false,
    }
}

/// Derives all pairwise session keys from one root secret:
/// `key(s, r) = HMAC(root, enc(s) || enc(r) || epoch)`.
///
/// Both ends derive the same key for an ordered pair. The public-key
/// exchange that would establish the root in a deployment is out of scope;
/// epoch bumps model periodic refresh but no schedule is wired up.
#[derive(Debug, Clone)]
pub struct Keyring {
    root: [u8; 32],
    epoch: u64,
}

impl Keyring {
    pub fn new(root: [u8; 32]) -> Self {
        Keyring { root, epoch: 0 }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Advance to the next key epoch; all derived keys change.
    pub fn bump_epoch(&mut self) {
        self.epoch += 1;
    }

    /// Session key for messages flowing `sender -> receiver`.
    pub fn key_between(&self, sender: PeerId, receiver: PeerId) -> SessionKey {
        let mut h = HmacSha256::new_from_slice(&self.root).expect("HMAC accepts any key length");
        HmacTrait::update(&mut h, &sender.encode());
        HmacTrait::update(&mut h, &receiver.encode());
        HmacTrait::update(&mut h, &self.epoch.to_be_bytes());
        SessionKey {
            key: h.finalize().into_bytes().into(),
            peer: receiver,
            epoch: self.epoch,
        }
    }

    /// Keys for a multicast from `sender` to every replica in `targets`.
    pub fn multicast_keys(&self, sender: PeerId, targets: &[ReplicaId]) -> Vec<SessionKey> {
        targets
            .iter()
            .map(|r| self.key_between(sender, PeerId::Replica(*r)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn key(bytes: [u8; 32]) -> SessionKey {
        SessionKey {
            key: bytes,
            peer: PeerId::Replica(ReplicaId(0)),
            epoch: 0,
        }
    }

    #[test]
    fn mac_deterministic() {
        let k = key([3u8; 32]);
        assert_eq!(mac_sign(&k, b"payload"), mac_sign(&k, b"payload"));
    }

    /// RFC 4231 test case 1 (published known-answer vector).
    #[test]
    fn rfc4231_case_1() {
        let mut kb = [0u8; 32];
        kb[..20].copy_from_slice(&[0x0b; 20]);
        // RFC key is 20 bytes; HMAC pads, so feed the raw 20 bytes directly.
        let mut h = HmacSha256::new_from_slice(&[0x0b; 20]).unwrap();
        HmacTrait::update(&mut h, b"Hi There");
        let tag: [u8; 32] = h.finalize().into_bytes().into();
        assert_eq!(
            hex::encode(tag),
            "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"
        );
    }

    /// RFC 4231 test case 2: "Jefe" / "what do ya want for nothing?".
    #[test]
    fn rfc4231_case_2() {
        let mut h = HmacSha256::new_from_slice(b"Jefe").unwrap();
        HmacTrait::update(&mut h, b"what do ya want for nothing?");
        let tag: [u8; 32] = h.finalize().into_bytes().into();
        assert_eq!(
            hex::encode(tag),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn perturbed_payloads_get_distinct_macs() {
        let k = key([9u8; 32]);
        let mut rng = ChaCha20Rng::seed_from_u64(4231);
        let mut payload = vec![0u8; 64];
        rng.fill_bytes(&mut payload);
        let base = mac_sign(&k, &payload);
        for _ in 0..10_000 {
            let mut p = payload.clone();
            let idx = (rng.next_u64() as usize) % p.len();
            let bit = 1u8 << (rng.next_u64() % 8);
            p[idx] ^= bit;
            assert_ne!(mac_sign(&k, &p), base);
        }
    }

    #[test]
    fn random_tags_all_rejected() {
        let k = key([1u8; 32]);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let mut forged = [0u8; 32];
            rng.fill_bytes(&mut forged);
            assert!(!mac_verify(&k, b"message", &Mac(forged)));
        }
    }

    fn multicast_fixture() -> (Keyring, Vec<SessionKey>) {
        let ring = Keyring::new([42u8; 32]);
        let targets: Vec<ReplicaId> = (1..4).map(ReplicaId).collect();
        let keys = ring.multicast_keys(PeerId::Replica(ReplicaId(0)), &targets);
        (ring, keys)
    }

    #[test]
    fn authenticator_one_entry_per_target() {
        let (_, keys) = multicast_fixture();
        let a = authenticator_sign(&keys, b"m").unwrap();
        assert_eq!(a.entries.len(), 3);
        let targets: Vec<u64> = a.entries.iter().map(|(t, _)| t.0).collect();
        assert_eq!(targets, vec![1, 2, 3]);
    }

    #[test]
    fn authenticator_single_target_equals_mac() {
        let (_, keys) = multicast_fixture();
        let a = authenticator_sign(&keys[..1], b"m").unwrap();
        assert_eq!(a.entries.len(), 1);
        assert_eq!(a.entries[0].1, mac_sign(&keys[0], b"m"));
    }

    #[test]
    fn authenticator_rejects_duplicate_targets() {
        let (_, keys) = multicast_fixture();
        let dup = vec![keys[0].clone(), keys[0].clone()];
        assert_eq!(
            authenticator_sign(&dup, b"m"),
            Err(AuthError::DuplicateTarget(ReplicaId(1)))
        );
    }

    #[test]
    fn cross_verification_matrix() {
        let (ring, keys) = multicast_fixture();
        let a = authenticator_sign(&keys, b"payload").unwrap();
        for i in 1..4u64 {
            for j in 1..4u64 {
                let k = ring.key_between(PeerId::Replica(ReplicaId(0)), PeerId::Replica(ReplicaId(j)));
                let swapped = Authenticator {
                    entries: a
                        .entries
                        .iter()
                        .map(|(t, m)| {
                            // Give replica i the entry signed for replica j.
                            if t.0 == i {
                                let other = a.entries.iter().find(|(t2, _)| t2.0 == j).unwrap();
                                (*t, other.1)
                            } else {
                                (*t, *m)
                            }
                        })
                        .collect(),
                };
                let _ = k;
                let key_i = ring.key_between(PeerId::Replica(ReplicaId(0)), PeerId::Replica(ReplicaId(i)));
                let ok = authenticator_verify(&key_i, b"payload", &swapped, ReplicaId(i));
                assert_eq!(ok, i == j, "entry for {j} verified by {i}");
            }
        }
    }

    #[test]
    fn verify_fails_on_flipped_payload() {
        let (ring, keys) = multicast_fixture();
        let a = authenticator_sign(&keys, b"payload").unwrap();
        let key_2 = ring.key_between(PeerId::Replica(ReplicaId(0)), PeerId::Replica(ReplicaId(2)));
        assert!(authenticator_verify(&key_2, b"payload", &a, ReplicaId(2)));
        assert!(!authenticator_verify(&key_2, b"pbyload", &a, ReplicaId(2)));
        assert!(!authenticator_verify(&key_2, b"payload", &a, ReplicaId(9)));
    }

    #[test]
    fn verdict_depends_only_on_own_entry() {
        let (ring, keys) = multicast_fixture();
        let mut a = authenticator_sign(&keys, b"payload").unwrap();
        let key_2 = ring.key_between(PeerId::Replica(ReplicaId(0)), PeerId::Replica(ReplicaId(2)));
        // Corrupt every entry except replica 2's.
        for (t, m) in a.entries.iter_mut() {
            if t.0 != 2 {
                m.0[0] ^= 0xff;
            }
        }
        assert!(authenticator_verify(&key_2, b"payload", &a, ReplicaId(2)));
    }

    #[test]
    fn epoch_bump_changes_keys() {
        let mut ring = Keyring::new([5u8; 32]);
        let before = ring.key_between(PeerId::Client(1), PeerId::Replica(ReplicaId(0)));
        ring.bump_epoch();
        let after = ring.key_between(PeerId::Client(1), PeerId::Replica(ReplicaId(0)));
        assert_ne!(before.key, after.key);
        assert_eq!(after.epoch, 1);
    }
}
