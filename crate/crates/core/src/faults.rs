//! Fault-injection wrappers and executable demonstrations of why naive
//! randomness-control schemes fall to Byzantine clients.
//!
//! Faulty behaviors are action-stream transformers around an honest replica,
//! so every behavior composes with both the BA and CT paths. A wrapper holds
//! its own keyring and re-authenticates whatever it mutates: a faulty
//! replica can always sign its own lies.

use std::collections::{BTreeMap, VecDeque};

use num_bigint::BigUint;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::authcrypt::{authenticator_sign, mac_sign, AuthTrailer, Keyring, PeerId};
use crate::entropy::{combine, truncate, RandomShare, ShareSet};
use crate::protocol::{Message, Payload, PpUpdatePayload, ReplicaId};
use crate::replica::{Action, Event, Replica, SendTarget};
use crate::threshold::{self, signature_to_random, SignatureShare};
use crate::Nanos;

/// One injected misbehavior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultBehavior {
    /// Replace every entropy share this replica contributes with fixed bytes.
    BiasedShares([u8; 32]),
    /// Perturb the threshold signature share on outgoing commits.
    CorruptSigShares,
    /// As primary, send different share sets to disjoint backup subsets.
    EquivocateShareSet,
    /// Drop all outgoing commits.
    MuteCommit,
    /// Re-send old protocol messages alongside new ones.
    StaleReplay,
}

impl FaultBehavior {
    pub fn name(&self) -> &'static str {
        match self {
            FaultBehavior::BiasedShares(_) => "biased_shares",
            FaultBehavior::CorruptSigShares => "corrupt_sig_shares",
            FaultBehavior::EquivocateShareSet => "equivocate_share_set",
            FaultBehavior::MuteCommit => "mute_commit",
            FaultBehavior::StaleReplay => "stale_replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpec {
    pub target: ReplicaId,
    pub behavior: FaultBehavior,
}

/// An honest replica wrapped in a misbehaving shell.
pub struct FaultyReplica {
    inner: Replica,
    behavior: FaultBehavior,
    keyring: Keyring,
    n_replicas: u64,
    /// Shares observed in incoming pp-updates, per sequence; used to build
    /// plausible alternate share sets when equivocating.
    observed_shares: BTreeMap<u64, BTreeMap<ReplicaId, RandomShare>>,
    replay_log: VecDeque<(SendTarget, Message)>,
    replay_cursor: usize,
}

/// Wrap a replica with a fault behavior.
pub fn wrap(replica: Replica, behavior: FaultBehavior) -> FaultyReplica {
    let keyring = replica.keyring().clone();
    let n_replicas = replica.config().quorums.n_replicas();
    FaultyReplica {
        inner: replica,
        behavior,
        keyring,
        n_replicas,
        observed_shares: BTreeMap::new(),
        replay_log: VecDeque::new(),
        replay_cursor: 0,
    }
}

impl FaultyReplica {
    pub fn id(&self) -> ReplicaId {
        self.inner.id()
    }

    pub fn inner(&self) -> &Replica {
        &self.inner
    }

    pub fn drain_charged(&mut self) -> Nanos {
        self.inner.drain_charged()
    }

    pub fn on_event(&mut self, ev: Event, now: Nanos) -> Vec<Action> {
        if let Event::Message { msg, .. } = &ev {
            if let Payload::PpUpdate(u) = &msg.payload {
                if let PpUpdatePayload::Share(share) = &u.payload {
                    self.observed_shares
                        .entry(u.n.0)
                        .or_default()
                        .insert(u.i, *share);
                }
            }
        }
        let actions = self.inner.on_event(ev, now);
        self.transform(actions)
    }

    fn other_replicas(&self) -> Vec<ReplicaId> {
        (0..self.n_replicas)
            .map(ReplicaId)
            .filter(|r| *r != self.inner.id())
            .collect()
    }

    /// Re-authenticate a mutated message under this replica's own keys.
    fn resign(&self, msg: &mut Message, to: &SendTarget) {
        let bytes = msg.signed_bytes();
        let self_peer = PeerId::Replica(self.inner.id());
        match (&msg.auth, to) {
            (AuthTrailer::Mac(_), SendTarget::Client(c)) => {
                let key = self.keyring.key_between(self_peer, PeerId::Client(*c));
                msg.auth = AuthTrailer::Mac(mac_sign(&key, &bytes));
            }
            (AuthTrailer::Mac(_), SendTarget::Replica(r)) => {
                let key = self.keyring.key_between(self_peer, PeerId::Replica(*r));
                msg.auth = AuthTrailer::Mac(mac_sign(&key, &bytes));
            }
            _ => {
                let keys = self
                    .keyring
                    .multicast_keys(self_peer, &self.other_replicas());
                msg.auth = AuthTrailer::Authenticator(
                    authenticator_sign(&keys, &bytes).expect("distinct targets"),
                );
            }
        }
    }

    fn transform(&mut self, actions: Vec<Action>) -> Vec<Action> {
        let mut out = Vec::with_capacity(actions.len());
        for action in actions {
            match action {
                Action::Send { to, mut msg } => match &self.behavior {
                    FaultBehavior::BiasedShares(bytes) => {
                        let fixed = RandomShare(*bytes);
                        let mut mutated = false;
                        match &mut msg.payload {
                            Payload::PrePrepare(pp) => {
                                if pp.r_p.is_some() {
                                    pp.r_p = Some(fixed);
                                    mutated = true;
                                }
                            }
                            Payload::PpUpdate(u) => match &mut u.payload {
                                PpUpdatePayload::Share(s) => {
                                    *s = fixed;
                                    mutated = true;
                                }
                                PpUpdatePayload::ShareSet(set) => {
                                    for (share, id) in set.entries.iter_mut() {
                                        if *id == self.inner.id() {
                                            *share = fixed;
                                            mutated = true;
                                        }
                                    }
                                }
                            },
                            _ => {}
                        }
                        if mutated {
                            self.resign(&mut msg, &to);
                        }
                        out.push(Action::Send { to, msg });
                    }
                    FaultBehavior::CorruptSigShares => {
                        if let Payload::Commit(c) = &mut msg.payload {
                            if let Some(share) = &mut c.sig_share {
                                share.value = &share.value + BigUint::one();
                                self.resign(&mut msg, &to);
                            }
                        }
                        out.push(Action::Send { to, msg });
                    }
                    FaultBehavior::EquivocateShareSet => {
                        let is_share_set = matches!(
                            &msg.payload,
                            Payload::PpUpdate(u) if matches!(u.payload, PpUpdatePayload::ShareSet(_))
                        );
                        if is_share_set {
                            out.extend(self.equivocate(msg));
                        } else {
                            out.push(Action::Send { to, msg });
                        }
                    }
                    FaultBehavior::MuteCommit => {
                        if !matches!(msg.payload, Payload::Commit(_)) {
                            out.push(Action::Send { to, msg });
                        }
                    }
                    FaultBehavior::StaleReplay => {
                        self.replay_log.push_back((to, msg.clone()));
                        if self.replay_log.len() > 64 {
                            self.replay_log.pop_front();
                            self.replay_cursor = self.replay_cursor.saturating_sub(1);
                        }
                        out.push(Action::Send { to, msg });
                        // Tack a stale duplicate onto every send burst.
                        if self.replay_log.len() > 1 {
                            let idx = self.replay_cursor % (self.replay_log.len() - 1);
                            self.replay_cursor = self.replay_cursor.wrapping_add(1);
                            let (old_to, old_msg) = self.replay_log[idx].clone();
                            out.push(Action::Send {
                                to: old_to,
                                msg: old_msg,
                            });
                        }
                    }
                },
                other => out.push(other),
            }
        }
        out
    }

    /// Split the share-set multicast: the first `2f` backups (by id) get the
    /// true set, the rest get an alternate one. When a non-referenced backup
    /// share has been observed the alternate swaps it in (both sets then
    /// look plausible); otherwise one referenced share is tampered with,
    /// which recipients detect and reject.
    fn equivocate(&mut self, msg: Message) -> Vec<Action> {
        let Payload::PpUpdate(u) = &msg.payload else {
            return vec![Action::Send {
                to: SendTarget::AllOtherReplicas,
                msg,
            }];
        };
        let PpUpdatePayload::ShareSet(true_set) = &u.payload else {
            return vec![Action::Send {
                to: SendTarget::AllOtherReplicas,
                msg,
            }];
        };

        let mut alt_entries = true_set.entries.clone();
        let observed = self.observed_shares.get(&u.n.0);
        let swap_in = observed.and_then(|m| {
            m.iter()
                .find(|(id, _)| !true_set.entries.iter().any(|(_, rid)| rid == *id))
                .map(|(id, share)| (*id, *share))
        });
        match swap_in {
            Some((id, share)) => {
                // Replace the last non-self tuple with another genuine share.
                if let Some(entry) = alt_entries
                    .iter_mut()
                    .rev()
                    .find(|(_, rid)| *rid != self.inner.id())
                {
                    *entry = (share, id);
                }
            }
            None => {
                if let Some((share, _)) = alt_entries
                    .iter_mut()
                    .rev()
                    .find(|(_, rid)| *rid != self.inner.id())
                {
                    share.0[31] ^= 0xff;
                }
            }
        }

        let mut alt_payload = u.clone();
        alt_payload.payload = PpUpdatePayload::ShareSet(ShareSet {
            entries: alt_entries,
        });
        let mut alt_msg = Message {
            payload: Payload::PpUpdate(alt_payload),
            auth: msg.auth.clone(),
        };
        self.resign(&mut alt_msg, &SendTarget::AllOtherReplicas);

        let backups: Vec<ReplicaId> = self
            .other_replicas()
            .into_iter()
            .filter(|r| *r != self.inner.id())
            .collect();
        let split = (2 * (self.n_replicas - 1) / 3) as usize; // first 2f get the truth
        let mut out = Vec::new();
        for (idx, backup) in backups.iter().enumerate() {
            let m = if idx < split { msg.clone() } else { alt_msg.clone() };
            out.push(Action::Send {
                to: SendTarget::Replica(*backup),
                msg: m,
            });
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Seed-predictor attack demonstrations
// ---------------------------------------------------------------------------

/// Randomness scheme under attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedScheme {
    /// PRNG seeded with the request's sequence number.
    SeqSeeded,
    /// PRNG seeded with a timestamp the adversary can bracket.
    TimestampSeeded {
        granularity_ms: u64,
        window_ms: u64,
    },
    /// Collectively determined via the entropy-agreement path.
    Ba,
    /// Collectively determined via threshold coin tossing.
    Ct,
}

/// The (publicly known) PRNG a naive scheme would seed. SplitMix64 step,
/// top 32 bits.
pub fn toy_prng32(seed: u64) -> u32 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)).wrapping_shr(32) as u32
}

/// Simulate an adversarial client that knows the PRNG algorithm and guesses
/// seeds; returns the fraction of trials where it predicted the 32-bit
/// random value. `guesses` bounds the attempts per trial for the collective
/// schemes (it is ignored where the seed is directly known).
pub fn seed_predictor_attack(scheme: SeedScheme, trials: u64, guesses: u64, seed: u64) -> f64 {
    assert!(trials >= 1);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    match scheme {
        SeedScheme::SeqSeeded => {
            for trial in 0..trials {
                let sequence_number = trial + 1;
                let value = toy_prng32(sequence_number);
                // The seed IS the sequence number, which the client sees.
                if toy_prng32(sequence_number) == value {
                    hits += 1;
                }
            }
        }
        SeedScheme::TimestampSeeded {
            granularity_ms,
            window_ms,
        } => {
            let g = granularity_ms.max(1);
            for trial in 0..trials {
                let send_time_ms = 1_700_000_000_000u64 + trial * 13;
                // True timestamp lands within the window, on the grid.
                let offset_steps = rng.random_range(0..=(2 * window_ms / g));
                let true_ts = (send_time_ms.saturating_sub(window_ms) + offset_steps * g) / g * g;
                let value = toy_prng32(true_ts);
                let mut predicted = false;
                let mut candidate = send_time_ms.saturating_sub(window_ms) / g * g;
                while candidate <= send_time_ms + window_ms {
                    if toy_prng32(candidate) == value {
                        predicted = true;
                        break;
                    }
                    candidate += g;
                }
                if predicted {
                    hits += 1;
                }
            }
        }
        SeedScheme::Ba => {
            // 2f shares under adversarial control, one honest high-entropy
            // share: the combined value is uniform, so the best the client
            // can do is enumerate guesses.
            let adv = [RandomShare([0x11; 32]), RandomShare([0x22; 32])];
            for _ in 0..trials {
                let mut honest = [0u8; 32];
                rng.fill_bytes(&mut honest);
                let set = ShareSet {
                    entries: vec![
                        (adv[0], ReplicaId(0)),
                        (adv[1], ReplicaId(1)),
                        (RandomShare(honest), ReplicaId(2)),
                    ],
                };
                let value = truncate(&combine(&set, 1).expect("valid set"), 32).unwrap() as u32;
                if (0..guesses).any(|g| toy_prng32(g) == value) {
                    hits += 1;
                }
            }
        }
        SeedScheme::Ct => {
            let (gk, shares) = threshold::deal(2, 4, 64, seed ^ 0xC01F).expect("deal");
            for trial in 0..trials {
                let mut d = [0u8; 32];
                rng.fill_bytes(&mut d);
                let mut msg = d.to_vec();
                msg.extend_from_slice(&trial.to_be_bytes());
                let sig_shares: Vec<SignatureShare> = shares
                    .iter()
                    .take(gk.k as usize)
                    .map(|ks| threshold::sign_share(ks, &msg))
                    .collect();
                let sig = threshold::combine(&gk, &msg, &sig_shares).expect("combine");
                let value = signature_to_random(&sig, 32).unwrap() as u32;
                if (0..guesses).any(|g| toy_prng32(g) == value) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / trials as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_seeded_is_fully_predictable() {
        let rate = seed_predictor_attack(SeedScheme::SeqSeeded, 100, 0, 1);
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn timestamp_seeded_is_fully_predictable_within_window() {
        let rate = seed_predictor_attack(
            SeedScheme::TimestampSeeded {
                granularity_ms: 1,
                window_ms: 100,
            },
            100,
            0,
            2,
        );
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn ba_resists_polynomial_guessing() {
        let rate = seed_predictor_attack(SeedScheme::Ba, 200, 200, 3);
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn ct_resists_polynomial_guessing() {
        let rate = seed_predictor_attack(SeedScheme::Ct, 50, 200, 4);
        assert_eq!(rate, 0.0);
    }
}
