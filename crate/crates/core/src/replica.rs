//! The event-driven replica state machine: three-phase ordering plus the two
//! collective-randomness extensions, request batching, and in-order delivery.
//!
//! Each replica is a single-threaded deterministic machine: feed it one event
//! at a time and it returns the actions to perform. All cryptographic work it
//! performs is metered through a [`CostMeter`] so a harness can charge the
//! simulated clock.
//!
//! Verification is lazy: incoming votes are buffered unauthenticated and only
//! verified (and charged) when they are actually consumed towards a quorum.
//! A replica never pays for messages it does not need.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::authcrypt::{
    authenticator_sign, authenticator_verify, mac_sign, mac_verify, sha256, AuthTrailer, Keyring,
    PeerId,
};
use crate::costs::{CostMeter, CostTable};
use crate::entropy::{combine, truncate, CombinedRandom, EntropySource, RandomShare, ShareSet};
use crate::protocol::{
    primary_of, Commit, Digest, Message, Payload, PpUpdate, PpUpdatePayload, PrePrepare, Prepare,
    QuorumSpec, ReplicaId, Reply, Request, SeqNum, View,
};
use crate::threshold::{
    self, signature_to_random_with, CoinHash, GroupKey, GroupSignature, KeyShare, SignatureShare,
};
use crate::Nanos;

/// Which collective-randomness mechanism runs on top of the ordering core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Plain ordering, no randomness coordination.
    Base,
    /// Agreement on a set of entropy shares, combined by XOR.
    Ba,
    /// Threshold coin tossing over the ordered request.
    Ct,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Base => write!(f, "base"),
            Mode::Ba => write!(f, "ba"),
            Mode::Ct => write!(f, "ct"),
        }
    }
}

/// Classification of a request by the application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    Deterministic,
    Randomized { bits: u32 },
}

/// How the replica asks "will this request consume a random number?".
/// Classification is a pure function of the request payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppOracle {
    AllDeterministic,
    AllRandomized { bits: u32 },
    /// First payload byte 0x01 marks a randomized op; the second byte is the
    /// requested width in bits (8/16/32/64).
    PayloadTagged,
}

impl AppOracle {
    pub fn classify(&self, payload: &[u8]) -> OpClass {
        match self {
            AppOracle::AllDeterministic => OpClass::Deterministic,
            AppOracle::AllRandomized { bits } => OpClass::Randomized { bits: *bits },
            AppOracle::PayloadTagged => {
                if payload.len() >= 2 && payload[0] == 0x01 {
                    match payload[1] as u32 {
                        bits @ (8 | 16 | 32 | 64) => OpClass::Randomized { bits },
                        _ => OpClass::Deterministic,
                    }
                } else {
                    OpClass::Deterministic
                }
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplicaError {
    #[error("CT mode requires a key share and group key")]
    MissingKeyMaterial,
    #[error("coin batching requires request batching")]
    CoinBatchingWithoutBatching,
    #[error("CT mode with request batching requires coin batching")]
    PerRequestCoinInBatch,
    #[error("replica id {0} out of range for n={1}")]
    IdOutOfRange(u64, u64),
    #[error("key share holder {holder} does not match replica id {id}")]
    HolderMismatch { holder: u32, id: u64 },
}

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub id: ReplicaId,
    pub quorums: QuorumSpec,
    pub mode: Mode,
    pub batching: bool,
    /// One coin serves the whole batch. Only meaningful with `batching`.
    pub ct_batching: bool,
    pub key_share: Option<KeyShare>,
    pub group_key: Option<GroupKey>,
    pub oracle: AppOracle,
    pub coin_hash: CoinHash,
    /// Base watchdog timeout; doubles on every expiry.
    pub timeout_base: Nanos,
    /// Minimum spacing between retransmission requests for the same gap.
    pub retransmit_min_interval: Nanos,
    pub max_batch: usize,
}

impl ReplicaConfig {
    pub fn validate(&self) -> Result<(), ReplicaError> {
        let n = self.quorums.n_replicas();
        if self.id.0 >= n {
            return Err(ReplicaError::IdOutOfRange(self.id.0, n));
        }
        if self.mode == Mode::Ct {
            let (Some(ks), Some(_)) = (&self.key_share, &self.group_key) else {
                return Err(ReplicaError::MissingKeyMaterial);
            };
            if u64::from(ks.holder) != self.id.0 + 1 {
                return Err(ReplicaError::HolderMismatch {
                    holder: ks.holder,
                    id: self.id.0,
                });
            }
        }
        if self.ct_batching && !self.batching {
            return Err(ReplicaError::CoinBatchingWithoutBatching);
        }
        if self.mode == Mode::Ct && self.batching && !self.ct_batching {
            return Err(ReplicaError::PerRequestCoinInBatch);
        }
        Ok(())
    }
}

/// What gets re-requested from the primary when pp-updates are missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetransmitWhat {
    pub v: View,
    pub n: SeqNum,
    pub missing: Vec<ReplicaId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendTarget {
    Replica(ReplicaId),
    Client(u64),
    /// Every replica except the sender.
    AllOtherReplicas,
    /// Every replica (client broadcast).
    AllReplicas,
}

/// Output of one state-machine step.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send {
        to: SendTarget,
        msg: Message,
    },
    /// In-order hand-off to the application. `slot` is the position inside
    /// the batch ordered under `n`.
    Deliver {
        n: SeqNum,
        slot: u32,
        request: Vec<u8>,
        random: Option<Vec<u8>>,
        client_id: u64,
        timestamp: u64,
    },
    StartTimer {
        id: u64,
        duration: Nanos,
    },
    RequestRetransmit {
        from: ReplicaId,
        what: RetransmitWhat,
    },
    /// Surfaced to the harness; the view-change protocol itself is not run.
    ViewChangeSignal {
        view: View,
    },
}

/// Input to one state-machine step.
#[derive(Debug, Clone)]
pub enum Event {
    Init,
    Message { from: PeerId, msg: Message },
    TimerFired { id: u64 },
    /// A backup asked this replica (the primary) to re-send pp-updates.
    RetransmitRequest {
        requester: ReplicaId,
        what: RetransmitWhat,
    },
}

/// Certificate phases, monotone in this order. `Idle` exists only for
/// certificates created by out-of-order arrivals before the pre-prepare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Idle,
    PrePrepared,
    Updated,
    Prepared,
    Committed,
    Delivered,
}

#[derive(Debug)]
struct Vote {
    sender: ReplicaId,
    digest: Digest,
    msg: Message,
    verified: bool,
    auth_failed: bool,
}

#[derive(Debug, Default)]
struct VoteLog {
    votes: Vec<Vote>,
}

impl VoteLog {
    /// First message per sender wins; later ones are idempotent no-ops.
    fn record(&mut self, sender: ReplicaId, digest: Digest, msg: Message) -> bool {
        if self.votes.iter().any(|v| v.sender == sender) {
            return false;
        }
        self.votes.push(Vote {
            sender,
            digest,
            msg,
            verified: false,
            auth_failed: false,
        });
        true
    }
}

/// Per-(view, sequence) accumulator of protocol evidence.
#[derive(Debug)]
pub struct OrderCertificate {
    pub v: View,
    pub n: SeqNum,
    pub d: Option<Digest>,
    requests: Vec<Request>,
    encoded_requests: Vec<Vec<u8>>,
    classes: Vec<OpClass>,
    randomized: bool,
    r_p: Option<RandomShare>,
    /// Backup entropy shares observed for this sequence, with the original
    /// message kept for forwarding; insertion order drives set selection.
    backup_shares: BTreeMap<ReplicaId, (RandomShare, Message)>,
    share_arrival: Vec<ReplicaId>,
    share_verified: BTreeSet<ReplicaId>,
    share_auth_failed: BTreeSet<ReplicaId>,
    pub share_set: Option<ShareSet>,
    pending_share_set: Option<ShareSet>,
    pub combined: Option<CombinedRandom>,
    pub d_prime: Option<Digest>,
    prepares: VoteLog,
    commits: VoteLog,
    valid_sig_shares: BTreeMap<u32, SignatureShare>,
    checked_sig_holders: BTreeSet<u32>,
    pub group_sig: Option<GroupSignature>,
    pub phase: Phase,
    sent_pp_update: bool,
    sent_prepare: bool,
    sent_commit: bool,
    own_prepare_digest: Option<Digest>,
    last_retransmit: Option<Nanos>,
}

impl OrderCertificate {
    fn new(v: View, n: SeqNum) -> Self {
        OrderCertificate {
            v,
            n,
            d: None,
            requests: Vec::new(),
            encoded_requests: Vec::new(),
            classes: Vec::new(),
            randomized: false,
            r_p: None,
            backup_shares: BTreeMap::new(),
            share_arrival: Vec::new(),
            share_verified: BTreeSet::new(),
            share_auth_failed: BTreeSet::new(),
            share_set: None,
            pending_share_set: None,
            combined: None,
            d_prime: None,
            prepares: VoteLog::default(),
            commits: VoteLog::default(),
            valid_sig_shares: BTreeMap::new(),
            checked_sig_holders: BTreeSet::new(),
            group_sig: None,
            phase: Phase::Idle,
            sent_pp_update: false,
            sent_prepare: false,
            sent_commit: false,
            own_prepare_digest: None,
            last_retransmit: None,
        }
    }

    fn advance(&mut self, to: Phase) {
        debug_assert!(to >= self.phase, "phase must be monotone");
        if to > self.phase {
            self.phase = to;
        }
    }

    fn has_pre_prepare(&self) -> bool {
        self.d.is_some()
    }
}

/// Drop/anomaly counters, surfaced for diagnostics and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub auth_failures: u64,
    pub protocol_drops: u64,
    pub equivocation_rejections: u64,
    pub duplicate_messages: u64,
    pub retransmit_requests: u64,
    pub dos_rejections: u64,
}

#[derive(Debug, Clone)]
struct ClientSession {
    last_timestamp: u64,
    cached_reply: Option<Message>,
    watchdog_armed_for: Option<u64>,
}

#[derive(Debug)]
struct PoolEntry {
    encoded: Vec<u8>,
    req: Request,
}

#[derive(Debug, Clone)]
enum TimerPurpose {
    RequestWatch { client_id: u64, timestamp: u64 },
}

/// Compute the batch digest: SHA-256 over the length-prefixed concatenation
/// of the encoded requests.
pub fn batch_digest(encoded_requests: &[Vec<u8>]) -> Digest {
    let mut buf = Vec::with_capacity(encoded_requests.iter().map(|r| r.len() + 4).sum());
    for r in encoded_requests {
        buf.extend_from_slice(&(r.len() as u32).to_be_bytes());
        buf.extend_from_slice(r);
    }
    sha256(&buf)
}

/// The digest prepare/commit quorums vote over on the BA path:
/// `d' = H(d || combined-random)`.
pub fn bound_digest(d: &Digest, combined: &CombinedRandom) -> Digest {
    let mut buf = [0u8; 64];
    buf[..32].copy_from_slice(&d.0);
    buf[32..].copy_from_slice(&combined.0);
    sha256(&buf)
}

/// Message signed by the threshold coin: `d || n`, big-endian.
pub fn coin_message(d: &Digest, n: SeqNum) -> Vec<u8> {
    let mut buf = Vec::with_capacity(40);
    buf.extend_from_slice(&d.0);
    buf.extend_from_slice(&n.0.to_be_bytes());
    buf
}

pub struct Replica {
    cfg: ReplicaConfig,
    keyring: Keyring,
    entropy: EntropySource,
    view: View,
    next_seq: u64,
    last_delivered: u64,
    certs: BTreeMap<u64, OrderCertificate>,
    pool: VecDeque<PoolEntry>,
    in_progress: HashSet<(u64, u64)>,
    outstanding: BTreeSet<u64>,
    sessions: HashMap<u64, ClientSession>,
    timers: HashMap<u64, TimerPurpose>,
    next_timer: u64,
    timeout_current: Nanos,
    suspected_view: View,
    pub counters: Counters,
    meter: CostMeter,
}

impl Replica {
    pub fn new(
        cfg: ReplicaConfig,
        keyring: Keyring,
        entropy: EntropySource,
        costs: Option<CostTable>,
    ) -> Result<Self, ReplicaError> {
        cfg.validate()?;
        let timeout = cfg.timeout_base;
        Ok(Replica {
            cfg,
            keyring,
            entropy,
            view: View(0),
            next_seq: 1,
            last_delivered: 0,
            certs: BTreeMap::new(),
            pool: VecDeque::new(),
            in_progress: HashSet::new(),
            outstanding: BTreeSet::new(),
            sessions: HashMap::new(),
            timers: HashMap::new(),
            next_timer: 0,
            timeout_current: timeout,
            suspected_view: View(0),
            counters: Counters::default(),
            meter: match costs {
                Some(t) => CostMeter::with_table(t),
                None => CostMeter::disabled(),
            },
        })
    }

    pub fn id(&self) -> ReplicaId {
        self.cfg.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn keyring(&self) -> &Keyring {
        &self.keyring
    }

    pub fn last_delivered(&self) -> u64 {
        self.last_delivered
    }

    pub fn certificate(&self, n: u64) -> Option<&OrderCertificate> {
        self.certs.get(&n)
    }

    pub fn current_timeout(&self) -> Nanos {
        self.timeout_current
    }

    /// Simulated CPU time accrued since the last drain.
    pub fn drain_charged(&mut self) -> Nanos {
        self.meter.drain()
    }

    fn primary(&self) -> ReplicaId {
        primary_of(self.view, self.cfg.quorums.n_replicas()).expect("validated config")
    }

    pub fn is_primary(&self) -> bool {
        self.primary() == self.cfg.id
    }

    fn other_replicas(&self) -> Vec<ReplicaId> {
        (0..self.cfg.quorums.n_replicas())
            .map(ReplicaId)
            .filter(|r| *r != self.cfg.id)
            .collect()
    }

    fn self_peer(&self) -> PeerId {
        PeerId::Replica(self.cfg.id)
    }

    /// Build and charge an authenticator-protected multicast message.
    fn multicast_msg(&mut self, payload: Payload) -> Message {
        self.meter.charge_auth_gen();
        let bytes = crate::protocol::payload_bytes(&payload);
        let keys = self
            .keyring
            .multicast_keys(self.self_peer(), &self.other_replicas());
        let auth = authenticator_sign(&keys, &bytes).expect("distinct targets");
        Message {
            payload,
            auth: AuthTrailer::Authenticator(auth),
        }
    }

    /// Build and charge a MAC-protected point-to-point message.
    fn mac_msg(&mut self, payload: Payload, to: PeerId) -> Message {
        self.meter.charge_mac_gen();
        let bytes = crate::protocol::payload_bytes(&payload);
        let key = self.keyring.key_between(self.self_peer(), to);
        Message {
            payload,
            auth: AuthTrailer::Mac(mac_sign(&key, &bytes)),
        }
    }

    /// Verify a message against the claimed originator, charging one
    /// authenticator (or MAC) verification.
    fn verify_from(&mut self, originator: PeerId, msg: &Message) -> bool {
        let bytes = msg.signed_bytes();
        let key = self.keyring.key_between(originator, self.self_peer());
        match &msg.auth {
            AuthTrailer::Authenticator(a) => {
                self.meter.charge_auth_verify();
                authenticator_verify(&key, &bytes, a, self.cfg.id)
            }
            AuthTrailer::Mac(m) => {
                self.meter.charge_mac_verify();
                mac_verify(&key, &bytes, m)
            }
        }
    }

    // -----------------------------------------------------------------
    // Event entry point
    // -----------------------------------------------------------------

    pub fn on_event(&mut self, ev: Event, now: Nanos) -> Vec<Action> {
        let mut actions = Vec::new();
        match ev {
            Event::Init => {}
            Event::Message { from, msg } => self.on_message(from, msg, now, &mut actions),
            Event::TimerFired { id } => self.on_timeout(id, &mut actions),
            Event::RetransmitRequest { requester, what } => {
                self.on_retransmit_request(requester, what, &mut actions)
            }
        }
        actions
    }

    fn on_message(&mut self, from: PeerId, msg: Message, now: Nanos, actions: &mut Vec<Action>) {
        match &msg.payload {
            Payload::Request(_) => self.on_request(from, msg, now, actions),
            Payload::PrePrepare(_) => self.on_pre_prepare(from, msg, now, actions),
            Payload::PpUpdate(_) => self.on_pp_update(from, msg, now, actions),
            Payload::Prepare(_) => self.on_prepare(from, msg, now, actions),
            Payload::Commit(_) => self.on_commit(from, msg, now, actions),
            Payload::Reply(_) => {
                // Replicas never consume replies.
                self.counters.protocol_drops += 1;
            }
        }
    }

    // -----------------------------------------------------------------
    // Request handling and proposing
    // -----------------------------------------------------------------

    fn on_request(&mut self, _from: PeerId, msg: Message, now: Nanos, actions: &mut Vec<Action>) {
        let Payload::Request(req) = &msg.payload else {
            unreachable!()
        };
        let req = req.clone();
        // Requests always authenticate against the originating client,
        // whether they arrive directly or forwarded by a backup.
        if !self.verify_from(PeerId::Client(req.client_id), &msg) {
            self.counters.auth_failures += 1;
            return;
        }

        let session = self
            .sessions
            .entry(req.client_id)
            .or_insert_with(|| ClientSession {
                last_timestamp: 0,
                cached_reply: None,
                watchdog_armed_for: None,
            });
        if req.timestamp <= session.last_timestamp {
            if req.timestamp == session.last_timestamp {
                if let Some(reply) = session.cached_reply.clone() {
                    actions.push(Action::Send {
                        to: SendTarget::Client(req.client_id),
                        msg: reply,
                    });
                }
            }
            self.counters.duplicate_messages += 1;
            return;
        }

        if self.is_primary() {
            if self.in_progress.contains(&(req.client_id, req.timestamp)) {
                self.counters.duplicate_messages += 1;
                return;
            }
            self.in_progress.insert((req.client_id, req.timestamp));
            self.pool.push_back(PoolEntry {
                encoded: crate::protocol::encode(&msg),
                req,
            });
            self.maybe_propose(actions);
        } else {
            // Buffer-and-forward, plus a watchdog so a mute primary is
            // eventually reported.
            let primary = self.primary();
            actions.push(Action::Send {
                to: SendTarget::Replica(primary),
                msg,
            });
            let session = self.sessions.get_mut(&req.client_id).expect("just inserted");
            if session.watchdog_armed_for != Some(req.timestamp) {
                session.watchdog_armed_for = Some(req.timestamp);
                let id = self.next_timer;
                self.next_timer += 1;
                self.timers.insert(
                    id,
                    TimerPurpose::RequestWatch {
                        client_id: req.client_id,
                        timestamp: req.timestamp,
                    },
                );
                actions.push(Action::StartTimer {
                    id,
                    duration: self.timeout_current,
                });
            }
            let _ = now;
        }
    }

    fn maybe_propose(&mut self, actions: &mut Vec<Action>) {
        if !self.is_primary() {
            return;
        }
        if self.cfg.batching {
            if !self.outstanding.is_empty() || self.pool.is_empty() {
                return;
            }
            let take = self.pool.len().min(self.cfg.max_batch);
            let batch: Vec<PoolEntry> = self.pool.drain(..take).collect();
            self.propose(batch, actions);
        } else {
            while let Some(entry) = self.pool.pop_front() {
                self.propose(vec![entry], actions);
            }
        }
    }

    fn propose(&mut self, batch: Vec<PoolEntry>, actions: &mut Vec<Action>) {
        let n = SeqNum(self.next_seq);
        self.next_seq += 1;
        self.outstanding.insert(n.0);

        let encoded: Vec<Vec<u8>> = batch.iter().map(|e| e.encoded.clone()).collect();
        let requests: Vec<Request> = batch.iter().map(|e| e.req.clone()).collect();
        let classes: Vec<OpClass> = requests
            .iter()
            .map(|r| self.cfg.oracle.classify(&r.op_payload))
            .collect();
        let randomized = classes
            .iter()
            .any(|c| matches!(c, OpClass::Randomized { .. }));
        let d = batch_digest(&encoded);

        let r_p = if self.cfg.mode == Mode::Ba && randomized {
            Some(self.entropy.extract_share().expect("entropy source"))
        } else {
            None
        };

        let pp = PrePrepare {
            v: self.view,
            n,
            d,
            requests: encoded.clone(),
            r_p,
        };
        let msg = self.multicast_msg(Payload::PrePrepare(pp));
        actions.push(Action::Send {
            to: SendTarget::AllOtherReplicas,
            msg,
        });

        let cert = self
            .certs
            .entry(n.0)
            .or_insert_with(|| OrderCertificate::new(self.view, n));
        cert.d = Some(d);
        cert.requests = requests;
        cert.encoded_requests = encoded;
        cert.classes = classes;
        cert.randomized = randomized;
        cert.r_p = r_p;
        if !(self.cfg.mode == Mode::Ba && randomized) {
            cert.d_prime = Some(d);
        }
        cert.advance(Phase::PrePrepared);

        self.progress(n.0, actions);
    }

    // -----------------------------------------------------------------
    // Pre-prepare
    // -----------------------------------------------------------------

    fn on_pre_prepare(&mut self, from: PeerId, msg: Message, _now: Nanos, actions: &mut Vec<Action>) {
        let Payload::PrePrepare(pp) = &msg.payload else {
            unreachable!()
        };
        let pp = pp.clone();
        if self.is_primary() {
            self.counters.protocol_drops += 1;
            return;
        }
        if from != PeerId::Replica(self.primary()) || pp.v != self.view {
            self.counters.protocol_drops += 1;
            return;
        }
        {
            let cert = self
                .certs
                .entry(pp.n.0)
                .or_insert_with(|| OrderCertificate::new(pp.v, pp.n));
            if let Some(existing) = cert.d {
                if existing == pp.d {
                    self.counters.duplicate_messages += 1;
                } else {
                    // Same sequence bound to a different digest.
                    self.counters.equivocation_rejections += 1;
                }
                return;
            }
        }
        if !self.verify_from(from, &msg) {
            self.counters.auth_failures += 1;
            return;
        }
        if batch_digest(&pp.requests) != pp.d {
            self.counters.protocol_drops += 1;
            return;
        }
        // Decode the batch and classify each request ourselves; a primary
        // cannot make us treat a deterministic request as randomized.
        let mut requests = Vec::with_capacity(pp.requests.len());
        for blob in &pp.requests {
            match crate::protocol::decode(blob) {
                Ok(Message {
                    payload: Payload::Request(r),
                    ..
                }) => requests.push(r),
                _ => {
                    self.counters.protocol_drops += 1;
                    return;
                }
            }
        }
        if requests.is_empty() {
            self.counters.protocol_drops += 1;
            return;
        }
        let classes: Vec<OpClass> = requests
            .iter()
            .map(|r| self.cfg.oracle.classify(&r.op_payload))
            .collect();
        let randomized = classes
            .iter()
            .any(|c| matches!(c, OpClass::Randomized { .. }));

        match self.cfg.mode {
            Mode::Ba => {
                if pp.r_p.is_some() && !randomized {
                    // Denial-of-service guard: refuse to run the share round
                    // for an operation that consumes no randomness.
                    self.counters.dos_rejections += 1;
                    return;
                }
                if pp.r_p.is_none() && randomized {
                    self.counters.protocol_drops += 1;
                    return;
                }
            }
            Mode::Base | Mode::Ct => {
                if pp.r_p.is_some() {
                    self.counters.protocol_drops += 1;
                    return;
                }
            }
        }

        let ba_randomized = self.cfg.mode == Mode::Ba && randomized;
        let own_share = if ba_randomized {
            Some(self.entropy.extract_share().expect("entropy source"))
        } else {
            None
        };

        let cert = self.certs.get_mut(&pp.n.0).expect("created above");
        cert.d = Some(pp.d);
        cert.requests = requests;
        cert.encoded_requests = pp.requests.clone();
        cert.classes = classes;
        cert.randomized = randomized;
        cert.r_p = pp.r_p;
        cert.advance(Phase::PrePrepared);

        if ba_randomized {
            let share = own_share.expect("extracted above");
            let update = PpUpdate {
                v: pp.v,
                n: pp.n,
                i: self.cfg.id,
                payload: PpUpdatePayload::Share(share),
                d: pp.d,
            };
            let update_msg = self.multicast_msg(Payload::PpUpdate(update));
            let cert = self.certs.get_mut(&pp.n.0).expect("exists");
            cert.backup_shares
                .insert(self.cfg.id, (share, update_msg.clone()));
            cert.share_arrival.push(self.cfg.id);
            cert.share_verified.insert(self.cfg.id);
            cert.sent_pp_update = true;
            actions.push(Action::Send {
                to: SendTarget::AllOtherReplicas,
                msg: update_msg,
            });
        } else {
            let cert = self.certs.get_mut(&pp.n.0).expect("exists");
            cert.d_prime = Some(pp.d);
            self.send_own_prepare(pp.n.0, actions);
        }

        self.progress(pp.n.0, actions);
    }

    fn send_own_prepare(&mut self, n: u64, actions: &mut Vec<Action>) {
        // The primary's pre-prepare stands in for its prepare.
        if self.is_primary() {
            return;
        }
        let Some(cert) = self.certs.get(&n) else {
            return;
        };
        if cert.sent_prepare {
            return;
        }
        let Some(d_prime) = cert.d_prime else {
            return;
        };
        let prepare = Prepare {
            v: cert.v,
            n: cert.n,
            i: self.cfg.id,
            d_prime,
        };
        let msg = self.multicast_msg(Payload::Prepare(prepare));
        let cert = self.certs.get_mut(&n).expect("exists");
        cert.sent_prepare = true;
        cert.own_prepare_digest = Some(d_prime);
        actions.push(Action::Send {
            to: SendTarget::AllOtherReplicas,
            msg,
        });
    }

    // -----------------------------------------------------------------
    // Pp-update (BA path)
    // -----------------------------------------------------------------

    fn on_pp_update(&mut self, from: PeerId, msg: Message, now: Nanos, actions: &mut Vec<Action>) {
        let Payload::PpUpdate(upd) = &msg.payload else {
            unreachable!()
        };
        let upd = upd.clone();
        if self.cfg.mode != Mode::Ba || upd.v != self.view {
            self.counters.protocol_drops += 1;
            return;
        }
        let PeerId::Replica(sender) = from else {
            self.counters.protocol_drops += 1;
            return;
        };
        if sender != upd.i || sender == self.cfg.id {
            self.counters.protocol_drops += 1;
            return;
        }
        let primary = self.primary();
        match upd.payload {
            PpUpdatePayload::Share(share) => {
                if sender == primary {
                    // The primary contributes through the pre-prepare, not a
                    // bare share update.
                    self.counters.protocol_drops += 1;
                    return;
                }
                let cert = self
                    .certs
                    .entry(upd.n.0)
                    .or_insert_with(|| OrderCertificate::new(upd.v, upd.n));
                if cert.backup_shares.contains_key(&sender) {
                    self.counters.duplicate_messages += 1;
                    return;
                }
                cert.backup_shares.insert(sender, (share, msg));
                cert.share_arrival.push(sender);
                self.progress(upd.n.0, actions);
            }
            PpUpdatePayload::ShareSet(set) => {
                if sender != primary {
                    self.counters.protocol_drops += 1;
                    return;
                }
                if !self.verify_from(from, &msg) {
                    self.counters.auth_failures += 1;
                    return;
                }
                let expected = self.cfg.quorums.share_set_size() as usize;
                if set.entries.len() != expected {
                    self.counters.protocol_drops += 1;
                    return;
                }
                let cert = self
                    .certs
                    .entry(upd.n.0)
                    .or_insert_with(|| OrderCertificate::new(upd.v, upd.n));
                if cert.share_set.is_some() || cert.pending_share_set.is_some() {
                    self.counters.duplicate_messages += 1;
                    return;
                }
                cert.pending_share_set = Some(set);
                self.try_adopt_share_set(upd.n.0, now, actions);
                self.progress(upd.n.0, actions);
            }
        }
    }

    /// Validate and adopt a stashed primary share set once the pre-prepare
    /// and all referenced backup pp-updates are held. Requests retransmission
    /// of the ones still missing, rate-limited.
    fn try_adopt_share_set(&mut self, n: u64, now: Nanos, actions: &mut Vec<Action>) {
        let primary = self.primary();
        let f = self.cfg.quorums.f;
        let retransmit_gap = self.cfg.retransmit_min_interval;
        let Some(cert) = self.certs.get_mut(&n) else {
            return;
        };
        if cert.share_set.is_some() || !cert.has_pre_prepare() {
            return;
        }
        let Some(set) = cert.pending_share_set.clone() else {
            return;
        };

        // Structural checks against what this replica already knows.
        let mut missing = Vec::new();
        let mut primary_included = false;
        for (share, id) in &set.entries {
            if *id == primary {
                primary_included = true;
                if cert.r_p != Some(*share) {
                    // The set disagrees with the share the primary bound in
                    // its own pre-prepare.
                    cert.pending_share_set = None;
                    self.counters.equivocation_rejections += 1;
                    return;
                }
            } else if id.0 >= self.cfg.quorums.n_replicas() {
                cert.pending_share_set = None;
                self.counters.protocol_drops += 1;
                return;
            } else if let Some((held, _)) = cert.backup_shares.get(id) {
                if held != share {
                    cert.pending_share_set = None;
                    self.counters.equivocation_rejections += 1;
                    return;
                }
            } else {
                missing.push(*id);
            }
        }
        if !primary_included {
            cert.pending_share_set = None;
            self.counters.protocol_drops += 1;
            return;
        }

        if !missing.is_empty() {
            let due = match cert.last_retransmit {
                None => true,
                Some(at) => now.saturating_sub(at) >= retransmit_gap,
            };
            if due {
                cert.last_retransmit = Some(now);
                self.counters.retransmit_requests += 1;
                actions.push(Action::RequestRetransmit {
                    from: primary,
                    what: RetransmitWhat {
                        v: cert.v,
                        n: cert.n,
                        missing,
                    },
                });
            }
            return;
        }

        // Everything referenced is held and consistent: combine.
        let combined = combine(&set, f).expect("validated set");
        let d = cert.d.expect("pre-prepare held");
        cert.share_set = Some(set);
        cert.pending_share_set = None;
        cert.combined = Some(combined);
        cert.d_prime = Some(bound_digest(&d, &combined));
        cert.advance(Phase::Updated);
        self.send_own_prepare(n, actions);
    }

    /// Primary side: once `2f` backup shares verify, publish the share set.
    fn try_build_share_set(&mut self, n: u64, actions: &mut Vec<Action>) {
        if !self.is_primary() {
            return;
        }
        let keyring = self.keyring.clone();
        let self_id = self.cfg.id;
        let need = self.cfg.quorums.pp_update_quorum as usize;
        let f = self.cfg.quorums.f;
        let Some(cert) = self.certs.get_mut(&n) else {
            return;
        };
        if !cert.has_pre_prepare() || !cert.randomized || cert.share_set.is_some() {
            return;
        }
        let Some(r_p) = cert.r_p else {
            return;
        };

        // Verify buffered shares lazily, in arrival order, until 2f hold up.
        let mut chosen: Vec<ReplicaId> = Vec::with_capacity(need);
        let arrival = cert.share_arrival.clone();
        for id in arrival {
            if chosen.len() == need {
                break;
            }
            if cert.share_auth_failed.contains(&id) {
                continue;
            }
            if !cert.share_verified.contains(&id) {
                let msg = cert.backup_shares.get(&id).expect("recorded").1.clone();
                let bytes = msg.signed_bytes();
                let key = keyring.key_between(PeerId::Replica(id), PeerId::Replica(self_id));
                let ok = match &msg.auth {
                    AuthTrailer::Authenticator(a) => {
                        self.meter.charge_auth_verify();
                        authenticator_verify(&key, &bytes, a, self_id)
                    }
                    AuthTrailer::Mac(m) => {
                        self.meter.charge_mac_verify();
                        mac_verify(&key, &bytes, m)
                    }
                };
                if ok {
                    cert.share_verified.insert(id);
                } else {
                    cert.share_auth_failed.insert(id);
                    self.counters.auth_failures += 1;
                    continue;
                }
            }
            chosen.push(id);
        }
        if chosen.len() < need {
            return;
        }

        let mut entries = vec![(r_p, self_id)];
        for id in &chosen {
            entries.push((cert.backup_shares[id].0, *id));
        }
        let set = ShareSet { entries };
        let combined = combine(&set, f).expect("constructed set");
        let d = cert.d.expect("pre-prepare held");
        cert.share_set = Some(set.clone());
        cert.combined = Some(combined);
        cert.d_prime = Some(bound_digest(&d, &combined));
        cert.advance(Phase::Updated);

        let update = PpUpdate {
            v: cert.v,
            n: cert.n,
            i: self_id,
            payload: PpUpdatePayload::ShareSet(set),
            d,
        };
        let msg = self.multicast_msg(Payload::PpUpdate(update));
        actions.push(Action::Send {
            to: SendTarget::AllOtherReplicas,
            msg,
        });
    }

    fn on_retransmit_request(
        &mut self,
        requester: ReplicaId,
        what: RetransmitWhat,
        actions: &mut Vec<Action>,
    ) {
        if !self.is_primary() || what.v != self.view {
            return;
        }
        let Some(cert) = self.certs.get(&what.n.0) else {
            return;
        };
        for id in &what.missing {
            if let Some((_, msg)) = cert.backup_shares.get(id) {
                // The stored pp-update still carries the contributor's own
                // authenticator entry for the requester, so forwarding it
                // verbatim stays verifiable.
                actions.push(Action::Send {
                    to: SendTarget::Replica(requester),
                    msg: msg.clone(),
                });
            }
        }
    }

    // -----------------------------------------------------------------
    // Prepare / commit voting
    // -----------------------------------------------------------------

    fn on_prepare(&mut self, from: PeerId, msg: Message, _now: Nanos, actions: &mut Vec<Action>) {
        let Payload::Prepare(p) = &msg.payload else {
            unreachable!()
        };
        let (v, n, i, digest) = (p.v, p.n, p.i, p.d_prime);
        let PeerId::Replica(sender) = from else {
            self.counters.protocol_drops += 1;
            return;
        };
        if v != self.view || sender != i || sender == self.cfg.id {
            self.counters.protocol_drops += 1;
            return;
        }
        if sender == self.primary() {
            // The primary never sends prepares; its pre-prepare counts.
            self.counters.protocol_drops += 1;
            return;
        }
        let cert = self
            .certs
            .entry(n.0)
            .or_insert_with(|| OrderCertificate::new(v, n));
        if !cert.prepares.record(sender, digest, msg) {
            self.counters.duplicate_messages += 1;
            return;
        }
        self.progress(n.0, actions);
    }

    fn on_commit(&mut self, from: PeerId, msg: Message, _now: Nanos, actions: &mut Vec<Action>) {
        let Payload::Commit(c) = &msg.payload else {
            unreachable!()
        };
        let (v, n, i, digest) = (c.v, c.n, c.i, c.d);
        let PeerId::Replica(sender) = from else {
            self.counters.protocol_drops += 1;
            return;
        };
        if v != self.view || sender != i || sender == self.cfg.id {
            self.counters.protocol_drops += 1;
            return;
        }
        let cert = self
            .certs
            .entry(n.0)
            .or_insert_with(|| OrderCertificate::new(v, n));
        if !cert.commits.record(sender, digest, msg) {
            self.counters.duplicate_messages += 1;
            return;
        }
        self.progress(n.0, actions);
    }

    /// Count votes towards `quorum` for `digest`, lazily verifying buffered
    /// messages in arrival order and charging only for what gets consumed.
    fn count_votes(&mut self, n: u64, prepares: bool, digest: Digest, quorum: usize) -> usize {
        let keyring = self.keyring.clone();
        let self_id = self.cfg.id;
        let Some(cert) = self.certs.get_mut(&n) else {
            return 0;
        };
        let log = if prepares {
            &mut cert.prepares
        } else {
            &mut cert.commits
        };
        let mut count = 0usize;
        for vote in log.votes.iter_mut() {
            if count >= quorum {
                break;
            }
            if vote.digest != digest || vote.auth_failed {
                continue;
            }
            if !vote.verified {
                let bytes = vote.msg.signed_bytes();
                let key =
                    keyring.key_between(PeerId::Replica(vote.sender), PeerId::Replica(self_id));
                let ok = match &vote.msg.auth {
                    AuthTrailer::Authenticator(a) => {
                        self.meter.charge_auth_verify();
                        authenticator_verify(&key, &bytes, a, self_id)
                    }
                    AuthTrailer::Mac(m) => {
                        self.meter.charge_mac_verify();
                        mac_verify(&key, &bytes, m)
                    }
                };
                if ok {
                    vote.verified = true;
                } else {
                    vote.auth_failed = true;
                    self.counters.auth_failures += 1;
                    continue;
                }
            }
            count += 1;
        }
        count
    }

    // -----------------------------------------------------------------
    // Progress engine
    // -----------------------------------------------------------------

    /// Drive every state transition that has become possible for sequence
    /// `n`, then try in-order delivery.
    fn progress(&mut self, n: u64, actions: &mut Vec<Action>) {
        loop {
            let mut changed = false;

            if self.cfg.mode == Mode::Ba {
                if self.is_primary() {
                    let before = self
                        .certs
                        .get(&n)
                        .map(|c| c.share_set.is_some())
                        .unwrap_or(false);
                    self.try_build_share_set(n, actions);
                    let after = self
                        .certs
                        .get(&n)
                        .map(|c| c.share_set.is_some())
                        .unwrap_or(false);
                    changed |= before != after;
                } else {
                    let before = self
                        .certs
                        .get(&n)
                        .map(|c| c.share_set.is_some())
                        .unwrap_or(false);
                    // Retransmission timing is handled on arrival; here we
                    // only re-check adoption after new shares landed.
                    self.try_adopt_share_set(n, u64::MAX, actions);
                    let after = self
                        .certs
                        .get(&n)
                        .map(|c| c.share_set.is_some())
                        .unwrap_or(false);
                    changed |= before != after;
                }
            }

            changed |= self.try_send_commit(n, actions);
            changed |= self.try_commit(n);
            changed |= self.try_finish_coin(n);

            if !changed {
                break;
            }
        }
        self.try_deliver(actions);
    }

    /// Prepared predicate: the pre-prepare plus `2f` matching prepares from
    /// backups (own included when this replica is a backup).
    fn try_send_commit(&mut self, n: u64, actions: &mut Vec<Action>) -> bool {
        let quorum = self.cfg.quorums.prepare_quorum as usize;
        let Some(cert) = self.certs.get(&n) else {
            return false;
        };
        if cert.sent_commit || !cert.has_pre_prepare() {
            return false;
        }
        let Some(digest) = cert.d_prime else {
            return false;
        };
        let own = if !self.is_primary() && cert.sent_prepare && cert.own_prepare_digest == Some(digest)
        {
            1
        } else {
            0
        };
        let need_from_others = quorum.saturating_sub(own);
        let got = self.count_votes(n, true, digest, need_from_others);
        if got < need_from_others {
            return false;
        }

        // Committing: on the CT path a randomized request's commit carries
        // our threshold signature share over d || n.
        let cert = self.certs.get(&n).expect("exists");
        let sig_share = if self.cfg.mode == Mode::Ct && cert.randomized {
            let ks = self.cfg.key_share.as_ref().expect("validated config");
            let msg = coin_message(&cert.d.expect("pre-prepared"), cert.n);
            let gk = self.cfg.group_key.as_ref().expect("validated config");
            self.meter.charge_coin_sign(gk.k, gk.key_bits);
            Some(threshold::sign_share(ks, &msg))
        } else {
            None
        };
        let cert = self.certs.get(&n).expect("exists");
        let commit = Commit {
            v: cert.v,
            n: cert.n,
            i: self.cfg.id,
            d: digest,
            sig_share: sig_share.clone(),
        };
        let msg = self.multicast_msg(Payload::Commit(commit));
        actions.push(Action::Send {
            to: SendTarget::AllOtherReplicas,
            msg,
        });
        let cert = self.certs.get_mut(&n).expect("exists");
        cert.sent_commit = true;
        cert.advance(Phase::Prepared);
        if let Some(s) = sig_share {
            cert.valid_sig_shares.insert(s.holder, s);
        }
        true
    }

    /// Committed predicate: `2f+1` matching commits from anyone, own
    /// included.
    fn try_commit(&mut self, n: u64) -> bool {
        let quorum = self.cfg.quorums.commit_quorum as usize;
        let Some(cert) = self.certs.get(&n) else {
            return false;
        };
        if cert.phase >= Phase::Committed || !cert.has_pre_prepare() {
            return false;
        }
        let Some(digest) = cert.d_prime else {
            return false;
        };
        let own = usize::from(cert.sent_commit);
        let need_from_others = quorum.saturating_sub(own);
        let got = self.count_votes(n, false, digest, need_from_others);
        if got < need_from_others {
            return false;
        }
        let cert = self.certs.get_mut(&n).expect("exists");
        cert.advance(Phase::Committed);
        true
    }

    /// CT path: after ordering completes, assemble `k` valid signature
    /// shares from the commit messages and combine them into the coin.
    fn try_finish_coin(&mut self, n: u64) -> bool {
        if self.cfg.mode != Mode::Ct {
            return false;
        }
        let Some(gk) = self.cfg.group_key.clone() else {
            return false;
        };
        let k = gk.k as usize;
        let Some(cert) = self.certs.get_mut(&n) else {
            return false;
        };
        if !cert.randomized || cert.phase < Phase::Committed || cert.group_sig.is_some() {
            return false;
        }
        let msg = coin_message(&cert.d.expect("committed implies pre-prepared"), cert.n);

        if cert.valid_sig_shares.len() < k {
            // Pull shares off verified commit votes; invalid ones are
            // discarded but the commits themselves still counted above.
            let mut candidates: Vec<SignatureShare> = Vec::new();
            for vote in cert.commits.votes.iter() {
                if !vote.verified {
                    continue;
                }
                if let Payload::Commit(c) = &vote.msg.payload {
                    if let Some(s) = &c.sig_share {
                        candidates.push(s.clone());
                    }
                }
            }
            for share in candidates {
                if cert.valid_sig_shares.len() >= k {
                    break;
                }
                if cert.valid_sig_shares.contains_key(&share.holder)
                    || cert.checked_sig_holders.contains(&share.holder)
                {
                    continue;
                }
                cert.checked_sig_holders.insert(share.holder);
                if threshold::verify_share(&gk, &msg, &share) {
                    cert.valid_sig_shares.insert(share.holder, share);
                }
            }
        }

        if cert.valid_sig_shares.len() < k {
            // Ordering is complete but delivery stays blocked until enough
            // valid shares arrive (more commits may still be in flight).
            return false;
        }
        let shares: Vec<SignatureShare> = cert.valid_sig_shares.values().cloned().collect();
        match threshold::combine(&gk, &msg, &shares) {
            Ok(sig) => {
                self.meter.charge_coin_verify_combine(gk.k, gk.key_bits);
                cert.group_sig = Some(sig);
                true
            }
            Err(_) => false,
        }
    }

    /// Deliver every consecutive committed sequence above the last delivered
    /// one, echoing each request back to its client.
    fn try_deliver(&mut self, actions: &mut Vec<Action>) {
        loop {
            let n = self.last_delivered + 1;
            let ready = match self.certs.get(&n) {
                Some(cert) => {
                    cert.phase >= Phase::Committed
                        && cert.phase < Phase::Delivered
                        && (!cert.randomized
                            || match self.cfg.mode {
                                Mode::Base => true,
                                Mode::Ba => cert.combined.is_some(),
                                Mode::Ct => cert.group_sig.is_some(),
                            })
                }
                None => false,
            };
            if !ready {
                break;
            }

            let (requests, classes, combined, group_sig, seq) = {
                let cert = self.certs.get(&n).expect("checked");
                (
                    cert.requests.clone(),
                    cert.classes.clone(),
                    cert.combined,
                    cert.group_sig.clone(),
                    cert.n,
                )
            };
            for (slot, (req, class)) in requests.iter().zip(classes.iter()).enumerate() {
                let random = match (self.cfg.mode, class) {
                    (_, OpClass::Deterministic) | (Mode::Base, _) => None,
                    (Mode::Ba, OpClass::Randomized { bits }) => {
                        let value = truncate(&combined.expect("checked"), *bits)
                            .expect("validated width");
                        Some(width_bytes(value, *bits))
                    }
                    (Mode::Ct, OpClass::Randomized { bits }) => {
                        let sig = group_sig.as_ref().expect("checked");
                        let value = signature_to_random_with(sig, *bits, self.cfg.coin_hash)
                            .expect("validated width");
                        Some(width_bytes(value, *bits))
                    }
                };
                actions.push(Action::Deliver {
                    n: seq,
                    slot: slot as u32,
                    request: req.op_payload.clone(),
                    random: random.clone(),
                    client_id: req.client_id,
                    timestamp: req.timestamp,
                });

                let reply = Reply {
                    v: self.view,
                    client_id: req.client_id,
                    result: req.op_payload.clone(),
                    random,
                };
                let reply_msg = self.mac_msg(Payload::Reply(reply), PeerId::Client(req.client_id));
                actions.push(Action::Send {
                    to: SendTarget::Client(req.client_id),
                    msg: reply_msg.clone(),
                });
                let session = self
                    .sessions
                    .entry(req.client_id)
                    .or_insert_with(|| ClientSession {
                        last_timestamp: 0,
                        cached_reply: None,
                        watchdog_armed_for: None,
                    });
                if req.timestamp > session.last_timestamp {
                    session.last_timestamp = req.timestamp;
                    session.cached_reply = Some(reply_msg);
                }
                self.in_progress.remove(&(req.client_id, req.timestamp));
            }

            let cert = self.certs.get_mut(&n).expect("exists");
            cert.advance(Phase::Delivered);
            self.last_delivered = n;
            self.outstanding.remove(&n);
            if self.is_primary() && self.cfg.batching {
                self.maybe_propose(actions);
            }
        }
    }

    // -----------------------------------------------------------------
    // Timeouts
    // -----------------------------------------------------------------

    fn on_timeout(&mut self, id: u64, actions: &mut Vec<Action>) {
        let Some(purpose) = self.timers.remove(&id) else {
            return;
        };
        match purpose {
            TimerPurpose::RequestWatch {
                client_id,
                timestamp,
            } => {
                let delivered = self
                    .sessions
                    .get(&client_id)
                    .map(|s| s.last_timestamp >= timestamp)
                    .unwrap_or(false);
                if delivered {
                    // Stale timer; the request made it through.
                    return;
                }
                let next = self.suspected_view.0.max(self.view.0) + 1;
                self.suspected_view = View(next);
                actions.push(Action::ViewChangeSignal {
                    view: self.suspected_view,
                });
                self.timeout_current = self.timeout_current.saturating_mul(2);
                let new_id = self.next_timer;
                self.next_timer += 1;
                self.timers.insert(
                    new_id,
                    TimerPurpose::RequestWatch {
                        client_id,
                        timestamp,
                    },
                );
                actions.push(Action::StartTimer {
                    id: new_id,
                    duration: self.timeout_current,
                });
            }
        }
    }
}

/// Encode the leading `bits` of a value as `bits/8` big-endian bytes.
pub fn width_bytes(value: u64, bits: u32) -> Vec<u8> {
    let w = (bits / 8) as usize;
    value.to_be_bytes()[8 - w..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::quorums_for;

    fn keyring() -> Keyring {
        Keyring::new([7u8; 32])
    }

    fn base_cfg(id: u64, mode: Mode) -> ReplicaConfig {
        ReplicaConfig {
            id: ReplicaId(id),
            quorums: quorums_for(1, 2).unwrap(),
            mode,
            batching: false,
            ct_batching: false,
            key_share: None,
            group_key: None,
            oracle: AppOracle::AllRandomized { bits: 32 },
            coin_hash: CoinHash::Sha1,
            timeout_base: 1_000_000_000,
            retransmit_min_interval: 100_000_000,
            max_batch: 64,
        }
    }

    fn replica(id: u64, mode: Mode) -> Replica {
        Replica::new(
            base_cfg(id, mode),
            keyring(),
            EntropySource::seeded(1000 + id),
            None,
        )
        .unwrap()
    }

    fn client_request(client: u64, ts: u64, payload: &[u8]) -> Message {
        let ring = keyring();
        let req = Request {
            client_id: client,
            op_payload: payload.to_vec(),
            timestamp: ts,
        };
        let payload = Payload::Request(req);
        let bytes = crate::protocol::payload_bytes(&payload);
        let keys: Vec<_> = (0..4)
            .map(|r| ring.key_between(PeerId::Client(client), PeerId::Replica(ReplicaId(r))))
            .collect();
        Message {
            payload,
            auth: AuthTrailer::Authenticator(authenticator_sign(&keys, &bytes).unwrap()),
        }
    }

    fn sends(actions: &[Action]) -> Vec<&Message> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { msg, .. } => Some(msg),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_cfg(0, Mode::Ct);
        assert_eq!(cfg.validate(), Err(ReplicaError::MissingKeyMaterial));
        cfg = base_cfg(5, Mode::Base);
        assert_eq!(cfg.validate(), Err(ReplicaError::IdOutOfRange(5, 4)));
        cfg = base_cfg(0, Mode::Base);
        cfg.ct_batching = true;
        assert_eq!(cfg.validate(), Err(ReplicaError::CoinBatchingWithoutBatching));
    }

    #[test]
    fn oracle_classification() {
        let tagged = AppOracle::PayloadTagged;
        assert_eq!(
            tagged.classify(&[0x01, 32, 0xaa]),
            OpClass::Randomized { bits: 32 }
        );
        assert_eq!(tagged.classify(&[0x01, 13]), OpClass::Deterministic);
        assert_eq!(tagged.classify(&[0x00, 32]), OpClass::Deterministic);
        assert_eq!(tagged.classify(&[]), OpClass::Deterministic);
        assert_eq!(
            AppOracle::AllRandomized { bits: 8 }.classify(b"x"),
            OpClass::Randomized { bits: 8 }
        );
    }

    #[test]
    fn primary_emits_pre_prepare_with_share_in_ba_mode() {
        let mut primary = replica(0, Mode::Ba);
        let actions = primary.on_event(
            Event::Message {
                from: PeerId::Client(1),
                msg: client_request(1, 1, b"op"),
            },
            0,
        );
        let msgs = sends(&actions);
        assert_eq!(msgs.len(), 1);
        match &msgs[0].payload {
            Payload::PrePrepare(pp) => {
                assert_eq!(pp.n, SeqNum(1));
                assert!(pp.r_p.is_some(), "BA randomized pre-prepare carries r_p");
                assert_eq!(pp.requests.len(), 1);
            }
            other => panic!("expected pre-prepare, got {}", other.kind()),
        }
    }

    #[test]
    fn base_mode_pre_prepare_has_no_share() {
        let mut primary = replica(0, Mode::Base);
        let actions = primary.on_event(
            Event::Message {
                from: PeerId::Client(1),
                msg: client_request(1, 1, b"op"),
            },
            0,
        );
        match &sends(&actions)[0].payload {
            Payload::PrePrepare(pp) => assert!(pp.r_p.is_none()),
            other => panic!("expected pre-prepare, got {}", other.kind()),
        }
    }

    #[test]
    fn batching_groups_pending_requests_under_one_sequence() {
        let mut cfg = base_cfg(0, Mode::Base);
        cfg.batching = true;
        let mut primary =
            Replica::new(cfg, keyring(), EntropySource::seeded(0), None).unwrap();
        // First request proposes immediately (empty pipeline).
        let a1 = primary.on_event(
            Event::Message {
                from: PeerId::Client(1),
                msg: client_request(1, 1, b"a"),
            },
            0,
        );
        assert_eq!(sends(&a1).len(), 1);
        // Next three queue up behind the outstanding batch.
        for (client, ts) in [(2, 1), (3, 1), (4, 1)] {
            let acts = primary.on_event(
                Event::Message {
                    from: PeerId::Client(client),
                    msg: client_request(client, ts, b"b"),
                },
                0,
            );
            assert!(sends(&acts).is_empty());
        }
        assert_eq!(primary.pool.len(), 3);
    }

    #[test]
    fn backup_sends_pp_update_for_randomized_ba_request() {
        let mut primary = replica(0, Mode::Ba);
        let pp_msg = {
            let actions = primary.on_event(
                Event::Message {
                    from: PeerId::Client(1),
                    msg: client_request(1, 1, b"op"),
                },
                0,
            );
            sends(&actions)[0].clone()
        };
        let mut backup = replica(1, Mode::Ba);
        let actions = backup.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: pp_msg.clone(),
            },
            0,
        );
        let msgs = sends(&actions);
        assert_eq!(msgs.len(), 1);
        match &msgs[0].payload {
            Payload::PpUpdate(u) => {
                assert_eq!(u.i, ReplicaId(1));
                assert!(matches!(u.payload, PpUpdatePayload::Share(_)));
            }
            other => panic!("expected pp-update, got {}", other.kind()),
        }
        // Replay is idempotent.
        let replay = backup.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: pp_msg,
            },
            0,
        );
        assert!(replay.is_empty());
        assert_eq!(backup.counters.duplicate_messages, 1);
    }

    #[test]
    fn backup_rejects_share_on_deterministic_request() {
        // A primary that tags a deterministic request as randomized gets
        // rejected by the oracle check.
        let mut cfg = base_cfg(0, Mode::Ba);
        cfg.oracle = AppOracle::PayloadTagged;
        let mut primary =
            Replica::new(cfg, keyring(), EntropySource::seeded(0), None).unwrap();
        // Payload tagged randomized so the primary attaches a share.
        let actions = primary.on_event(
            Event::Message {
                from: PeerId::Client(1),
                msg: client_request(1, 1, &[0x01, 32, 0x99]),
            },
            0,
        );
        let mut pp_msg = sends(&actions)[0].clone();

        // Backup whose oracle says everything is deterministic.
        let mut bcfg = base_cfg(1, Mode::Ba);
        bcfg.oracle = AppOracle::AllDeterministic;
        let mut backup = Replica::new(bcfg, keyring(), EntropySource::seeded(1), None).unwrap();
        let acts = backup.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: pp_msg.clone(),
            },
            0,
        );
        assert!(acts.is_empty());
        assert_eq!(backup.counters.dos_rejections, 1);

        // Sanity: same message accepted by an agreeing oracle.
        let mut bcfg2 = base_cfg(2, Mode::Ba);
        bcfg2.oracle = AppOracle::PayloadTagged;
        let mut backup2 = Replica::new(bcfg2, keyring(), EntropySource::seeded(2), None).unwrap();
        let acts2 = backup2.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: pp_msg.clone(),
            },
            0,
        );
        assert_eq!(sends(&acts2).len(), 1);

        // Tampering with the batch digest is caught.
        if let Payload::PrePrepare(pp) = &mut pp_msg.payload {
            pp.d = Digest([9u8; 32]);
        }
        let mut bcfg3 = base_cfg(3, Mode::Ba);
        bcfg3.oracle = AppOracle::PayloadTagged;
        let mut backup3 = Replica::new(bcfg3, keyring(), EntropySource::seeded(3), None).unwrap();
        let acts3 = backup3.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: pp_msg,
            },
            0,
        );
        assert!(acts3.is_empty());
        assert_eq!(backup3.counters.auth_failures, 1);
    }

    #[test]
    fn timeout_doubles_and_signals_increasing_views() {
        let mut backup = replica(1, Mode::Base);
        let base_timeout = backup.current_timeout();
        // Forwarded request arms the watchdog.
        let actions = backup.on_event(
            Event::Message {
                from: PeerId::Client(9),
                msg: client_request(9, 5, b"x"),
            },
            0,
        );
        let timer_id = actions
            .iter()
            .find_map(|a| match a {
                Action::StartTimer { id, .. } => Some(*id),
                _ => None,
            })
            .expect("watchdog armed");

        let fire1 = backup.on_event(Event::TimerFired { id: timer_id }, base_timeout);
        assert!(fire1
            .iter()
            .any(|a| matches!(a, Action::ViewChangeSignal { view } if *view == View(1))));
        assert_eq!(backup.current_timeout(), base_timeout * 2);
        let timer2 = fire1
            .iter()
            .find_map(|a| match a {
                Action::StartTimer { id, duration } => Some((*id, *duration)),
                _ => None,
            })
            .expect("rearmed");
        assert_eq!(timer2.1, base_timeout * 2);

        let fire2 = backup.on_event(Event::TimerFired { id: timer2.0 }, 3 * base_timeout);
        assert!(fire2
            .iter()
            .any(|a| matches!(a, Action::ViewChangeSignal { view } if *view == View(2))));
        assert_eq!(backup.current_timeout(), base_timeout * 4);
    }

    #[test]
    fn stale_timer_after_delivery_is_ignored() {
        let mut backup = replica(1, Mode::Base);
        let actions = backup.on_event(
            Event::Message {
                from: PeerId::Client(9),
                msg: client_request(9, 5, b"x"),
            },
            0,
        );
        let timer_id = actions
            .iter()
            .find_map(|a| match a {
                Action::StartTimer { id, .. } => Some(*id),
                _ => None,
            })
            .unwrap();
        // Mark as delivered through the session table.
        backup.sessions.get_mut(&9).unwrap().last_timestamp = 5;
        let fired = backup.on_event(Event::TimerFired { id: timer_id }, 10);
        assert!(fired.is_empty());
    }

    #[test]
    fn width_bytes_truncates_big_endian() {
        assert_eq!(width_bytes(0xDEADBEEF, 32), vec![0xDE, 0xAD, 0xBE, 0xEF]);
        assert_eq!(width_bytes(0xAB, 8), vec![0xAB]);
        assert_eq!(width_bytes(0, 64), vec![0; 8]);
    }
}
