//! Deterministic discrete-event simulation of message passing between
//! replicas and clients, with configurable latency models and crypto cost
//! charging.
//!
//! Every send is delivered (no loss, no duplication); per-link FIFO is not
//! guaranteed once jitter is nonzero. Each actor has a busy-until horizon:
//! an event is processed no earlier than the actor finished its previous
//! work, and the crypto it performs pushes the horizon forward. Identical
//! seeds and configurations produce byte-identical traces.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as Sha2Digest, Sha256};
use thiserror::Error;

use crate::authcrypt::PeerId;
use crate::client::{AcceptedReply, Client};
use crate::faults::FaultyReplica;
use crate::protocol::{decode, encode, ReplicaId, View};
use crate::replica::{Action, Counters, Event, Replica, RetransmitWhat, SendTarget};
use crate::Nanos;

pub type SimTime = u64;

/// One-way delay model: base plus uniform jitter, never negative.
#[derive(Debug)]
pub struct LatencyModel {
    pub base: Nanos,
    pub jitter: Nanos,
    rng: ChaCha20Rng,
}

impl LatencyModel {
    pub fn new(base: Nanos, jitter: Nanos, seed: u64) -> Self {
        LatencyModel {
            base,
            jitter,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Switched-LAN scale: 0.05 ms one-way, 0.01 ms jitter.
    pub fn lan(seed: u64) -> Self {
        Self::new(50_000, 10_000, seed)
    }

    /// Emulated WAN: 50 ms one-way, 2 ms jitter.
    pub fn wan(seed: u64) -> Self {
        Self::new(50_000_000, 2_000_000, seed)
    }

    /// Zero-delay degenerate model; delivery order is insertion order.
    pub fn zero() -> Self {
        Self::new(0, 0, 0)
    }

    pub fn sample(&mut self) -> Nanos {
        if self.jitter == 0 {
            return self.base;
        }
        let lo = self.base.saturating_sub(self.jitter);
        let hi = self.base + self.jitter;
        self.rng.random_range(lo..=hi)
    }
}

#[derive(Debug)]
enum QueuedKind {
    Init,
    Bytes { from: PeerId, bytes: Vec<u8> },
    Timer { id: u64 },
    Retransmit { requester: ReplicaId, what: RetransmitWhat },
}

#[derive(Debug)]
struct QueuedEvent {
    at: SimTime,
    seq: u64,
    dest: PeerId,
    kind: QueuedKind,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Ties broken by insertion order for determinism.
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Anything that can live on the simulated network.
pub enum SimActor {
    Honest(Replica),
    Faulty(FaultyReplica),
    Client(Client),
}

impl SimActor {
    pub fn peer_id(&self) -> PeerId {
        match self {
            SimActor::Honest(r) => PeerId::Replica(r.id()),
            SimActor::Faulty(r) => PeerId::Replica(r.id()),
            SimActor::Client(c) => PeerId::Client(c.id()),
        }
    }

    fn on_event(&mut self, ev: Event, now: SimTime) -> Vec<Action> {
        match self {
            SimActor::Honest(r) => r.on_event(ev, now),
            SimActor::Faulty(r) => r.on_event(ev, now),
            SimActor::Client(c) => c.on_event(ev, now),
        }
    }

    fn drain_charged(&mut self) -> Nanos {
        match self {
            SimActor::Honest(r) => r.drain_charged(),
            SimActor::Faulty(r) => r.drain_charged(),
            SimActor::Client(c) => c.drain_charged(),
        }
    }
}

/// One in-order application hand-off at one replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub at: SimTime,
    pub replica: ReplicaId,
    pub n: u64,
    pub slot: u32,
    pub client_id: u64,
    pub timestamp: u64,
    pub request_digest: [u8; 32],
    pub random: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptRecord {
    pub client: u64,
    pub timestamp: u64,
    pub at: SimTime,
    pub latency: Nanos,
    pub result_digest: [u8; 32],
    pub random: Option<Vec<u8>>,
}

/// Everything observable about one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub deliveries: Vec<DeliveryRecord>,
    pub accepts: Vec<AcceptRecord>,
    pub view_signals: Vec<(SimTime, ReplicaId, View)>,
    pub decode_drops: u64,
    pub retransmit_requests: u64,
    pub events_dispatched: u64,
    pub messages_sent: u64,
    pub final_time: SimTime,
    pub client_inconsistencies: u64,
    pub replica_counters: Vec<(ReplicaId, Counters)>,
}

impl Trace {
    /// Stable digest over the full trace; equal seeds must reproduce it
    /// byte for byte.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut put = |bytes: &[u8]| h.update(bytes);
        for d in &self.deliveries {
            put(&d.at.to_be_bytes());
            put(&d.replica.0.to_be_bytes());
            put(&d.n.to_be_bytes());
            put(&d.slot.to_be_bytes());
            put(&d.client_id.to_be_bytes());
            put(&d.timestamp.to_be_bytes());
            put(&d.request_digest);
            match &d.random {
                Some(r) => {
                    put(&[1]);
                    put(r);
                }
                None => put(&[0]),
            }
        }
        for a in &self.accepts {
            put(&a.client.to_be_bytes());
            put(&a.timestamp.to_be_bytes());
            put(&a.at.to_be_bytes());
            put(&a.latency.to_be_bytes());
            put(&a.result_digest);
            match &a.random {
                Some(r) => {
                    put(&[1]);
                    put(r);
                }
                None => put(&[0]),
            }
        }
        for (t, r, v) in &self.view_signals {
            put(&t.to_be_bytes());
            put(&r.0.to_be_bytes());
            put(&v.0.to_be_bytes());
        }
        put(&self.decode_drops.to_be_bytes());
        put(&self.retransmit_requests.to_be_bytes());
        put(&self.events_dispatched.to_be_bytes());
        put(&self.messages_sent.to_be_bytes());
        put(&self.final_time.to_be_bytes());
        h.finalize().into()
    }
}

/// When to stop the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Until {
    /// Event queue drained.
    Quiescent,
    /// Total accepted replies across all clients reached this count.
    AcceptedReplies(u64),
    /// Simulated-time bound.
    Time(SimTime),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("two actors share the id {0:?}")]
    DuplicateActor(PeerId),
}

/// Result of a run: the trace plus the actors (for harvesting state), and
/// whether the event cap tripped before the halt condition.
pub struct SimOutcome {
    pub trace: Trace,
    pub actors: Vec<SimActor>,
    pub cap_exhausted: bool,
}

pub struct Simulation {
    latency: LatencyModel,
    event_cap: u64,
}

impl Simulation {
    pub fn new(latency: LatencyModel) -> Self {
        Simulation {
            latency,
            event_cap: 20_000_000,
        }
    }

    pub fn with_event_cap(mut self, cap: u64) -> Self {
        self.event_cap = cap;
        self
    }

    /// Dispatch events in (time, insertion) order until the halt condition,
    /// charging each actor's crypto work to its busy horizon.
    pub fn run(mut self, actors: Vec<SimActor>, until: Until) -> Result<SimOutcome, SimError> {
        let mut registry: BTreeMap<PeerId, SimActor> = BTreeMap::new();
        let replica_ids: Vec<ReplicaId> = actors
            .iter()
            .filter_map(|a| match a.peer_id() {
                PeerId::Replica(r) => Some(r),
                PeerId::Client(_) => None,
            })
            .collect();
        for actor in actors {
            let id = actor.peer_id();
            if registry.insert(id, actor).is_some() {
                return Err(SimError::DuplicateActor(id));
            }
        }

        let mut queue: BinaryHeap<Reverse<QueuedEvent>> = BinaryHeap::new();
        let mut seq = 0u64;
        let mut push = |queue: &mut BinaryHeap<Reverse<QueuedEvent>>,
                        seq: &mut u64,
                        at: SimTime,
                        dest: PeerId,
                        kind: QueuedKind| {
            queue.push(Reverse(QueuedEvent {
                at,
                seq: *seq,
                dest,
                kind,
            }));
            *seq += 1;
        };

        for id in registry.keys() {
            push(&mut queue, &mut seq, 0, *id, QueuedKind::Init);
        }

        let mut busy_until: BTreeMap<PeerId, SimTime> = BTreeMap::new();
        let mut trace = Trace::default();
        let mut accepted_total = 0u64;
        let mut cap_exhausted = false;
        let mut now = 0;

        while let Some(Reverse(ev)) = queue.pop() {
            if let Until::Time(bound) = until {
                if ev.at > bound {
                    break;
                }
            }
            if trace.events_dispatched >= self.event_cap {
                cap_exhausted = true;
                break;
            }
            trace.events_dispatched += 1;
            now = ev.at.max(now);

            let Some(actor) = registry.get_mut(&ev.dest) else {
                continue;
            };
            let start = ev.at.max(*busy_until.get(&ev.dest).unwrap_or(&0));
            let event = match ev.kind {
                QueuedKind::Init => Event::Init,
                QueuedKind::Timer { id } => Event::TimerFired { id },
                QueuedKind::Retransmit { requester, what } => {
                    Event::RetransmitRequest { requester, what }
                }
                QueuedKind::Bytes { from, bytes } => match decode(&bytes) {
                    Ok(msg) => Event::Message { from, msg },
                    Err(_) => {
                        trace.decode_drops += 1;
                        continue;
                    }
                },
            };

            let before_accepts = match actor {
                SimActor::Client(c) => c.accepted_count(),
                _ => 0,
            };
            let actions = actor.on_event(event, start);
            let done = start + actor.drain_charged();
            busy_until.insert(ev.dest, done);
            if let SimActor::Client(c) = actor {
                accepted_total += c.accepted_count() - before_accepts;
            }

            for action in actions {
                match action {
                    Action::Send { to, msg } => {
                        let bytes = encode(&msg);
                        let targets: Vec<PeerId> = match to {
                            SendTarget::Replica(r) => vec![PeerId::Replica(r)],
                            SendTarget::Client(c) => vec![PeerId::Client(c)],
                            SendTarget::AllOtherReplicas => replica_ids
                                .iter()
                                .filter(|r| PeerId::Replica(**r) != ev.dest)
                                .map(|r| PeerId::Replica(*r))
                                .collect(),
                            SendTarget::AllReplicas => replica_ids
                                .iter()
                                .map(|r| PeerId::Replica(*r))
                                .collect(),
                        };
                        for target in targets {
                            trace.messages_sent += 1;
                            let delay = self.latency.sample();
                            push(
                                &mut queue,
                                &mut seq,
                                done + delay,
                                target,
                                QueuedKind::Bytes {
                                    from: ev.dest,
                                    bytes: bytes.clone(),
                                },
                            );
                        }
                    }
                    Action::Deliver {
                        n,
                        slot,
                        request,
                        random,
                        client_id,
                        timestamp,
                    } => {
                        if let PeerId::Replica(r) = ev.dest {
                            trace.deliveries.push(DeliveryRecord {
                                at: done,
                                replica: r,
                                n: n.0,
                                slot,
                                client_id,
                                timestamp,
                                request_digest: crate::authcrypt::sha256(&request).0,
                                random,
                            });
                        }
                    }
                    Action::StartTimer { id, duration } => {
                        push(
                            &mut queue,
                            &mut seq,
                            done + duration,
                            ev.dest,
                            QueuedKind::Timer { id },
                        );
                    }
                    Action::RequestRetransmit { from, what } => {
                        trace.retransmit_requests += 1;
                        if let PeerId::Replica(requester) = ev.dest {
                            let delay = self.latency.sample();
                            push(
                                &mut queue,
                                &mut seq,
                                done + delay,
                                PeerId::Replica(from),
                                QueuedKind::Retransmit { requester, what },
                            );
                        }
                    }
                    Action::ViewChangeSignal { view } => {
                        if let PeerId::Replica(r) = ev.dest {
                            trace.view_signals.push((done, r, view));
                        }
                    }
                }
            }

            trace.final_time = now;
            if let Until::AcceptedReplies(target) = until {
                if accepted_total >= target {
                    break;
                }
            }
        }

        let actors: Vec<SimActor> = registry.into_values().collect();
        for actor in &actors {
            match actor {
                SimActor::Client(c) => {
                    trace.client_inconsistencies += c.inconsistencies();
                    for a in c.accepts() {
                        trace.accepts.push(accept_record(c.id(), a));
                    }
                }
                SimActor::Honest(r) => {
                    trace.replica_counters.push((r.id(), r.counters));
                }
                SimActor::Faulty(r) => {
                    trace.replica_counters.push((r.id(), r.inner().counters));
                }
            }
        }
        trace
            .accepts
            .sort_by_key(|a| (a.client, a.timestamp));

        Ok(SimOutcome {
            trace,
            actors,
            cap_exhausted,
        })
    }
}

fn accept_record(client: u64, a: &AcceptedReply) -> AcceptRecord {
    AcceptRecord {
        client,
        timestamp: a.timestamp,
        at: a.at,
        latency: a.latency,
        result_digest: crate::authcrypt::sha256(&a.result).0,
        random: a.random.clone(),
    }
}

// ---------------------------------------------------------------------------
// Trace invariants
// ---------------------------------------------------------------------------

/// Outcome of checking a trace against the safety invariants.
#[derive(Debug, Default)]
pub struct InvariantReport {
    pub violations: Vec<String>,
    pub delivering_replicas: usize,
    pub max_delivered: u64,
}

impl InvariantReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check agreement across correct replicas: no two correct replicas deliver
/// different (request, random) for the same slot, every correct replica's
/// delivery sequence is a prefix of the longest one, and client-accepted
/// values match what correct replicas delivered.
pub fn check_safety(trace: &Trace, faulty: &BTreeSet<ReplicaId>) -> InvariantReport {
    let mut report = InvariantReport::default();

    let mut per_replica: BTreeMap<ReplicaId, Vec<&DeliveryRecord>> = BTreeMap::new();
    for d in &trace.deliveries {
        if faulty.contains(&d.replica) {
            continue;
        }
        per_replica.entry(d.replica).or_default().push(d);
    }
    report.delivering_replicas = per_replica.len();

    // Per-replica order: sequence numbers contiguous from 1, slots
    // contiguous from 0 within each sequence.
    for (replica, records) in &per_replica {
        let mut expect_n = 1u64;
        let mut expect_slot = 0u32;
        for d in records.iter() {
            if d.n == expect_n && d.slot == expect_slot {
                expect_slot += 1;
            } else if d.n == expect_n + 1 && d.slot == 0 {
                expect_n += 1;
                expect_slot = 1;
            } else {
                report.violations.push(format!(
                    "replica {:?} delivered out of order: n={} slot={} (expected n={} slot={} or n={} slot=0)",
                    replica, d.n, d.slot, expect_n, expect_slot, expect_n + 1
                ));
                break;
            }
        }
        report.max_delivered = report.max_delivered.max(
            records
                .last()
                .map(|d| d.n)
                .unwrap_or(0),
        );
    }

    // Agreement per (n, slot) across correct replicas.
    let mut by_slot: BTreeMap<(u64, u32), Vec<&DeliveryRecord>> = BTreeMap::new();
    for records in per_replica.values() {
        for d in records {
            by_slot.entry((d.n, d.slot)).or_default().push(d);
        }
    }
    for ((n, slot), records) in &by_slot {
        let first = records[0];
        for d in &records[1..] {
            if d.request_digest != first.request_digest
                || d.random != first.random
                || d.client_id != first.client_id
                || d.timestamp != first.timestamp
            {
                report.violations.push(format!(
                    "divergent delivery at n={n} slot={slot}: {:?} vs {:?}",
                    first.replica, d.replica
                ));
            }
        }
    }

    // Prefix property.
    if let Some(longest) = per_replica
        .values()
        .max_by_key(|records| records.len())
        .cloned()
    {
        for (replica, records) in &per_replica {
            for (i, d) in records.iter().enumerate() {
                let reference = longest[i];
                if d.n != reference.n
                    || d.slot != reference.slot
                    || d.request_digest != reference.request_digest
                    || d.random != reference.random
                {
                    report.violations.push(format!(
                        "replica {:?} delivery {} is not a prefix of the longest sequence",
                        replica, i
                    ));
                    break;
                }
            }
        }
    }

    // Client accepts must match correct-replica deliveries.
    let mut delivered_lookup: BTreeMap<(u64, u64), &DeliveryRecord> = BTreeMap::new();
    for records in per_replica.values() {
        for d in records {
            delivered_lookup.insert((d.client_id, d.timestamp), d);
        }
    }
    for a in &trace.accepts {
        match delivered_lookup.get(&(a.client, a.timestamp)) {
            Some(d) => {
                if d.random != a.random || d.request_digest != a.result_digest {
                    report.violations.push(format!(
                        "client {} accepted a value correct replicas did not deliver (ts={})",
                        a.client, a.timestamp
                    ));
                }
            }
            None => report.violations.push(format!(
                "client {} accepted ts={} that no correct replica delivered",
                a.client, a.timestamp
            )),
        }
    }

    if trace.client_inconsistencies > 0 {
        report.violations.push(format!(
            "clients flagged {} reply inconsistencies",
            trace.client_inconsistencies
        ));
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_presets() {
        let mut lan = LatencyModel::lan(1);
        for _ in 0..100 {
            let d = lan.sample();
            assert!((40_000..=60_000).contains(&d));
        }
        let mut wan = LatencyModel::wan(1);
        for _ in 0..100 {
            let d = wan.sample();
            assert!((48_000_000..=52_000_000).contains(&d));
        }
        let mut zero = LatencyModel::zero();
        assert_eq!(zero.sample(), 0);
    }

    #[test]
    fn latency_is_seed_deterministic() {
        let mut a = LatencyModel::new(1000, 500, 42);
        let mut b = LatencyModel::new(1000, 500, 42);
        for _ in 0..1000 {
            assert_eq!(a.sample(), b.sample());
        }
    }

    #[test]
    fn zero_jitter_multicast_is_simultaneous() {
        let mut m = LatencyModel::new(50_000_000, 0, 9);
        assert_eq!(m.sample(), 50_000_000);
        assert_eq!(m.sample(), 50_000_000);
        assert_eq!(m.sample(), 50_000_000);
    }

    #[test]
    fn empty_actor_set_is_immediately_quiescent() {
        let sim = Simulation::new(LatencyModel::zero());
        let out = sim.run(Vec::new(), Until::Quiescent).unwrap();
        assert_eq!(out.trace.events_dispatched, 0);
        assert!(!out.cap_exhausted);
    }
}
