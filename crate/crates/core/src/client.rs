//! Closed-loop client: request issuance, reply collection with `f+1`
//! matching-reply voting, and end-to-end latency timestamping.
//!
//! A client keeps at most one request outstanding and issues the next one
//! the moment the previous reply is accepted. Reply verification is lazy and
//! metered the same way replica-side crypto is.

use std::collections::HashMap;

use crate::authcrypt::{authenticator_sign, mac_verify, AuthTrailer, Keyring, PeerId};
use crate::costs::{CostMeter, CostTable};
use crate::protocol::{payload_bytes, Message, Payload, QuorumSpec, ReplicaId, Request, View};
use crate::replica::{Action, Event, SendTarget};
use crate::Nanos;

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub id: u64,
    pub quorums: QuorumSpec,
    /// Request body; the benchmark uses a fixed-size echo payload.
    pub payload: Vec<u8>,
    /// How many requests to issue before going quiet. 0 means stay idle.
    pub total_requests: u64,
    pub retransmit_timeout: Nanos,
}

#[derive(Debug)]
struct ReplyVote {
    from: ReplicaId,
    msg: Message,
    verified: bool,
    failed: bool,
}

/// The single in-flight request of a closed-loop client.
#[derive(Debug)]
pub struct PendingRequest {
    pub timestamp: u64,
    pub issued_at: Nanos,
    msg: Message,
    replies: Vec<ReplyVote>,
    inconsistent: bool,
}

/// One accepted (quorum-matched) reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptedReply {
    pub timestamp: u64,
    pub at: Nanos,
    pub latency: Nanos,
    pub result: Vec<u8>,
    pub random: Option<Vec<u8>>,
}

pub struct Client {
    cfg: ClientConfig,
    keyring: Keyring,
    view_guess: View,
    next_timestamp: u64,
    issued: u64,
    pending: Option<PendingRequest>,
    accepts: Vec<AcceptedReply>,
    inconsistencies: u64,
    timers: HashMap<u64, u64>,
    next_timer: u64,
    meter: CostMeter,
}

impl Client {
    pub fn new(cfg: ClientConfig, keyring: Keyring, costs: Option<CostTable>) -> Self {
        Client {
            cfg,
            keyring,
            view_guess: View(0),
            next_timestamp: 1,
            issued: 0,
            pending: None,
            accepts: Vec::new(),
            inconsistencies: 0,
            timers: HashMap::new(),
            next_timer: 0,
            meter: match costs {
                Some(t) => CostMeter::with_table(t),
                None => CostMeter::disabled(),
            },
        }
    }

    pub fn id(&self) -> u64 {
        self.cfg.id
    }

    pub fn accepts(&self) -> &[AcceptedReply] {
        &self.accepts
    }

    pub fn accepted_count(&self) -> u64 {
        self.accepts.len() as u64
    }

    pub fn inconsistencies(&self) -> u64 {
        self.inconsistencies
    }

    pub fn done(&self) -> bool {
        self.issued >= self.cfg.total_requests && self.pending.is_none()
    }

    pub fn drain_charged(&mut self) -> Nanos {
        self.meter.drain()
    }

    pub fn on_event(&mut self, ev: Event, now: Nanos) -> Vec<Action> {
        let mut actions = Vec::new();
        match ev {
            Event::Init => {
                if self.issued < self.cfg.total_requests {
                    self.issue(now, &mut actions);
                }
            }
            Event::Message { from, msg } => {
                if let PeerId::Replica(r) = from {
                    self.on_reply(r, msg, now, &mut actions);
                }
            }
            Event::TimerFired { id } => self.on_timer(id, &mut actions),
            Event::RetransmitRequest { .. } => {}
        }
        actions
    }

    /// Send a fresh request to the primary. The authenticator covers every
    /// replica so a later rebroadcast reuses the same signed message.
    fn issue(&mut self, now: Nanos, actions: &mut Vec<Action>) {
        assert!(self.pending.is_none(), "closed-loop client double issue");
        let issued_at = now + self.meter.accrued();
        let timestamp = self.next_timestamp;
        self.next_timestamp += 1;
        self.issued += 1;

        let req = Request {
            client_id: self.cfg.id,
            op_payload: self.cfg.payload.clone(),
            timestamp,
        };
        let payload = Payload::Request(req);
        let bytes = payload_bytes(&payload);
        self.meter.charge_auth_gen();
        let keys: Vec<_> = (0..self.cfg.quorums.n_replicas())
            .map(|r| {
                self.keyring
                    .key_between(PeerId::Client(self.cfg.id), PeerId::Replica(ReplicaId(r)))
            })
            .collect();
        let auth = authenticator_sign(&keys, &bytes).expect("distinct replica targets");
        let msg = Message {
            payload,
            auth: AuthTrailer::Authenticator(auth),
        };

        self.pending = Some(PendingRequest {
            timestamp,
            issued_at,
            msg: msg.clone(),
            replies: Vec::new(),
            inconsistent: false,
        });

        let primary = ReplicaId(self.view_guess.0 % self.cfg.quorums.n_replicas());
        actions.push(Action::Send {
            to: SendTarget::Replica(primary),
            msg,
        });
        let id = self.next_timer;
        self.next_timer += 1;
        self.timers.insert(id, timestamp);
        actions.push(Action::StartTimer {
            id,
            duration: self.cfg.retransmit_timeout,
        });
    }

    /// Record a reply and accept once `f+1` verified replies agree on
    /// (result, random). Latencies include the verification work itself.
    fn on_reply(&mut self, from: ReplicaId, msg: Message, now: Nanos, actions: &mut Vec<Action>) {
        let Payload::Reply(reply) = &msg.payload else {
            return;
        };
        if reply.client_id != self.cfg.id {
            return;
        }
        let Some(pending) = &mut self.pending else {
            return; // Reply for an already-accepted request.
        };
        if pending.replies.iter().any(|r| r.from == from) {
            return;
        }
        pending.replies.push(ReplyVote {
            from,
            msg,
            verified: false,
            failed: false,
        });

        // Verify in arrival order until one (result, random) group reaches
        // the reply quorum.
        let quorum = self.cfg.quorums.reply_quorum as usize;
        let mut winner: Option<(Vec<u8>, Option<Vec<u8>>)> = None;
        for idx in 0..pending.replies.len() {
            {
                let vote = &mut pending.replies[idx];
                if vote.failed {
                    continue;
                }
                if !vote.verified {
                    let bytes = vote.msg.signed_bytes();
                    let key = self
                        .keyring
                        .key_between(PeerId::Replica(vote.from), PeerId::Client(self.cfg.id));
                    let ok = match &vote.msg.auth {
                        AuthTrailer::Mac(m) => {
                            self.meter.charge_mac_verify();
                            mac_verify(&key, &bytes, m)
                        }
                        AuthTrailer::Authenticator(_) => false,
                    };
                    if ok {
                        vote.verified = true;
                    } else {
                        vote.failed = true;
                        continue;
                    }
                }
            }
            let (result, random) = match &pending.replies[idx].msg.payload {
                Payload::Reply(r) => (r.result.clone(), r.random.clone()),
                _ => unreachable!(),
            };
            let matching = pending
                .replies
                .iter()
                .filter(|v| {
                    v.verified
                        && match &v.msg.payload {
                            Payload::Reply(r) => r.result == result && r.random == random,
                            _ => false,
                        }
                })
                .count();
            if matching >= quorum {
                winner = Some((result, random));
                break;
            }
        }

        if let Some((result, random)) = winner {
            let at = now + self.meter.accrued();
            let pending = self.pending.take().expect("checked");
            self.accepts.push(AcceptedReply {
                timestamp: pending.timestamp,
                at,
                latency: at - pending.issued_at,
                result,
                random,
            });
            if self.issued < self.cfg.total_requests {
                self.issue(now, actions);
            }
        } else {
            // With 2f+1 verified replies and still no agreeing quorum,
            // someone faulty answered; record the evidence once.
            let pending = self.pending.as_mut().expect("checked");
            let verified = pending.replies.iter().filter(|v| v.verified).count();
            if verified >= (2 * self.cfg.quorums.f + 1) as usize && !pending.inconsistent {
                pending.inconsistent = true;
                self.inconsistencies += 1;
            }
        }
    }

    /// Retransmit timeout: rebroadcast the signed request to every replica
    /// and re-arm.
    fn on_timer(&mut self, id: u64, actions: &mut Vec<Action>) {
        let Some(timestamp) = self.timers.remove(&id) else {
            return;
        };
        let Some(pending) = &self.pending else {
            return;
        };
        if pending.timestamp != timestamp {
            return;
        }
        actions.push(Action::Send {
            to: SendTarget::AllReplicas,
            msg: pending.msg.clone(),
        });
        let new_id = self.next_timer;
        self.next_timer += 1;
        self.timers.insert(new_id, timestamp);
        actions.push(Action::StartTimer {
            id: new_id,
            duration: self.cfg.retransmit_timeout,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authcrypt::mac_sign;
    use crate::protocol::{quorums_for, Reply};

    fn keyring() -> Keyring {
        Keyring::new([7u8; 32])
    }

    fn client() -> Client {
        Client::new(
            ClientConfig {
                id: 1,
                quorums: quorums_for(1, 2).unwrap(),
                payload: vec![0x61; 16],
                total_requests: 2,
                retransmit_timeout: 1_000_000_000,
            },
            keyring(),
            None,
        )
    }

    fn reply_from(replica: u64, client_id: u64, result: &[u8], random: Option<Vec<u8>>) -> Message {
        let ring = keyring();
        let payload = Payload::Reply(Reply {
            v: View(0),
            client_id,
            result: result.to_vec(),
            random,
        });
        let bytes = payload_bytes(&payload);
        let key = ring.key_between(PeerId::Replica(ReplicaId(replica)), PeerId::Client(client_id));
        Message {
            payload,
            auth: AuthTrailer::Mac(mac_sign(&key, &bytes)),
        }
    }

    #[test]
    fn init_sends_one_request_to_primary() {
        let mut c = client();
        let actions = c.on_event(Event::Init, 0);
        let send = actions
            .iter()
            .find_map(|a| match a {
                Action::Send { to, msg } => Some((to, msg)),
                _ => None,
            })
            .expect("request sent");
        assert_eq!(*send.0, SendTarget::Replica(ReplicaId(0)));
        assert!(matches!(send.1.payload, Payload::Request(_)));
    }

    #[test]
    fn one_reply_is_below_quorum_two_match_accepts() {
        let mut c = client();
        c.on_event(Event::Init, 0);
        let r = c.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: reply_from(0, 1, b"res", None),
            },
            50,
        );
        assert!(r.is_empty());
        assert_eq!(c.accepted_count(), 0);

        let r2 = c.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(2)),
                msg: reply_from(2, 1, b"res", None),
            },
            80,
        );
        assert_eq!(c.accepted_count(), 1);
        let acc = &c.accepts()[0];
        assert_eq!(acc.latency, 80);
        assert_eq!(acc.result, b"res");
        // Closed loop: next request goes out immediately.
        assert!(r2
            .iter()
            .any(|a| matches!(a, Action::Send { msg, .. } if matches!(msg.payload, Payload::Request(_)))));
    }

    #[test]
    fn mismatched_random_does_not_count_toward_quorum() {
        let mut c = client();
        c.on_event(Event::Init, 0);
        c.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: reply_from(0, 1, b"res", Some(vec![1, 2, 3, 4])),
            },
            10,
        );
        c.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(1)),
                msg: reply_from(1, 1, b"res", Some(vec![9, 9, 9, 9])),
            },
            11,
        );
        assert_eq!(c.accepted_count(), 0);
        // A matching third reply resolves it; the odd one out stays recorded.
        c.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(2)),
                msg: reply_from(2, 1, b"res", Some(vec![1, 2, 3, 4])),
            },
            12,
        );
        assert_eq!(c.accepted_count(), 1);
        assert_eq!(c.accepts()[0].random, Some(vec![1, 2, 3, 4]));
    }

    #[test]
    fn inconsistency_flagged_after_2f1_disagreeing_replies() {
        let mut c = client();
        c.on_event(Event::Init, 0);
        for (replica, tag) in [(0u64, 1u8), (1, 2), (2, 3)] {
            c.on_event(
                Event::Message {
                    from: PeerId::Replica(ReplicaId(replica)),
                    msg: reply_from(replica, 1, b"res", Some(vec![tag; 4])),
                },
                10,
            );
        }
        assert_eq!(c.accepted_count(), 0);
        assert_eq!(c.inconsistencies(), 1);
    }

    #[test]
    fn retransmit_rebroadcasts_to_all_replicas() {
        let mut c = client();
        let actions = c.on_event(Event::Init, 0);
        let timer = actions
            .iter()
            .find_map(|a| match a {
                Action::StartTimer { id, .. } => Some(*id),
                _ => None,
            })
            .unwrap();
        let fired = c.on_event(Event::TimerFired { id: timer }, 1_000_000_000);
        assert!(fired
            .iter()
            .any(|a| matches!(a, Action::Send { to: SendTarget::AllReplicas, .. })));
        // Re-armed.
        assert!(fired
            .iter()
            .any(|a| matches!(a, Action::StartTimer { .. })));
    }

    #[test]
    fn bad_mac_reply_is_ignored() {
        let mut c = client();
        c.on_event(Event::Init, 0);
        let mut bad = reply_from(0, 1, b"res", None);
        if let AuthTrailer::Mac(m) = &mut bad.auth {
            m.0[0] ^= 0xff;
        }
        c.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(0)),
                msg: bad,
            },
            10,
        );
        c.on_event(
            Event::Message {
                from: PeerId::Replica(ReplicaId(1)),
                msg: reply_from(1, 1, b"res", None),
            },
            11,
        );
        // Only one verified reply so far.
        assert_eq!(c.accepted_count(), 0);
    }
}
