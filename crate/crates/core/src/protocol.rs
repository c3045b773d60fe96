//! Protocol identifiers, quorum arithmetic, message formats and the canonical
//! wire encoding shared by every other module.
//!
//! The encoding is deliberately simple so it can be reproduced from any
//! language: a 1-byte variant tag, integers as 8-byte big-endian, variable
//! byte fields length-prefixed with a 4-byte big-endian length, fixed 32-byte
//! values raw, and the authenticator trailer last.

use thiserror::Error;

use crate::authcrypt::{Authenticator, Mac};
use crate::entropy::{RandomShare, ShareSet};
use crate::threshold::{EqLogProof, SignatureShare};

/// Replica identifier in `[0, 3f]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaId(pub u64);

/// View number. Starts at 0, only ever increases at a replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct View(pub u64);

/// Sequence number assigned by the primary; gapless per view in normal
/// operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeqNum(pub u64);

/// SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({})", hex::encode(&self.0[..8]))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid replica count {0}: need n >= 4 and n = 3f+1")]
    InvalidReplicaCount(u64),
    #[error("invalid fault bound f={0}: need f >= 1")]
    InvalidFaultBound(u64),
    #[error("threshold k={k} out of range [{lo}, {hi}]")]
    ThresholdOutOfRange { k: u64, lo: u64, hi: u64 },
}

/// Vote thresholds derived from the fault bound `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuorumSpec {
    pub f: u64,
    /// Matching prepare messages (from backups) needed to commit: `2f`.
    pub prepare_quorum: u64,
    /// Matching commit messages needed to decide: `2f+1`.
    pub commit_quorum: u64,
    /// Backup pp-update messages the primary waits for: `2f`.
    pub pp_update_quorum: u64,
    /// Matching client replies needed to accept a result: `f+1`.
    pub reply_quorum: u64,
    /// Threshold for the coin-tossing signature, in `[f+1, 2f+1]`.
    pub ct_threshold: u64,
}

impl QuorumSpec {
    /// Total number of replicas, `3f+1`.
    pub fn n_replicas(&self) -> u64 {
        3 * self.f + 1
    }

    /// Size of the agreed entropy share set, `2f+1`.
    pub fn share_set_size(&self) -> u64 {
        2 * self.f + 1
    }
}

/// Primary for view `v` among `n_replicas` replicas: `v mod n_replicas`.
pub fn primary_of(v: View, n_replicas: u64) -> Result<ReplicaId, ProtocolError> {
    if n_replicas < 4 || n_replicas % 3 != 1 {
        return Err(ProtocolError::InvalidReplicaCount(n_replicas));
    }
    Ok(ReplicaId(v.0 % n_replicas))
}

/// Derive the full quorum specification from `f` and the coin threshold `k`.
pub fn quorums_for(f: u64, k: u64) -> Result<QuorumSpec, ProtocolError> {
    if f < 1 {
        return Err(ProtocolError::InvalidFaultBound(f));
    }
    if k < f + 1 || k > 2 * f + 1 {
        return Err(ProtocolError::ThresholdOutOfRange {
            k,
            lo: f + 1,
            hi: 2 * f + 1,
        });
    }
    Ok(QuorumSpec {
        f,
        prepare_quorum: 2 * f,
        commit_quorum: 2 * f + 1,
        pp_update_quorum: 2 * f,
        reply_quorum: f + 1,
        ct_threshold: k,
    })
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// Client request. `timestamp` is an opaque monotonically increasing counter
/// used only for de-duplication, never as a randomness seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub client_id: u64,
    pub op_payload: Vec<u8>,
    pub timestamp: u64,
}

/// Ordering proposal from the primary. Carries the request batch it orders
/// and, when the batch triggers a randomized operation in BA mode, the
/// primary's own entropy share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrePrepare {
    pub v: View,
    pub n: SeqNum,
    pub d: Digest,
    /// Encoded `Request` messages of the batch, in batch order. The digest
    /// `d` binds exactly these bytes.
    pub requests: Vec<Vec<u8>>,
    pub r_p: Option<RandomShare>,
}

/// Payload of a pp-update: a single backup share, or the primary's agreed
/// set of `2f+1` (share, contributor) tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PpUpdatePayload {
    Share(RandomShare),
    ShareSet(ShareSet),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpUpdate {
    pub v: View,
    pub n: SeqNum,
    pub i: ReplicaId,
    pub payload: PpUpdatePayload,
    pub d: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepare {
    pub v: View,
    pub n: SeqNum,
    pub i: ReplicaId,
    /// For the BA path this is `d' = H(d || combined-random)`; otherwise the
    /// plain request digest `d`.
    pub d_prime: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commit {
    pub v: View,
    pub n: SeqNum,
    pub i: ReplicaId,
    pub d: Digest,
    /// Threshold signature share over `d || n`, present on the CT path for
    /// randomized requests.
    pub sig_share: Option<SignatureShare>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub v: View,
    pub client_id: u64,
    pub result: Vec<u8>,
    /// Delivered random value (width-truncated, big-endian), so the client
    /// quorum attests the coin as well as the result.
    pub random: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Request(Request),
    PrePrepare(PrePrepare),
    PpUpdate(PpUpdate),
    Prepare(Prepare),
    Commit(Commit),
    Reply(Reply),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Request(_) => "request",
            Payload::PrePrepare(_) => "pre-prepare",
            Payload::PpUpdate(_) => "pp-update",
            Payload::Prepare(_) => "prepare",
            Payload::Commit(_) => "commit",
            Payload::Reply(_) => "reply",
        }
    }
}

/// Authentication trailer: a single MAC for point-to-point messages, or one
/// MAC per multicast target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthTrailer {
    Mac(Mac),
    Authenticator(Authenticator),
}

/// A protocol message: payload plus authentication trailer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub payload: Payload,
    pub auth: AuthTrailer,
}

impl Message {
    /// Bytes covered by the MAC / authenticator: the canonical encoding of
    /// everything except the trailer.
    pub fn signed_bytes(&self) -> Vec<u8> {
        encode_payload(&self.payload)
    }
}

/// Canonical encoding of a payload alone (what the trailer signs).
pub fn payload_bytes(p: &Payload) -> Vec<u8> {
    encode_payload(p)
}

// ---------------------------------------------------------------------------
// Canonical byte encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("empty input")]
    Empty,
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("truncated input")]
    Truncated,
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("malformed field: {0}")]
    Malformed(&'static str),
}

const TAG_REQUEST: u8 = 1;
const TAG_PRE_PREPARE: u8 = 2;
const TAG_PP_UPDATE: u8 = 3;
const TAG_PREPARE: u8 = 4;
const TAG_COMMIT: u8 = 5;
const TAG_REPLY: u8 = 6;

// Guards against absurd allocation requests from corrupt input.
const MAX_LIST_LEN: usize = 1 << 20;
const MAX_BYTES_LEN: usize = 1 << 26;

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Writer(Vec::with_capacity(128))
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_be_bytes());
    }
    fn raw32(&mut self, x: &[u8; 32]) {
        self.0.extend_from_slice(x);
    }
    fn bytes(&mut self, x: &[u8]) {
        self.0.extend_from_slice(&(x.len() as u32).to_be_bytes());
        self.0.extend_from_slice(x);
    }
    fn bigint(&mut self, x: &num_bigint::BigUint) {
        self.bytes(&x.to_bytes_be());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        if self.remaining() < 1 {
            return Err(DecodeError::Truncated);
        }
        let x = self.buf[self.pos];
        self.pos += 1;
        Ok(x)
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        if self.remaining() < 8 {
            return Err(DecodeError::Truncated);
        }
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.buf[self.pos..self.pos + 8]);
        self.pos += 8;
        Ok(u64::from_be_bytes(b))
    }
    fn raw32(&mut self) -> Result<[u8; 32], DecodeError> {
        if self.remaining() < 32 {
            return Err(DecodeError::Truncated);
        }
        let mut b = [0u8; 32];
        b.copy_from_slice(&self.buf[self.pos..self.pos + 32]);
        self.pos += 32;
        Ok(b)
    }
    fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        if self.remaining() < 4 {
            return Err(DecodeError::Truncated);
        }
        let mut b = [0u8; 4];
        b.copy_from_slice(&self.buf[self.pos..self.pos + 4]);
        self.pos += 4;
        let len = u32::from_be_bytes(b) as usize;
        if len > MAX_BYTES_LEN {
            return Err(DecodeError::Malformed("byte field too long"));
        }
        if self.remaining() < len {
            return Err(DecodeError::Truncated);
        }
        let out = self.buf[self.pos..self.pos + len].to_vec();
        self.pos += len;
        Ok(out)
    }
    fn bigint(&mut self) -> Result<num_bigint::BigUint, DecodeError> {
        Ok(num_bigint::BigUint::from_bytes_be(&self.bytes()?))
    }
    fn list_len(&mut self) -> Result<usize, DecodeError> {
        if self.remaining() < 4 {
            return Err(DecodeError::Truncated);
        }
        let mut b = [0u8; 4];
        b.copy_from_slice(&self.buf[self.pos..self.pos + 4]);
        self.pos += 4;
        let len = u32::from_be_bytes(b) as usize;
        if len > MAX_LIST_LEN {
            return Err(DecodeError::Malformed("list too long"));
        }
        Ok(len)
    }
}

fn encode_payload(p: &Payload) -> Vec<u8> {
    let mut w = Writer::new();
    match p {
        Payload::Request(r) => {
            w.u8(TAG_REQUEST);
            w.u64(r.client_id);
            w.bytes(&r.op_payload);
            w.u64(r.timestamp);
        }
        Payload::PrePrepare(pp) => {
            w.u8(TAG_PRE_PREPARE);
            w.u64(pp.v.0);
            w.u64(pp.n.0);
            w.raw32(&pp.d.0);
            w.u64(pp.requests.len() as u64);
            for r in &pp.requests {
                w.bytes(r);
            }
            match &pp.r_p {
                None => w.u8(0),
                Some(s) => {
                    w.u8(1);
                    w.raw32(&s.0);
                }
            }
        }
        Payload::PpUpdate(u) => {
            w.u8(TAG_PP_UPDATE);
            w.u64(u.v.0);
            w.u64(u.n.0);
            w.u64(u.i.0);
            match &u.payload {
                PpUpdatePayload::Share(s) => {
                    w.u8(0);
                    w.raw32(&s.0);
                }
                PpUpdatePayload::ShareSet(set) => {
                    w.u8(1);
                    w.u64(set.entries.len() as u64);
                    for (share, id) in &set.entries {
                        w.raw32(&share.0);
                        w.u64(id.0);
                    }
                }
            }
            w.raw32(&u.d.0);
        }
        Payload::Prepare(pr) => {
            w.u8(TAG_PREPARE);
            w.u64(pr.v.0);
            w.u64(pr.n.0);
            w.u64(pr.i.0);
            w.raw32(&pr.d_prime.0);
        }
        Payload::Commit(c) => {
            w.u8(TAG_COMMIT);
            w.u64(c.v.0);
            w.u64(c.n.0);
            w.u64(c.i.0);
            w.raw32(&c.d.0);
            match &c.sig_share {
                None => w.u8(0),
                Some(s) => {
                    w.u8(1);
                    w.u64(s.holder as u64);
                    w.bigint(&s.value);
                    w.bigint(&s.proof.challenge);
                    w.bigint(&s.proof.response);
                }
            }
        }
        Payload::Reply(r) => {
            w.u8(TAG_REPLY);
            w.u64(r.v.0);
            w.u64(r.client_id);
            w.bytes(&r.result);
            match &r.random {
                None => w.u8(0),
                Some(b) => {
                    w.u8(1);
                    w.bytes(b);
                }
            }
        }
    }
    w.0
}

fn encode_trailer(t: &AuthTrailer, w: &mut Writer) {
    match t {
        AuthTrailer::Mac(m) => {
            w.u8(0);
            w.raw32(&m.0);
        }
        AuthTrailer::Authenticator(a) => {
            w.u8(1);
            w.u64(a.entries.len() as u64);
            for (id, mac) in &a.entries {
                w.u64(id.0);
                w.raw32(&mac.0);
            }
        }
    }
}

/// Canonical encoding of a message, trailer last.
pub fn encode(m: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    w.0 = encode_payload(&m.payload);
    encode_trailer(&m.auth, &mut w);
    w.0
}

fn decode_payload(r: &mut Reader) -> Result<Payload, DecodeError> {
    let tag = r.u8()?;
    let payload = match tag {
        TAG_REQUEST => Payload::Request(Request {
            client_id: r.u64()?,
            op_payload: r.bytes()?,
            timestamp: r.u64()?,
        }),
        TAG_PRE_PREPARE => {
            let v = View(r.u64()?);
            let n = SeqNum(r.u64()?);
            let d = Digest(r.raw32()?);
            let count = r.u64()? as usize;
            if count > MAX_LIST_LEN {
                return Err(DecodeError::Malformed("batch too large"));
            }
            let mut requests = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                requests.push(r.bytes()?);
            }
            let r_p = match r.u8()? {
                0 => None,
                1 => Some(RandomShare(r.raw32()?)),
                _ => return Err(DecodeError::Malformed("option flag")),
            };
            Payload::PrePrepare(PrePrepare {
                v,
                n,
                d,
                requests,
                r_p,
            })
        }
        TAG_PP_UPDATE => {
            let v = View(r.u64()?);
            let n = SeqNum(r.u64()?);
            let i = ReplicaId(r.u64()?);
            let payload = match r.u8()? {
                0 => PpUpdatePayload::Share(RandomShare(r.raw32()?)),
                1 => {
                    let count = r.u64()? as usize;
                    if count > MAX_LIST_LEN {
                        return Err(DecodeError::Malformed("share set too large"));
                    }
                    let mut entries = Vec::with_capacity(count.min(1024));
                    for _ in 0..count {
                        let share = RandomShare(r.raw32()?);
                        let id = ReplicaId(r.u64()?);
                        entries.push((share, id));
                    }
                    PpUpdatePayload::ShareSet(ShareSet { entries })
                }
                _ => return Err(DecodeError::Malformed("pp-update payload tag")),
            };
            let d = Digest(r.raw32()?);
            Payload::PpUpdate(PpUpdate { v, n, i, payload, d })
        }
        TAG_PREPARE => Payload::Prepare(Prepare {
            v: View(r.u64()?),
            n: SeqNum(r.u64()?),
            i: ReplicaId(r.u64()?),
            d_prime: Digest(r.raw32()?),
        }),
        TAG_COMMIT => {
            let v = View(r.u64()?);
            let n = SeqNum(r.u64()?);
            let i = ReplicaId(r.u64()?);
            let d = Digest(r.raw32()?);
            let sig_share = match r.u8()? {
                0 => None,
                1 => {
                    let holder = r.u64()?;
                    if holder == 0 || holder > u32::MAX as u64 {
                        return Err(DecodeError::Malformed("share holder"));
                    }
                    Some(SignatureShare {
                        holder: holder as u32,
                        value: r.bigint()?,
                        proof: EqLogProof {
                            challenge: r.bigint()?,
                            response: r.bigint()?,
                        },
                    })
                }
                _ => return Err(DecodeError::Malformed("option flag")),
            };
            Payload::Commit(Commit {
                v,
                n,
                i,
                d,
                sig_share,
            })
        }
        TAG_REPLY => {
            let v = View(r.u64()?);
            let client_id = r.u64()?;
            let result = r.bytes()?;
            let random = match r.u8()? {
                0 => None,
                1 => Some(r.bytes()?),
                _ => return Err(DecodeError::Malformed("option flag")),
            };
            Payload::Reply(Reply {
                v,
                client_id,
                result,
                random,
            })
        }
        other => return Err(DecodeError::UnknownTag(other)),
    };
    Ok(payload)
}

fn decode_trailer(r: &mut Reader) -> Result<AuthTrailer, DecodeError> {
    match r.u8()? {
        0 => Ok(AuthTrailer::Mac(Mac(r.raw32()?))),
        1 => {
            let count = r.u64()? as usize;
            if count > MAX_LIST_LEN {
                return Err(DecodeError::Malformed("authenticator too large"));
            }
            let mut entries = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                let id = ReplicaId(r.u64()?);
                let mac = Mac(r.raw32()?);
                entries.push((id, mac));
            }
            Ok(AuthTrailer::Authenticator(Authenticator { entries }))
        }
        _ => Err(DecodeError::Malformed("trailer tag")),
    }
}

/// Decode a message from its canonical encoding. Rejects empty input,
/// unknown tags, truncation and trailing garbage.
pub fn decode(b: &[u8]) -> Result<Message, DecodeError> {
    if b.is_empty() {
        return Err(DecodeError::Empty);
    }
    let mut r = Reader::new(b);
    let payload = decode_payload(&mut r)?;
    let auth = decode_trailer(&mut r)?;
    if r.remaining() > 0 {
        return Err(DecodeError::TrailingBytes(r.remaining()));
    }
    Ok(Message { payload, auth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authcrypt::Mac;

    fn prepare_msg() -> Message {
        Message {
            payload: Payload::Prepare(Prepare {
                v: View(0),
                n: SeqNum(1),
                i: ReplicaId(2),
                d_prime: Digest([0u8; 32]),
            }),
            auth: AuthTrailer::Mac(Mac([7u8; 32])),
        }
    }

    #[test]
    fn primary_of_examples() {
        assert_eq!(primary_of(View(0), 4).unwrap(), ReplicaId(0));
        assert_eq!(primary_of(View(5), 4).unwrap(), ReplicaId(1));
        assert_eq!(primary_of(View(7), 7).unwrap(), ReplicaId(0));
        assert!(primary_of(View(0), 3).is_err());
        assert!(primary_of(View(0), 5).is_err());
        assert!(primary_of(View(0), 6).is_err());
    }

    #[test]
    fn quorums_examples() {
        let q = quorums_for(1, 2).unwrap();
        assert_eq!(q.prepare_quorum, 2);
        assert_eq!(q.commit_quorum, 3);
        assert_eq!(q.pp_update_quorum, 2);
        assert_eq!(q.reply_quorum, 2);
        assert_eq!(q.n_replicas(), 4);

        let q = quorums_for(2, 5).unwrap();
        assert_eq!(q.prepare_quorum, 4);
        assert_eq!(q.commit_quorum, 5);
        assert_eq!(q.pp_update_quorum, 4);
        assert_eq!(q.reply_quorum, 3);
        assert_eq!(q.n_replicas(), 7);

        assert!(quorums_for(1, 4).is_err());
        assert!(quorums_for(1, 1).is_err());
        assert!(quorums_for(0, 1).is_err());
    }

    #[test]
    fn quorum_arithmetic_invariants() {
        for f in 1..64u64 {
            let q = quorums_for(f, f + 1).unwrap();
            assert_eq!(q.commit_quorum - q.prepare_quorum, 1);
            assert_eq!(q.reply_quorum, f + 1);
        }
    }

    #[test]
    fn roundtrip_prepare() {
        let m = prepare_msg();
        let bytes = encode(&m);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn decode_rejects_empty() {
        assert_eq!(decode(&[]), Err(DecodeError::Empty));
    }

    #[test]
    fn decode_rejects_trailing_byte() {
        let mut bytes = encode(&prepare_msg());
        bytes.push(0);
        assert!(matches!(
            decode(&bytes),
            Err(DecodeError::TrailingBytes(1))
        ));
    }

    #[test]
    fn decode_rejects_unknown_tag() {
        let mut bytes = encode(&prepare_msg());
        bytes[0] = 99;
        assert_eq!(decode(&bytes), Err(DecodeError::UnknownTag(99)));
    }

    #[test]
    fn decode_rejects_every_truncation_of_prepare() {
        let bytes = encode(&prepare_msg());
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut} accepted");
        }
    }
}
