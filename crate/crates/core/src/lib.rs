//! Byzantine fault tolerant replication that totally orders client requests
//! while collectively determining the fresh random numbers the application
//! needs.
//!
//! Two interchangeable mechanisms are provided on top of the same three-phase
//! ordering core:
//!
//! * **BA** — replicas agree (through the ordering protocol itself) on a set
//!   of `2f+1` entropy shares and combine them with bitwise exclusive-or.
//!   Costs two extra communication steps, no heavy cryptography.
//! * **CT** — replicas threshold-sign the ordered request; the unique group
//!   signature is hashed and truncated into the random value. No extra
//!   communication steps, but expensive RSA exponentiations.
//!
//! The crate also ships a deterministic discrete-event network simulator with
//! fault injection, an analytic latency model driven by a table of primitive
//! crypto costs, and a benchmark CLI (`randbft`).

pub mod authcrypt;
pub mod bench;
pub mod client;
pub mod config;
pub mod costs;
pub mod entropy;
pub mod faults;
pub mod protocol;
pub mod replica;
pub mod sim;
pub mod tcp;
pub mod threshold;

/// Durations and simulated timestamps are plain nanosecond counts so that the
/// simulation stays exactly reproducible across platforms.
pub type Nanos = u64;
