//! Benchmark harness: runs workloads in the simulator, computes
//! latency/throughput metrics, evaluates the analytic cost model, and emits
//! CSV reports.
//!
//! The analytic model counts primitive crypto operations on the fault-free
//! critical path of a single call:
//!
//! * base ordering:   `4 A_g + 5 A_v + M_g + 2 M_v`
//! * BA path:         `6 A_g + 8 A_v + M_g + 2 M_v` (two extra steps)
//! * CT path:         base plus `T_s + T_v`
//!
//! With a cost table charged to the simulated clock, a one-client zero-jitter
//! run lands exactly on the model plus the network steps.

use std::collections::BTreeSet;
use std::time::Instant;

use thiserror::Error;

use crate::authcrypt::{authenticator_sign, authenticator_verify, mac_sign, mac_verify, Keyring, PeerId};
use crate::client::{Client, ClientConfig};
use crate::costs::{CoinCost, CostError, CostTable};
use crate::entropy::EntropySource;
use crate::faults::{wrap, FaultSpec};
use crate::protocol::{quorums_for, ProtocolError, ReplicaId};
use crate::replica::{AppOracle, Mode, Replica, ReplicaConfig, ReplicaError};
use crate::sim::{check_safety, InvariantReport, LatencyModel, SimActor, Simulation, Trace, Until};
use crate::threshold::{self, CoinHash, ThresholdError};
use crate::Nanos;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Replica(#[from] ReplicaError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error("simulation failed: {0}")]
    Sim(String),
    #[error("no accepted replies; nothing to report")]
    NoSamples,
}

/// Network preset for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Lan,
    Wan,
    /// No delay, no jitter; pure step counting.
    Zero,
    Custom { base: Nanos, jitter: Nanos },
}

impl Preset {
    pub fn model(&self, seed: u64) -> LatencyModel {
        match self {
            Preset::Lan => LatencyModel::lan(seed),
            Preset::Wan => LatencyModel::wan(seed),
            Preset::Zero => LatencyModel::zero(),
            Preset::Custom { base, jitter } => LatencyModel::new(*base, *jitter, seed),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preset::Lan => write!(f, "lan"),
            Preset::Wan => write!(f, "wan"),
            Preset::Zero => write!(f, "zero"),
            Preset::Custom { base, jitter } => write!(f, "custom({base},{jitter})"),
        }
    }
}

/// Minimum achievable end-to-end latency for one call under the cost table.
pub fn min_latency(
    mode: Mode,
    ct_params: Option<(u32, u32)>,
    costs: &CostTable,
) -> Result<Nanos, BenchError> {
    let base = 4 * costs.auth_gen + 5 * costs.auth_verify + costs.mac_gen + 2 * costs.mac_verify;
    Ok(match mode {
        Mode::Base => base,
        Mode::Ba => base + 2 * costs.auth_gen + 3 * costs.auth_verify,
        Mode::Ct => {
            let (k, bits) = ct_params.unwrap_or((2, 64));
            let CoinCost {
                sign,
                verify_combine,
            } = costs.coin_cost(k, bits)?;
            base + sign + verify_combine
        }
    })
}

/// Added latency relative to the base ordering protocol.
pub fn overhead(
    mode: Mode,
    ct_params: Option<(u32, u32)>,
    costs: &CostTable,
) -> Result<Nanos, BenchError> {
    Ok(match mode {
        Mode::Base => 0,
        Mode::Ba => 2 * costs.auth_gen + 3 * costs.auth_verify,
        Mode::Ct => {
            let (k, bits) = ct_params.unwrap_or((2, 64));
            let c = costs.coin_cost(k, bits)?;
            c.sign + c.verify_combine
        }
    })
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: Mode,
    pub f: u64,
    pub k: u32,
    pub key_bits: u32,
    pub clients: u64,
    pub request_bytes: usize,
    pub requests_per_client: u64,
    pub preset: Preset,
    pub batching: bool,
    pub ct_batching: bool,
    pub seed: u64,
    /// Charge these costs to the simulated clock. `None` leaves the clock
    /// driven purely by network delays.
    pub costs: Option<CostTable>,
    /// Width of the random value each request consumes.
    pub random_bits: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: Mode::Base,
            f: 1,
            k: 2,
            key_bits: 64,
            clients: 1,
            request_bytes: 1024,
            requests_per_client: 100,
            preset: Preset::Lan,
            batching: false,
            ct_batching: false,
            seed: 1,
            costs: None,
            random_bits: 32,
        }
    }
}

/// Latency and throughput, measured where they belong: latency at the
/// clients, throughput at the replicas.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub latencies: Vec<Nanos>,
    pub mean: Nanos,
    pub median: Nanos,
    pub p99: Nanos,
    /// Requests delivered per second of simulated time, at the replica that
    /// delivered the most.
    pub throughput_rps: f64,
    pub delivered: u64,
}

/// Nearest-rank percentile over a sorted slice: the smallest value such
/// that at least `q` of the samples are <= it.
pub fn percentile(sorted: &[Nanos], q: f64) -> Nanos {
    assert!(!sorted.is_empty());
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Metrics {
    pub fn from_trace(trace: &Trace) -> Result<Self, BenchError> {
        let mut latencies: Vec<Nanos> = trace.accepts.iter().map(|a| a.latency).collect();
        if latencies.is_empty() {
            return Err(BenchError::NoSamples);
        }
        latencies.sort_unstable();
        let mean = latencies.iter().sum::<u64>() / latencies.len() as u64;
        let median = percentile(&latencies, 0.50);
        let p99 = percentile(&latencies, 0.99);

        let mut per_replica: std::collections::BTreeMap<ReplicaId, (u64, Nanos)> =
            std::collections::BTreeMap::new();
        for d in &trace.deliveries {
            let e = per_replica.entry(d.replica).or_insert((0, 0));
            e.0 += 1;
            e.1 = e.1.max(d.at);
        }
        let (delivered, last_at) = per_replica
            .values()
            .max_by_key(|(count, _)| *count)
            .copied()
            .unwrap_or((0, 0));
        let throughput_rps = if last_at > 0 {
            delivered as f64 / (last_at as f64 / 1e9)
        } else {
            0.0
        };
        Ok(Metrics {
            latencies,
            mean,
            median,
            p99,
            throughput_rps,
            delivered,
        })
    }
}

/// Spin up `3f+1` replicas plus the closed-loop echo clients and run to
/// completion. Deterministic per seed.
pub fn run_bench(cfg: &BenchConfig) -> Result<(Metrics, Trace), BenchError> {
    let outcome = run_workload(cfg, &[])?;
    let metrics = Metrics::from_trace(&outcome)?;
    Ok((metrics, outcome))
}

/// As [`run_bench`] but with fault injection; returns the raw trace.
pub fn run_workload(cfg: &BenchConfig, faults: &[FaultSpec]) -> Result<Trace, BenchError> {
    let quorums = quorums_for(cfg.f, u64::from(cfg.k))?;
    let n = quorums.n_replicas();
    let root = {
        let mut root = [0u8; 32];
        root[..8].copy_from_slice(&cfg.seed.to_be_bytes());
        root[8] = 0x5e;
        root
    };

    let key_material = if cfg.mode == Mode::Ct {
        Some(threshold::deal(cfg.k, n as u32, cfg.key_bits, cfg.seed)?)
    } else {
        None
    };

    let mut actors = Vec::new();
    for id in 0..n {
        let (key_share, group_key) = match &key_material {
            Some((gk, shares)) => (Some(shares[id as usize].clone()), Some(gk.clone())),
            None => (None, None),
        };
        let rcfg = ReplicaConfig {
            id: ReplicaId(id),
            quorums,
            mode: cfg.mode,
            batching: cfg.batching,
            ct_batching: cfg.ct_batching,
            key_share,
            group_key,
            oracle: AppOracle::AllRandomized {
                bits: cfg.random_bits,
            },
            coin_hash: CoinHash::Sha1,
            timeout_base: 3_600_000_000_000, // late enough to stay quiet in sane runs
            retransmit_min_interval: 50_000_000,
            max_batch: 64,
        };
        let replica = Replica::new(
            rcfg,
            Keyring::new(root),
            EntropySource::seeded(cfg.seed.wrapping_mul(1000).wrapping_add(id)),
            cfg.costs.clone(),
        )?;
        match faults.iter().find(|f| f.target == ReplicaId(id)) {
            Some(spec) => actors.push(SimActor::Faulty(wrap(replica, spec.behavior.clone()))),
            None => actors.push(SimActor::Honest(replica)),
        }
    }

    for c in 0..cfg.clients {
        let client = Client::new(
            ClientConfig {
                id: c + 1,
                quorums,
                payload: vec![0x61u8; cfg.request_bytes.max(1)],
                total_requests: cfg.requests_per_client,
                retransmit_timeout: 1_800_000_000_000,
            },
            Keyring::new(root),
            cfg.costs.clone(),
        );
        actors.push(SimActor::Client(client));
    }

    let sim = Simulation::new(cfg.preset.model(cfg.seed ^ 0x1a7e));
    let target = cfg.clients * cfg.requests_per_client;
    let outcome = sim
        .run(actors, Until::AcceptedReplies(target))
        .map_err(|e| BenchError::Sim(e.to_string()))?;
    if outcome.cap_exhausted {
        return Err(BenchError::Sim(format!(
            "event cap exhausted after {} events ({} replies accepted)",
            outcome.trace.events_dispatched,
            outcome.trace.accepts.len()
        )));
    }
    Ok(outcome.trace)
}

/// Run a fault-injection scenario and check the safety invariants over the
/// resulting trace.
pub fn run_scenario(
    cfg: &BenchConfig,
    faults: &[FaultSpec],
) -> Result<(Trace, InvariantReport), BenchError> {
    let trace = run_workload(cfg, faults)?;
    let faulty: BTreeSet<ReplicaId> = faults.iter().map(|f| f.target).collect();
    let report = check_safety(&trace, &faulty);
    Ok((trace, report))
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub mode: Mode,
    pub f: u64,
    pub k: u32,
    pub key_bits: u32,
    pub clients: u64,
    pub preset: String,
    pub batching: bool,
    pub metrics: Metrics,
}

impl ReportRow {
    pub fn new(cfg: &BenchConfig, metrics: Metrics) -> Self {
        ReportRow {
            mode: cfg.mode,
            f: cfg.f,
            k: cfg.k,
            key_bits: cfg.key_bits,
            clients: cfg.clients,
            preset: cfg.preset.to_string(),
            batching: cfg.batching,
            metrics,
        }
    }
}

pub const CSV_HEADER: &str =
    "mode,f,k,key_bits,clients,preset,batching,mean_us,median_us,p99_us,throughput_rps";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Render metric rows. CSV columns are stable; text is for eyeballs.
pub fn report(rows: &[ReportRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in rows {
                let m = &r.metrics;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{:.1},{:.1},{:.1},{:.2}\n",
                    r.mode,
                    r.f,
                    r.k,
                    r.key_bits,
                    r.clients,
                    r.preset,
                    if r.batching { "on" } else { "off" },
                    m.mean as f64 / 1000.0,
                    m.median as f64 / 1000.0,
                    m.p99 as f64 / 1000.0,
                    m.throughput_rps,
                ));
            }
            out
        }
        ReportFormat::Text => {
            let mut out = String::new();
            for r in rows {
                let m = &r.metrics;
                out.push_str(&format!(
                    "{} f={} k={} bits={} clients={} preset={} batching={}: mean {:.1} us, median {:.1} us, p99 {:.1} us, {:.2} req/s\n",
                    r.mode, r.f, r.k, r.key_bits, r.clients, r.preset,
                    if r.batching { "on" } else { "off" },
                    m.mean as f64 / 1000.0,
                    m.median as f64 / 1000.0,
                    m.p99 as f64 / 1000.0,
                    m.throughput_rps,
                ));
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Measured cost table
// ---------------------------------------------------------------------------

/// Micro-benchmark the local crypto primitives into a fresh cost table.
/// Coin costs are measured for k in {2,3} at 64 and 128 bit keys; larger
/// sizes can be injected from a file instead.
pub fn measure_costs(seed: u64) -> Result<CostTable, BenchError> {
    let keyring = Keyring::new([9u8; 32]);
    let payload = vec![0x61u8; 1024];
    let targets: Vec<ReplicaId> = (1..4).map(ReplicaId).collect();
    let keys = keyring.multicast_keys(PeerId::Replica(ReplicaId(0)), &targets);
    let self_key = keyring.key_between(PeerId::Replica(ReplicaId(0)), PeerId::Replica(ReplicaId(1)));

    let time_ns = |reps: u32, f: &mut dyn FnMut()| -> Nanos {
        let start = Instant::now();
        for _ in 0..reps {
            f();
        }
        (start.elapsed().as_nanos() as u64 / u128::from(reps) as u64).max(1)
    };

    let mut table = CostTable::zero();
    let auth = authenticator_sign(&keys, &payload).expect("targets distinct");
    table.auth_gen = time_ns(200, &mut || {
        let _ = authenticator_sign(&keys, &payload);
    });
    table.auth_verify = time_ns(200, &mut || {
        let _ = authenticator_verify(&self_key, &payload, &auth, ReplicaId(1));
    });
    let mac = mac_sign(&self_key, &payload);
    table.mac_gen = time_ns(200, &mut || {
        let _ = mac_sign(&self_key, &payload);
    });
    table.mac_verify = time_ns(200, &mut || {
        let _ = mac_verify(&self_key, &payload, &mac);
    });

    for k in [2u32, 3] {
        for bits in [64u32, 128] {
            let (gk, shares) = threshold::deal(k, 4, bits, seed ^ u64::from(k * 1000 + bits))?;
            let msg = b"measure:coin";
            let sign = time_ns(20, &mut || {
                let _ = threshold::sign_share(&shares[0], msg);
            });
            let sig_shares: Vec<_> = shares
                .iter()
                .take(k as usize)
                .map(|ks| threshold::sign_share(ks, msg))
                .collect();
            let verify_combine = time_ns(20, &mut || {
                let _ = threshold::combine(&gk, msg, &sig_shares);
            });
            table.coin.insert((k, bits), CoinCost { sign, verify_combine });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_reference_golden_values() {
        let t = CostTable::reference();
        // Exact sums in nanoseconds.
        assert_eq!(min_latency(Mode::Base, None, &t).unwrap(), 5_279_500);
        assert_eq!(min_latency(Mode::Ba, None, &t).unwrap(), 8_115_900);
        assert_eq!(
            min_latency(Mode::Ct, Some((2, 64)), &t).unwrap(),
            12_079_500
        );
        assert_eq!(overhead(Mode::Ba, None, &t).unwrap(), 2_836_400);
        assert_eq!(overhead(Mode::Ct, Some((2, 64)), &t).unwrap(), 6_800_000);
        assert_eq!(overhead(Mode::Base, None, &t).unwrap(), 0);
    }

    #[test]
    fn cost_model_is_linear_in_the_table() {
        let t = CostTable::reference();
        let mut doubled = t.clone();
        doubled.auth_gen *= 2;
        doubled.auth_verify *= 2;
        doubled.mac_gen *= 2;
        doubled.mac_verify *= 2;
        for c in doubled.coin.values_mut() {
            c.sign *= 2;
            c.verify_combine *= 2;
        }
        for mode in [Mode::Base, Mode::Ba, Mode::Ct] {
            assert_eq!(
                min_latency(mode, Some((2, 64)), &doubled).unwrap(),
                2 * min_latency(mode, Some((2, 64)), &t).unwrap()
            );
            assert_eq!(
                overhead(mode, Some((2, 64)), &doubled).unwrap(),
                2 * overhead(mode, Some((2, 64)), &t).unwrap()
            );
        }
        let zero = CostTable::zero();
        assert_eq!(min_latency(Mode::Base, None, &zero).unwrap(), 0);
        assert_eq!(min_latency(Mode::Ba, None, &zero).unwrap(), 0);
    }

    #[test]
    fn missing_coin_entry_is_an_error() {
        let t = CostTable::reference();
        assert!(min_latency(Mode::Ct, Some((3, 2048)), &t).is_err());
    }

    #[test]
    fn percentile_nearest_rank_matches_sort_oracle() {
        // Independent sort-and-index oracle over fixed synthetic samples.
        let mut samples: Vec<Nanos> = (1..=100).map(|i| i * 10).collect();
        samples.sort_unstable();
        assert_eq!(percentile(&samples, 0.99), 990);
        assert_eq!(percentile(&samples, 0.50), 500);
        assert_eq!(percentile(&samples, 1.0), 1000);
        let one = vec![42];
        assert_eq!(percentile(&one, 0.5), 42);
        assert_eq!(percentile(&one, 0.99), 42);
    }

    #[test]
    fn report_header_only_when_empty() {
        let out = report(&[], ReportFormat::Csv);
        assert_eq!(out, format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn report_single_sample() {
        let m = Metrics {
            latencies: vec![5_000_000],
            mean: 5_000_000,
            median: 5_000_000,
            p99: 5_000_000,
            throughput_rps: 10.0,
            delivered: 1,
        };
        let cfg = BenchConfig::default();
        let out = report(&[ReportRow::new(&cfg, m)], ReportFormat::Csv);
        let line = out.lines().nth(1).unwrap();
        assert_eq!(line, "base,1,2,64,1,lan,off,5000.0,5000.0,5000.0,10.00");
    }
}
