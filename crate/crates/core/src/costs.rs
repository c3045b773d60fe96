//! Primitive cryptographic operation costs and the per-actor cost meter.
//!
//! The six primitive latencies (MAC / authenticator generation and
//! verification, threshold signing and share verification+combination) drive
//! both the analytic latency model and the simulated clock: when a cost
//! table is attached to an actor, every crypto operation it performs charges
//! the corresponding duration to its simulated CPU.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::Nanos;

/// Threshold coin costs for one `(k, key_bits)` configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoinCost {
    /// One share-signing operation.
    pub sign: Nanos,
    /// Verification and combination of `k` shares, as a single lump.
    pub verify_combine: Nanos,
}

/// The primitive operation latencies feeding the cost model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostTable {
    /// Authenticator generation.
    pub auth_gen: Nanos,
    /// Authenticator verification.
    pub auth_verify: Nanos,
    /// MAC generation.
    pub mac_gen: Nanos,
    /// MAC verification.
    pub mac_verify: Nanos,
    /// Coin costs keyed by `(k, key_bits)`.
    pub coin: BTreeMap<(u32, u32), CoinCost>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("no coin cost entry for k={0}, key_bits={1}")]
    MissingCoinCost(u32, u32),
    #[error("cost table parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn us(x: f64) -> Nanos {
    (x * 1000.0).round() as Nanos
}

impl CostTable {
    /// All-zero table: charging it leaves the simulated clock untouched.
    pub fn zero() -> Self {
        CostTable::default()
    }

    /// The built-in reference table of measured primitive costs
    /// (microseconds for MAC/authenticator, milliseconds for the coin).
    pub fn reference() -> Self {
        let mut coin = BTreeMap::new();
        let ms = |x: f64| us(x * 1000.0);
        for (k, bits, sign_ms, vc_ms) in [
            (2u32, 64u32, 2.2, 4.6),
            (2, 128, 7.1, 12.8),
            (2, 256, 31.7, 58.5),
            (2, 512, 179.1, 338.2),
            (2, 1024, 1191.7, 1381.4),
            (3, 64, 2.2, 5.6),
            (3, 128, 7.1, 18.5),
            (3, 256, 31.7, 80.0),
            (3, 512, 179.1, 449.7),
            (3, 1024, 1191.7, 2292.1),
        ] {
            coin.insert(
                (k, bits),
                CoinCost {
                    sign: ms(sign_ms),
                    verify_combine: ms(vc_ms),
                },
            );
        }
        CostTable {
            auth_gen: us(80.2),
            auth_verify: us(892.0),
            mac_gen: us(24.1),
            mac_verify: us(237.3),
            coin,
        }
    }

    pub fn coin_cost(&self, k: u32, key_bits: u32) -> Result<CoinCost, CostError> {
        self.coin
            .get(&(k, key_bits))
            .copied()
            .ok_or(CostError::MissingCoinCost(k, key_bits))
    }

    /// Parse a cost table file. Lines are `key = value` with values in
    /// microseconds, plus `ct_us = <k> <bits> <sign> <verify+combine>`
    /// entries; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let mut table = CostTable::zero();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| CostError::Parse {
                line,
                reason: "expected key = value".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_us = |v: &str| -> Result<Nanos, CostError> {
                v.parse::<f64>().map(us).map_err(|_| CostError::Parse {
                    line,
                    reason: format!("bad number {v:?}"),
                })
            };
            match key {
                "ag_us" => table.auth_gen = parse_us(value)?,
                "av_us" => table.auth_verify = parse_us(value)?,
                "mg_us" => table.mac_gen = parse_us(value)?,
                "mv_us" => table.mac_verify = parse_us(value)?,
                "ct_us" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 4 {
                        return Err(CostError::Parse {
                            line,
                            reason: "ct_us needs: k bits sign_us verify_us".into(),
                        });
                    }
                    let k: u32 = parts[0].parse().map_err(|_| CostError::Parse {
                        line,
                        reason: "bad k".into(),
                    })?;
                    let bits: u32 = parts[1].parse().map_err(|_| CostError::Parse {
                        line,
                        reason: "bad key_bits".into(),
                    })?;
                    table.coin.insert(
                        (k, bits),
                        CoinCost {
                            sign: parse_us(parts[2])?,
                            verify_combine: parse_us(parts[3])?,
                        },
                    );
                }
                other => {
                    return Err(CostError::Parse {
                        line,
                        reason: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        Ok(table)
    }

    /// Render in the same format `parse` accepts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let us_of = |n: Nanos| n as f64 / 1000.0;
        out.push_str(&format!("ag_us = {}\n", us_of(self.auth_gen)));
        out.push_str(&format!("av_us = {}\n", us_of(self.auth_verify)));
        out.push_str(&format!("mg_us = {}\n", us_of(self.mac_gen)));
        out.push_str(&format!("mv_us = {}\n", us_of(self.mac_verify)));
        for ((k, bits), c) in &self.coin {
            out.push_str(&format!(
                "ct_us = {} {} {} {}\n",
                k,
                bits,
                us_of(c.sign),
                us_of(c.verify_combine)
            ));
        }
        out
    }
}

/// Accumulates simulated CPU time for one actor. With no table attached
/// every charge is free, so correctness paths are identical either way.
#[derive(Debug, Clone, Default)]
pub struct CostMeter {
    table: Option<CostTable>,
    accrued: Nanos,
}

impl CostMeter {
    pub fn disabled() -> Self {
        CostMeter::default()
    }

    pub fn with_table(table: CostTable) -> Self {
        CostMeter {
            table: Some(table),
            accrued: 0,
        }
    }

    pub fn charge_auth_gen(&mut self) {
        if let Some(t) = &self.table {
            self.accrued += t.auth_gen;
        }
    }
    pub fn charge_auth_verify(&mut self) {
        if let Some(t) = &self.table {
            self.accrued += t.auth_verify;
        }
    }
    pub fn charge_mac_gen(&mut self) {
        if let Some(t) = &self.table {
            self.accrued += t.mac_gen;
        }
    }
    pub fn charge_mac_verify(&mut self) {
        if let Some(t) = &self.table {
            self.accrued += t.mac_verify;
        }
    }
    pub fn charge_coin_sign(&mut self, k: u32, key_bits: u32) {
        if let Some(t) = &self.table {
            if let Ok(c) = t.coin_cost(k, key_bits) {
                self.accrued += c.sign;
            }
        }
    }
    pub fn charge_coin_verify_combine(&mut self, k: u32, key_bits: u32) {
        if let Some(t) = &self.table {
            if let Ok(c) = t.coin_cost(k, key_bits) {
                self.accrued += c.verify_combine;
            }
        }
    }

    /// CPU time accrued since the last drain.
    pub fn accrued(&self) -> Nanos {
        self.accrued
    }

    /// Take and reset the accrued time.
    pub fn drain(&mut self) -> Nanos {
        std::mem::take(&mut self.accrued)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_table_values() {
        let t = CostTable::reference();
        assert_eq!(t.auth_gen, 80_200);
        assert_eq!(t.auth_verify, 892_000);
        assert_eq!(t.mac_gen, 24_100);
        assert_eq!(t.mac_verify, 237_300);
        let c = t.coin_cost(2, 64).unwrap();
        assert_eq!(c.sign, 2_200_000);
        assert_eq!(c.verify_combine, 4_600_000);
        let c = t.coin_cost(3, 1024).unwrap();
        assert_eq!(c.verify_combine, 2_292_100_000);
        assert!(t.coin_cost(4, 64).is_err());
    }

    #[test]
    fn parse_render_roundtrip() {
        let t = CostTable::reference();
        let parsed = CostTable::parse(&t.render()).unwrap();
        assert_eq!(parsed, t);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(CostTable::parse("nonsense").is_err());
        assert!(CostTable::parse("zz_us = 5").is_err());
        assert!(CostTable::parse("ag_us = abc").is_err());
        assert!(CostTable::parse("ct_us = 2 64 1").is_err());
    }

    #[test]
    fn meter_accrues_and_drains() {
        let mut m = CostMeter::with_table(CostTable::reference());
        m.charge_auth_gen();
        m.charge_mac_verify();
        assert_eq!(m.accrued(), 80_200 + 237_300);
        assert_eq!(m.drain(), 80_200 + 237_300);
        assert_eq!(m.accrued(), 0);

        let mut free = CostMeter::disabled();
        free.charge_auth_verify();
        assert_eq!(free.drain(), 0);
    }
}
