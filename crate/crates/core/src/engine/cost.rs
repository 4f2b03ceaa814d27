//! Communication accounting: every transmitted parameter costs 4 bytes,
//! regardless of the `f64` compute width.

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::factorized::ReshapeSig;
use crate::nn::LayerSpec;

pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: usize,
    pub clients: usize,
    /// Server-to-client parameters, summed over clients.
    pub s2c_params: u64,
    /// Client-to-server parameters, summed over clients.
    pub c2s_params: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub rounds: Vec<RoundCost>,
    pub cumulative_bytes: u64,
}

impl CostLedger {
    /// Records one round in which each of `clients` received `s2c` and sent
    /// `c2s` parameters.
    pub fn charge(&mut self, round: usize, clients: usize, s2c: u64, c2s: u64) {
        let n = clients as u64;
        let bytes = (s2c + c2s) * BYTES_PER_PARAM * n;
        self.rounds.push(RoundCost {
            round,
            clients,
            s2c_params: s2c * n,
            c2s_params: c2s * n,
            bytes,
        });
        self.cumulative_bytes += bytes;
    }
}

/// Total bytes recorded in the ledger.
pub fn comm_cost(ledger: &CostLedger) -> u64 {
    ledger.rounds.iter().map(|r| r.bytes).sum()
}

/// `(P_s2c + P_c2s) * 4 * K * R` bytes.
pub fn cost_formula(p_s2c: u64, p_c2s: u64, clients: u64, rounds: u64) -> u64 {
    (p_s2c + p_c2s) * BYTES_PER_PARAM * clients * rounds
}

/// Per-client, per-round parameter counts a strategy transmits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub s2c: u64,
    pub c2s: u64,
}

/// Parameter inventory of an architecture, derived from its kernel shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    /// Plain kernel parameters.
    pub plain: u64,
    /// Plain kernel parameters without the classifier.
    pub plain_body: u64,
    /// All `u` entries.
    pub u: u64,
    /// All `v` entries.
    pub v: u64,
    /// All `mu` entries (dense count).
    pub mu: u64,
    /// The second-last layer's `v`.
    pub v_match: u64,
}

impl Inventory {
    pub fn of(layers: &[LayerSpec]) -> Self {
        let sigs: Vec<ReshapeSig> = layers.iter().filter_map(ReshapeSig::for_layer).collect();
        let kernel = |s: &ReshapeSig| s.kernel_shape().iter().product::<usize>() as u64;
        let plain: u64 = sigs.iter().map(kernel).sum();
        let last = sigs.last().map(kernel).unwrap_or(0);
        let v_match = if sigs.len() >= 2 { sigs[sigs.len() - 2].v_len() as u64 } else { 0 };
        Inventory {
            plain,
            plain_body: plain - last,
            u: sigs.iter().map(|s| s.u_len() as u64).sum(),
            v: sigs.iter().map(|s| s.v_len() as u64).sum(),
            mu: sigs.iter().map(|s| (s.u_len() * s.v_len()) as u64).sum(),
            v_match,
        }
    }

    pub fn factorized_full(&self) -> u64 {
        self.u + self.v + self.mu
    }
}

/// Steady-state payload (rounds after the first).
pub fn steady_payload(inv: &Inventory, strategy: Strategy, share_classifier: bool) -> Payload {
    match strategy {
        Strategy::Standalone => Payload { s2c: 0, c2s: 0 },
        Strategy::FedAvg | Strategy::FedProx => {
            let p = if share_classifier { inv.plain } else { inv.plain_body };
            Payload { s2c: p, c2s: p }
        }
        Strategy::FactorizedFl => Payload {
            s2c: inv.u,
            c2s: inv.u + inv.v_match,
        },
        Strategy::FactorizedFlBeta => {
            let p = inv.factorized_full();
            Payload { s2c: p, c2s: p }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::presets::resnet9;

    #[test]
    fn ledger_sums_rounds() {
        let mut l = CostLedger::default();
        l.charge(1, 3, 10, 20);
        l.charge(2, 2, 5, 5);
        assert_eq!(l.rounds[0].bytes, 30 * 4 * 3);
        assert_eq!(comm_cost(&l), 360 + 80);
        assert_eq!(l.cumulative_bytes, comm_cost(&l));
    }

    #[test]
    fn resnet9_inventory() {
        let inv = Inventory::of(&resnet9(10));
        assert_eq!(inv.plain, 2_568_384);
        assert_eq!(inv.plain_body, 2_568_384 - 2560);
        assert_eq!(inv.u, 9 + 25 + 6 * 9 + 256);
        assert_eq!(inv.v_match, 256 * 256);
    }

    #[test]
    fn standalone_costs_nothing() {
        let inv = Inventory::of(&resnet9(10));
        let p = steady_payload(&inv, Strategy::Standalone, true);
        assert_eq!(cost_formula(p.s2c, p.c2s, 20, 50), 0);
    }
}
