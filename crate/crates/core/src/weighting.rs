//! Online estimation of aggregation weights.
//!
//! Each client keeps three scalars: the number of completed participation
//! intervals, the length of the interval currently open, and its weight.
//! An interval closes when the client participated in the previous round or
//! when its length reaches the cutoff `K`; the weight is the running mean of
//! closed interval lengths, which estimates `1/p_n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMA_BETA: f64 = 0.05;

/// Weighting rule. `K = ∞` is realized as a cutoff one past the horizon so
/// that no interval can be cut within the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    FedauFiniteK { k: u64 },
    FedauInfiniteK,
    FedauEma { k: Option<u64>, beta: f64 },
    ConstantOne,
    KnownProb,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedauFiniteK { .. } => "fedau_finite_k",
            Strategy::FedauInfiniteK => "fedau_infinite_k",
            Strategy::FedauEma { .. } => "fedau_ema",
            Strategy::ConstantOne => "constant_one",
            Strategy::KnownProb => "known_prob",
        }
    }

    pub fn is_fedau(&self) -> bool {
        matches!(
            self,
            Strategy::FedauFiniteK { .. } | Strategy::FedauInfiniteK | Strategy::FedauEma { .. }
        )
    }
}

/// How a closed interval enters the weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    RunningMean,
    Exponential { beta: f64 },
}

/// Per-client estimator state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientWeightState {
    /// Completed (possibly cut-off) intervals.
    pub completed: u64,
    /// Length of the interval being measured, in `[0, K]`.
    pub open: u64,
    pub omega: f64,
}

impl Default for ClientWeightState {
    fn default() -> Self {
        Self {
            completed: 0,
            open: 0,
            omega: 1.0,
        }
    }
}

impl ClientWeightState {
    /// One round of the per-client recursion given the indicator of the
    /// previous round. Returns the interval length if one was closed.
    #[inline]
    pub fn advance(&mut self, participated_prev: bool, cutoff: u64, rule: UpdateRule) -> Option<u64> {
        self.open += 1;
        if !(participated_prev || self.open == cutoff) {
            return None;
        }
        let interval = self.open;
        let s = interval as f64;
        self.omega = if self.completed == 0 {
            s
        } else {
            match rule {
                UpdateRule::RunningMean => {
                    let m = self.completed as f64;
                    (m * self.omega + s) / (m + 1.0)
                }
                UpdateRule::Exponential { beta } => (1.0 - beta) * self.omega + beta * s,
            }
        };
        self.completed += 1;
        self.open = 0;
        Some(interval)
    }
}

/// Weights of all clients for the current round, plus the state that
/// produces the next round's weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEstimator {
    strategy: Strategy,
    cutoff: u64,
    rule: UpdateRule,
    clients: Vec<ClientWeightState>,
    weights: Vec<f64>,
    round: u64,
}

impl WeightEstimator {
    /// Fresh estimator. `horizon` is the number of rounds `T` and only matters
    /// for `FedauInfiniteK` and `FedauEma` without a cutoff; `p` is required by
    /// `KnownProb`.
    pub fn new(strategy: Strategy, clients: usize, horizon: u64, p: Option<&[f64]>) -> Result<Self> {
        let unbounded = horizon.saturating_add(1);
        let (cutoff, rule) = match strategy {
            Strategy::FedauFiniteK { k } => {
                if k == 0 {
                    return Err(Error::config("cutoff K must be a positive integer"));
                }
                (k, UpdateRule::RunningMean)
            }
            Strategy::FedauInfiniteK => (unbounded, UpdateRule::RunningMean),
            Strategy::FedauEma { k, beta } => {
                if !(beta > 0.0 && beta <= 1.0) {
                    return Err(Error::config("EMA coefficient beta must lie in (0, 1]"));
                }
                if k == Some(0) {
                    return Err(Error::config("cutoff K must be a positive integer"));
                }
                (k.unwrap_or(unbounded), UpdateRule::Exponential { beta })
            }
            Strategy::ConstantOne | Strategy::KnownProb => (unbounded, UpdateRule::RunningMean),
        };
        let weights = match strategy {
            Strategy::KnownProb => {
                let p = p.ok_or_else(|| {
                    Error::config("known_prob strategy requires the participation probabilities")
                })?;
                if p.len() != clients {
                    return Err(Error::config(format!("{} probabilities for {clients} clients", p.len())));
                }
                if p.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                    return Err(Error::config("participation probabilities must lie in (0, 1]"));
                }
                p.iter().map(|v| 1.0 / v).collect()
            }
            _ => vec![1.0; clients],
        };
        Ok(Self {
            strategy,
            cutoff,
            rule,
            clients: vec![ClientWeightState::default(); clients],
            weights,
            round: 0,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn cutoff(&self) -> u64 {
        self.cutoff
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn client_states(&self) -> &[ClientWeightState] {
        &self.clients
    }

    /// Weights `ω_t` for the current round.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Moves to round `t + 1` given the indicators of round `t` and returns
    /// the new weights.
    pub fn advance(&mut self, previous: &[bool]) -> Result<&[f64]> {
        if previous.len() != self.clients.len() {
            return Err(Error::contract(format!(
                "indicator vector has length {} but estimator tracks {} clients",
                previous.len(),
                self.clients.len()
            )));
        }
        self.round += 1;
        if self.strategy.is_fedau() {
            for ((state, w), &bit) in self.clients.iter_mut().zip(&mut self.weights).zip(previous) {
                state.advance(bit, self.cutoff, self.rule);
                *w = state.omega;
            }
        }
        Ok(&self.weights)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Cutoff `round(T^{1/9})`, at least 1.
pub fn theoretical_k_schedule(horizon: u64) -> u64 {
    let k = (horizon.max(1) as f64).powf(1.0 / 9.0).round() as u64;
    k.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Strategy;

    fn trace(strategy: Strategy, bits: &[bool], horizon: u64) -> Vec<f64> {
        let mut est = WeightEstimator::new(strategy, 1, horizon, None).unwrap();
        let mut out = vec![est.weights()[0]];
        for &b in bits {
            out.push(est.advance(&[b]).unwrap()[0]);
        }
        out
    }

    #[test]
    fn initial_state() {
        let est = WeightEstimator::new(Strategy::FedauFiniteK { k: 50 }, 4, 100, None).unwrap();
        assert!(est.client_states().iter().all(|s| s.completed == 0 && s.open == 0 && s.omega == 1.0));
        assert_eq!(est.weights(), &[1.0; 4]);
    }

    #[test]
    fn known_prob_and_constant() {
        let mut known = WeightEstimator::new(Strategy::KnownProb, 2, 10, Some(&[0.1, 0.5])).unwrap();
        assert_eq!(known.weights(), &[10.0, 2.0]);
        assert_eq!(known.advance(&[true, false]).unwrap(), &[10.0, 2.0]);
        let mut one = WeightEstimator::new(Strategy::ConstantOne, 2, 10, None).unwrap();
        assert_eq!(one.advance(&[false, true]).unwrap(), &[1.0, 1.0]);
        assert!(matches!(
            WeightEstimator::new(Strategy::KnownProb, 2, 10, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hand_trace_k3() {
        let w = trace(Strategy::FedauFiniteK { k: 3 }, &[false, true, false], 10);
        assert_eq!(w, vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn always_participating_stays_at_one() {
        let w = trace(Strategy::FedauFiniteK { k: 5 }, &[true; 20], 20);
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn never_participating_cuts_off() {
        let w = trace(Strategy::FedauFiniteK { k: 3 }, &[false; 9], 10);
        assert_eq!(w, vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn infinite_k_never_cuts() {
        let w = trace(Strategy::FedauInfiniteK, &[false; 30], 30);
        assert!(w.iter().all(|&x| x == 1.0));
        let est = WeightEstimator::new(Strategy::FedauInfiniteK, 1, 30, None).unwrap();
        assert_eq!(est.cutoff(), 31);
    }

    #[test]
    fn tie_finalizes_once() {
        let mut s = ClientWeightState::default();
        assert_eq!(s.advance(false, 2, UpdateRule::RunningMean), None);
        assert_eq!(s.advance(true, 2, UpdateRule::RunningMean), Some(2));
        assert_eq!(s.completed, 1);
        assert_eq!(s.open, 0);
    }

    #[test]
    fn ema_update() {
        let beta = 0.5;
        // intervals: 2 (first sample, set directly), then 1
        let w = trace(Strategy::FedauEma { k: None, beta }, &[false, true, true], 10);
        assert_eq!(w, vec![1.0, 1.0, 2.0, 1.5]);
        assert!(WeightEstimator::new(Strategy::FedauEma { k: None, beta: 0.0 }, 1, 10, None).is_err());
    }

    #[test]
    fn wrong_length_is_contract_violation() {
        let mut est = WeightEstimator::new(Strategy::FedauFiniteK { k: 3 }, 2, 10, None).unwrap();
        assert!(matches!(est.advance(&[true]), Err(Error::Contract(_))));
    }

    #[test]
    fn k_schedule() {
        assert_eq!(theoretical_k_schedule(1), 1);
        assert_eq!(theoretical_k_schedule(512), 2);
        assert_eq!(theoretical_k_schedule(100_000), 4);
    }

    #[test]
    fn state_json_roundtrip() {
        let mut est = WeightEstimator::new(Strategy::FedauFiniteK { k: 4 }, 3, 10, None).unwrap();
        est.advance(&[true, false, true]).unwrap();
        est.advance(&[false, false, true]).unwrap();
        let back = WeightEstimator::from_json(&est.to_json().unwrap()).unwrap();
        assert_eq!(est, back);
    }

    proptest! {
        #[test]
        fn invariants_hold(bits in proptest::collection::vec(any::<bool>(), 0..300), k in 1u64..20) {
            let mut s = ClientWeightState::default();
            let mut closed = Vec::new();
            for (t, &b) in bits.iter().enumerate() {
                if let Some(len) = s.advance(b, k, UpdateRule::RunningMean) {
                    closed.push(len as f64);
                }
                prop_assert!(s.open <= k);
                prop_assert!(s.omega >= 1.0 && s.omega <= k as f64);
                // at least floor(t/K) intervals after t+1 advances
                prop_assert!(s.completed >= (t as u64 + 1) / k);
                if !closed.is_empty() {
                    let mean = closed.iter().sum::<f64>() / closed.len() as f64;
                    prop_assert!((s.omega - mean).abs() <= 1e-12 * mean);
                }
            }
        }

        #[test]
        fn weights_ignore_future(bits in proptest::collection::vec(any::<bool>(), 1..200), cut in 0usize..200) {
            let cut = cut.min(bits.len());
            let full = trace(Strategy::FedauFiniteK { k: 7 }, &bits, 1000);
            let mut altered = bits.clone();
            for b in altered.iter_mut().skip(cut) {
                *b = !*b;
            }
            let other = trace(Strategy::FedauFiniteK { k: 7 }, &altered, 1000);
            // weight at round t reads indicators < t only
            prop_assert_eq!(&full[..=cut], &other[..=cut]);
        }
    }
}
