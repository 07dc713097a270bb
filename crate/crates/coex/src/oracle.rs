//! Optimal-throughput benchmarks.
//!
//! Closed forms where the per-slot case analysis is exact:
//!
//! - lone TDMA: the agent fills every free slot, value 1;
//! - lone q-ALOHA: `max(q, 1-q)` — the coin is resolved after the agent
//!   acts, so conditioning on it is not allowed;
//! - TDMA + q-ALOHA: `((1-q) + (F-1) max(q, 1-q)) / F`.
//!
//! Window-ALOHA scenarios get a *genie* value instead: average-reward value
//! iteration over the node's full internal state (counter, backoff stage)
//! assuming the agent observes it before acting. That genie sees exactly
//! when the node will transmit, so the value is an upper bound on what any
//! real policy can achieve, and is flagged as such.

use serde::Serialize;
use thiserror::Error;

use crate::sim::{NodeBank, NodeState, ProtocolSpec};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unsupported scenario for the oracle: {0}")]
    Unsupported(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Analytic,
    GenieValueIteration,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    /// Long-run optimal sum throughput in [0, 1].
    pub value: f64,
    pub kind: OracleKind,
    pub policy_sketch: String,
}

fn scenario_label(scenario: &[ProtocolSpec]) -> String {
    scenario.iter().map(|s| s.label()).collect::<Vec<_>>().join("+")
}

/// Optimal long-run sum throughput for a supported scenario.
pub fn optimal_throughput(scenario: &[ProtocolSpec]) -> Result<OracleResult, OracleError> {
    match scenario {
        [ProtocolSpec::Tdma { .. }] => Ok(OracleResult {
            value: 1.0,
            kind: OracleKind::Analytic,
            policy_sketch: "transmit in every slot except the node's assigned one".into(),
        }),
        [ProtocolSpec::QAloha { q }] => Ok(OracleResult {
            value: q.max(1.0 - q),
            kind: OracleKind::Analytic,
            policy_sketch: if *q > 0.5 {
                "stay silent; the node's own rate dominates".into()
            } else {
                "transmit every slot".into()
            },
        }),
        [ProtocolSpec::Tdma { frame_len, .. }, ProtocolSpec::QAloha { q }]
        | [ProtocolSpec::QAloha { q }, ProtocolSpec::Tdma { frame_len, .. }] => {
            let f = f64::from(*frame_len);
            Ok(OracleResult {
                value: ((1.0 - q) + (f - 1.0) * q.max(1.0 - q)) / f,
                kind: OracleKind::Analytic,
                policy_sketch: "yield in the TDMA slot; elsewhere transmit iff q <= 1/2".into(),
            })
        }
        [ProtocolSpec::FwAloha { w }] => Ok(OracleResult {
            value: genie_value_fw(*w),
            kind: OracleKind::GenieValueIteration,
            policy_sketch: "genie: transmit iff the observed counter is nonzero".into(),
        }),
        [ProtocolSpec::EbAloha { w, b }] => Ok(OracleResult {
            value: genie_value_eb(*w, *b),
            kind: OracleKind::GenieValueIteration,
            policy_sketch: "genie: transmit iff the observed counter is nonzero".into(),
        }),
        other => Err(OracleError::Unsupported(scenario_label(other))),
    }
}

// ---------------------------------------------------------------------------
// Average-reward value iteration
// ---------------------------------------------------------------------------

/// Average-reward value iteration over a finite MDP given by
/// `dynamics(state, action) -> (expected reward, [(next state, prob)])`.
/// Returns the optimal gain; converges when the span seminorm of the Bellman
/// increments drops below `tol`.
///
/// The iteration runs on the aperiodicity-transformed chain
/// `P' = (1-tau) I + tau P` (same stationary distribution, same gain and
/// optimal policy), so periodic dynamics such as TDMA frames still converge.
pub fn average_reward_vi<F>(n_states: usize, n_actions: usize, dynamics: F, tol: f64) -> f64
where
    F: Fn(usize, usize) -> (f64, Vec<(usize, f64)>),
{
    let tau = 0.5;
    let mut h = vec![0.0f64; n_states];
    let mut gain = 0.0;
    for _ in 0..200_000 {
        let mut next = vec![f64::NEG_INFINITY; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let (r, moves) = dynamics(s, a);
                let mut v = r + (1.0 - tau) * h[s];
                for (s2, p) in moves {
                    v += tau * p * h[s2];
                }
                if v > next[s] {
                    next[s] = v;
                }
            }
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..n_states {
            let d = next[s] - h[s];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        gain = 0.5 * (lo + hi);
        // Normalize to keep the bias vector bounded.
        let base = next[0];
        for (hs, ns) in h.iter_mut().zip(&next) {
            *hs = ns - base;
        }
        if hi - lo < tol {
            break;
        }
    }
    gain
}

/// Genie value for a lone FW-ALOHA node: states are counter values, the
/// agent sees them.
fn genie_value_fw(w: u32) -> f64 {
    let w = w as usize;
    average_reward_vi(
        w,
        2,
        |counter, action| {
            let tx = action == 1;
            if counter > 0 {
                // Node silent this slot; counter ticks down.
                (if tx { 1.0 } else { 0.0 }, vec![(counter - 1, 1.0)])
            } else {
                // Node transmits; redraw uniform afterwards.
                let redraw: Vec<(usize, f64)> = (0..w).map(|c| (c, 1.0 / w as f64)).collect();
                (if tx { 0.0 } else { 1.0 }, redraw)
            }
        },
        1e-10,
    )
}

/// Genie value for a lone EB-ALOHA node over (stage, counter) states.
fn genie_value_eb(w: u32, b: u32) -> f64 {
    let w = w as usize;
    let b = b as usize;
    // State indexing: offsets per stage, counter < 2^stage * w.
    let mut offsets = Vec::with_capacity(b + 1);
    let mut total = 0usize;
    for s in 0..=b {
        offsets.push(total);
        total += (1 << s) * w;
    }
    let index = |stage: usize, counter: usize| offsets[stage] + counter;
    let decode = |idx: usize| {
        let stage = (0..=b).rfind(|&s| offsets[s] <= idx).unwrap();
        (stage, idx - offsets[stage])
    };
    average_reward_vi(
        total,
        2,
        |s, action| {
            let (stage, counter) = decode(s);
            let tx = action == 1;
            if counter > 0 {
                (if tx { 1.0 } else { 0.0 }, vec![(index(stage, counter - 1), 1.0)])
            } else if tx {
                // Collision: stage escalates, wider redraw.
                let ns = (stage + 1).min(b);
                let win = (1 << ns) * w;
                (0.0, (0..win).map(|c| (index(ns, c), 1.0 / win as f64)).collect())
            } else {
                // Node succeeds: stage resets.
                (1.0, (0..w).map(|c| (index(0, c), 1.0 / w as f64)).collect())
            }
        },
        1e-10,
    )
}

// ---------------------------------------------------------------------------
// Executable oracle policies (Monte Carlo verification)
// ---------------------------------------------------------------------------

/// The genie decision for the oracle policy sketch, given the nodes' current
/// internal states (as they will be used for the upcoming slot).
pub fn genie_action(scenario: &[ProtocolSpec], states: &[NodeState]) -> Result<bool, OracleError> {
    match (scenario, states) {
        ([ProtocolSpec::Tdma { x, .. }], [NodeState::Frame { pos }]) => Ok(pos != x),
        ([ProtocolSpec::QAloha { q }], [NodeState::Memoryless]) => Ok(*q <= 0.5),
        (
            [ProtocolSpec::Tdma { x, .. }, ProtocolSpec::QAloha { q }],
            [NodeState::Frame { pos }, NodeState::Memoryless],
        ) => Ok(pos != x && *q <= 0.5),
        (
            [ProtocolSpec::QAloha { q }, ProtocolSpec::Tdma { x, .. }],
            [NodeState::Memoryless, NodeState::Frame { pos }],
        ) => Ok(pos != x && *q <= 0.5),
        ([ProtocolSpec::FwAloha { .. }], [NodeState::Window { counter }]) => Ok(*counter > 0),
        ([ProtocolSpec::EbAloha { .. }], [NodeState::Backoff { counter, .. }]) => Ok(*counter > 0),
        (sc, _) => Err(OracleError::Unsupported(scenario_label(sc))),
    }
}

/// Roll the oracle policy for `slots` slots and return the empirical sum
/// throughput.
pub fn rollout_oracle_policy(
    scenario: &[ProtocolSpec],
    slots: usize,
    seed: u64,
) -> Result<f64, OracleError> {
    let mut bank = NodeBank::new(scenario, seed)
        .map_err(|e| OracleError::Unsupported(format!("{e}")))?;
    let mut hits = 0usize;
    for _ in 0..slots {
        let tx = genie_action(scenario, bank.states())?;
        let outcome = bank
            .step(tx)
            .map_err(|e| OracleError::Unsupported(format!("{e}")))?;
        hits += usize::from(outcome.obs == crate::sim::ChannelObs::Success);
    }
    Ok(hits as f64 / slots as f64)
}
