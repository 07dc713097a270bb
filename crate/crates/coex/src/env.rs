//! The agent-facing MDP around the channel simulator.
//!
//! The agent's action is binary (transmit or listen); the AP feedback gives a
//! channel observation `o ∈ {0, 1, 2}` (idle / success / collision). The state
//! is the window of the last `L` action-observation pairs, one-hot encoded
//! over the five legal pair categories; the reward trades total throughput
//! against fairness between the agent and the existing nodes via the fairness
//! factor `ν`:
//!
//! ```text
//! r = r_p * (1 - ν * f),   r_p = 1 iff o = success,
//! f = S0/(S0+SN) when the agent transmitted, SN/(S0+SN) otherwise,
//! ```
//!
//! where `S0` and `SN` are the success fractions of the agent and of the
//! existing nodes (collectively) over the last `Z` slots. Throughput windows
//! include the current slot, so the denominator is positive whenever
//! `r_p = 1`; the `f = 1/2` fallback at `S0 + SN = 0` exists only for API
//! totality.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::sim::{ChannelObs, NodeBank, ProtocolSpec, SimError};

/// Default history-window length `L`.
pub const DEFAULT_HISTORY_LEN: usize = 20;
/// Default short-term throughput window `Z`.
pub const DEFAULT_THROUGHPUT_WINDOW: usize = 500;
/// Number of legal action-observation pair categories.
pub const PAIR_CATEGORIES: usize = 5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("illegal action-observation pair (a=1, o=0)")]
    IllegalPair,
    #[error("negative short-term throughput input")]
    NegativeThroughput,
    #[error("Jain index undefined at S0 = SN = 0")]
    JainUndefined,
    #[error("environment must be reset before stepping")]
    NotReset,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One action-observation pair, restricted to the five legal categories
/// (a transmitting agent cannot observe an idle channel).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionObsPair {
    a: u8,
    o: u8,
}

impl ActionObsPair {
    /// Category order fixed as: (0,0), (0,1), (0,2), (1,1), (1,2).
    pub fn new(a: u8, o: u8) -> Result<Self, EnvError> {
        debug_assert!(a <= 1 && o <= 2);
        if a == 1 && o == 0 {
            return Err(EnvError::IllegalPair);
        }
        Ok(ActionObsPair { a, o })
    }

    pub fn action(self) -> u8 {
        self.a
    }

    pub fn obs(self) -> u8 {
        self.o
    }

    pub fn category_index(self) -> usize {
        match (self.a, self.o) {
            (0, 0) => 0,
            (0, 1) => 1,
            (0, 2) => 2,
            (1, 1) => 3,
            (1, 2) => 4,
            _ => unreachable!("constructor rejects (1,0)"),
        }
    }
}

/// Ordered window of the last `L` action-observation pairs, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateWindow {
    pairs: VecDeque<ActionObsPair>,
    len: usize,
}

impl StateWindow {
    /// A reset window: `L` copies of the (listen, idle) pair.
    pub fn reset(len: usize) -> Self {
        let pair = ActionObsPair::new(0, 0).expect("(0,0) is legal");
        StateWindow {
            pairs: std::iter::repeat(pair).take(len).collect(),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drop the oldest pair and append the newest.
    pub fn push(&mut self, pair: ActionObsPair) {
        self.pairs.pop_front();
        self.pairs.push_back(pair);
        debug_assert_eq!(self.pairs.len(), self.len);
    }

    pub fn pairs(&self) -> impl Iterator<Item = ActionObsPair> + '_ {
        self.pairs.iter().copied()
    }

    /// Encoded width: `L` one-hot blocks of width 5.
    pub fn encoded_len(&self) -> usize {
        self.len * PAIR_CATEGORIES
    }

    /// One-hot encode, oldest pair first. Injective on windows.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.encoded_len()];
        for (i, p) in self.pairs.iter().enumerate() {
            v[i * PAIR_CATEGORIES + p.category_index()] = 1.0;
        }
        v
    }
}

/// Ring buffers of per-slot success flags for the agent and for the existing
/// nodes as a collective entity, normalized by the fixed window length `Z`.
#[derive(Clone, Debug)]
pub struct ThroughputWindow {
    agent_hits: VecDeque<bool>,
    existing_hits: VecDeque<bool>,
    window: usize,
    agent_sum: usize,
    existing_sum: usize,
}

impl ThroughputWindow {
    /// Cold start: buffers all zero, divisor always `Z`.
    pub fn new(window: usize) -> Self {
        ThroughputWindow {
            agent_hits: std::iter::repeat(false).take(window).collect(),
            existing_hits: std::iter::repeat(false).take(window).collect(),
            window,
            agent_sum: 0,
            existing_sum: 0,
        }
    }

    pub fn push(&mut self, agent_success: bool, existing_success: bool) {
        self.agent_sum -= usize::from(self.agent_hits.pop_front().unwrap_or(false));
        self.existing_sum -= usize::from(self.existing_hits.pop_front().unwrap_or(false));
        self.agent_hits.push_back(agent_success);
        self.existing_hits.push_back(existing_success);
        self.agent_sum += usize::from(agent_success);
        self.existing_sum += usize::from(existing_success);
    }

    /// Agent short-term throughput `S0`.
    pub fn agent(&self) -> f64 {
        self.agent_sum as f64 / self.window as f64
    }

    /// Existing-nodes short-term throughput `SN`.
    pub fn existing(&self) -> f64 {
        self.existing_sum as f64 / self.window as f64
    }
}

/// One task: a scenario plus the fairness factor used during training on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub scenario: Vec<ProtocolSpec>,
    #[serde(default)]
    pub nu: f64,
    pub label: String,
}

impl TaskSpec {
    pub fn new(scenario: Vec<ProtocolSpec>, nu: f64) -> Self {
        let label = scenario
            .iter()
            .map(|s| s.label())
            .collect::<Vec<_>>()
            .join("+");
        TaskSpec { scenario, nu, label }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.scenario.is_empty() {
            return Err(SimError::InvalidSpec("empty scenario".into()).into());
        }
        if !(0.0..=1.0).contains(&self.nu) {
            return Err(SimError::InvalidSpec(format!("nu {} outside [0, 1]", self.nu)).into());
        }
        for s in &self.scenario {
            s.validate()?;
        }
        Ok(())
    }
}

/// One agent transition with pre-encoded state vectors.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: u8,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Throughput-only reward component: 1 iff the slot carried a success.
pub fn throughput_reward(obs: ChannelObs) -> f64 {
    if obs == ChannelObs::Success {
        1.0
    } else {
        0.0
    }
}

/// Fairness fraction `f`: share of the transmitting side's own throughput in
/// the total. Falls back to 1/2 when both throughputs are zero.
pub fn fairness_fraction(action: u8, s0: f64, sn: f64) -> Result<f64, EnvError> {
    if s0 < 0.0 || sn < 0.0 {
        return Err(EnvError::NegativeThroughput);
    }
    let total = s0 + sn;
    if total == 0.0 {
        return Ok(0.5);
    }
    Ok(if action == 1 { s0 / total } else { sn / total })
}

/// Full reward `r = r_p * (1 - ν f)`.
pub fn reward(action: u8, obs: ChannelObs, s0: f64, sn: f64, nu: f64) -> Result<f64, EnvError> {
    let f = fairness_fraction(action, s0, sn)?;
    Ok(throughput_reward(obs) * (1.0 - nu * f))
}

/// Two-party Jain fairness index `(S0+SN)^2 / (2 (S0^2+SN^2))`, in [1/2, 1].
pub fn jain_index(s0: f64, sn: f64) -> Result<f64, EnvError> {
    if s0 < 0.0 || sn < 0.0 {
        return Err(EnvError::NegativeThroughput);
    }
    let denom = 2.0 * (s0 * s0 + sn * sn);
    if denom == 0.0 {
        return Err(EnvError::JainUndefined);
    }
    Ok((s0 + sn) * (s0 + sn) / denom)
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: ChannelObs,
    pub reward: f64,
    /// Encoded state after the step (the new window).
    pub next_state: Vec<f64>,
    /// Whether this slot carried a success by the agent / by an existing node.
    pub agent_success: bool,
    pub existing_success: bool,
}

/// Rolling metrics snapshot `{S0, SN, S0+SN, Jain}`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricsSnapshot {
    pub s0: f64,
    pub sn: f64,
    pub sum: f64,
    /// `None` while both windows are still empty.
    pub jain: Option<f64>,
}

/// Hyperparameters of the environment encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub history_len: usize,
    pub throughput_window: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            history_len: DEFAULT_HISTORY_LEN,
            throughput_window: DEFAULT_THROUGHPUT_WINDOW,
        }
    }
}

/// The coexistence MDP: a [`NodeBank`] plus agent-side state and metrics.
///
/// Instances are single-threaded, independently seedable and transferable
/// between threads; no state is shared across instances.
pub struct CoexEnv {
    scenario: Vec<ProtocolSpec>,
    nu: f64,
    params: EnvParams,
    bank: Option<NodeBank>,
    window: StateWindow,
    throughput: ThroughputWindow,
    t: usize,
    swap_count: u64,
    seed: u64,
}

impl CoexEnv {
    /// Build an environment for the task; call [`CoexEnv::reset`] before
    /// stepping.
    pub fn new(task: &TaskSpec, params: EnvParams) -> Result<Self, EnvError> {
        task.validate()?;
        Ok(CoexEnv {
            scenario: task.scenario.clone(),
            nu: task.nu,
            params,
            bank: None,
            window: StateWindow::reset(params.history_len),
            throughput: ThroughputWindow::new(params.throughput_window),
            t: 0,
            swap_count: 0,
            seed: 0,
        })
    }

    /// Initialize node states and RNG streams; clears history and metrics.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        self.seed = seed;
        self.swap_count = 0;
        self.bank = Some(NodeBank::new(&self.scenario, seed)?);
        self.window = StateWindow::reset(self.params.history_len);
        self.throughput = ThroughputWindow::new(self.params.throughput_window);
        self.t = 0;
        Ok(self.window.encode())
    }

    /// Replace the existing-node set mid-run without touching agent-side
    /// history or metrics. Replacement nodes draw from fresh streams.
    pub fn swap_scenario(&mut self, scenario: &[ProtocolSpec]) -> Result<(), EnvError> {
        if self.bank.is_none() {
            return Err(EnvError::NotReset);
        }
        self.swap_count += 1;
        self.scenario = scenario.to_vec();
        self.bank = Some(NodeBank::with_stream_offset(
            scenario,
            self.seed,
            self.swap_count * 64,
        )?);
        Ok(())
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn set_nu(&mut self, nu: f64) {
        self.nu = nu;
    }

    pub fn slot(&self) -> usize {
        self.t
    }

    pub fn state(&self) -> Vec<f64> {
        self.window.encode()
    }

    pub fn state_dim(&self) -> usize {
        self.window.encoded_len()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let s0 = self.throughput.agent();
        let sn = self.throughput.existing();
        MetricsSnapshot {
            s0,
            sn,
            sum: s0 + sn,
            jain: jain_index(s0, sn).ok(),
        }
    }

    /// Advance one slot with the agent's action.
    pub fn step(&mut self, action: u8) -> Result<StepResult, EnvError> {
        let bank = self.bank.as_mut().ok_or(EnvError::NotReset)?;
        let outcome = bank.step(action == 1)?;
        let obs = outcome.obs;
        let agent_success = outcome.success_node == Some(0);
        let existing_success = obs == ChannelObs::Success && !agent_success;
        self.throughput.push(agent_success, existing_success);
        let r = reward(
            action,
            obs,
            self.throughput.agent(),
            self.throughput.existing(),
            self.nu,
        )?;
        self.window.push(ActionObsPair::new(action, obs.code())?);
        self.t += 1;
        Ok(StepResult {
            obs,
            reward: r,
            next_state: self.window.encode(),
            agent_success,
            existing_success,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ProtocolSpec;
    use proptest::prelude::*;

    #[test]
    fn throughput_reward_is_success_indicator() {
        assert_eq!(throughput_reward(ChannelObs::Success), 1.0);
        assert_eq!(throughput_reward(ChannelObs::Idle), 0.0);
        assert_eq!(throughput_reward(ChannelObs::Collision), 0.0);
    }

    #[test]
    fn fairness_fraction_cases() {
        assert!((fairness_fraction(1, 0.3, 0.1).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(fairness_fraction(0, 0.2, 0.2).unwrap(), 0.5);
        assert_eq!(fairness_fraction(0, 0.0, 0.0).unwrap(), 0.5);
        assert!(fairness_fraction(1, -0.1, 0.2).is_err());
    }

    #[test]
    fn reward_cases() {
        // Fairness disabled reduces to the throughput indicator.
        assert_eq!(reward(1, ChannelObs::Success, 0.3, 0.1, 0.0).unwrap(), 1.0);
        // At nu = 1 the (1,1) case pays the existing nodes' share.
        assert!((reward(1, ChannelObs::Success, 0.3, 0.1, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((reward(1, ChannelObs::Success, 0.3, 0.1, 0.5).unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn reward_at_nu_one_matches_three_case_form() {
        // Exhaustive small grid against the piecewise form: at nu = 1,
        // (1,1) pays SN/(S0+SN), (0,1) pays S0/(S0+SN), all else 0.
        let grid = [0.0, 0.1, 0.25, 0.4, 0.5];
        for &s0 in &grid {
            for &sn in &grid {
                if s0 + sn == 0.0 {
                    continue;
                }
                for a in [0u8, 1u8] {
                    for obs in [ChannelObs::Idle, ChannelObs::Success, ChannelObs::Collision] {
                        if a == 1 && obs == ChannelObs::Idle {
                            continue;
                        }
                        let got = reward(a, obs, s0, sn, 1.0).unwrap();
                        let expected = match (a, obs) {
                            (1, ChannelObs::Success) => sn / (s0 + sn),
                            (0, ChannelObs::Success) => s0 / (s0 + sn),
                            _ => 0.0,
                        };
                        assert!((got - expected).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn jain_cases() {
        assert_eq!(jain_index(0.25, 0.25).unwrap(), 1.0);
        assert!((jain_index(0.3, 0.1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(jain_index(0.5, 0.0).unwrap(), 0.5);
        assert!(jain_index(0.0, 0.0).is_err());
    }

    #[test]
    fn illegal_pair_is_rejected() {
        assert!(ActionObsPair::new(1, 0).is_err());
        for (a, o) in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2)] {
            assert!(ActionObsPair::new(a, o).is_ok());
        }
    }

    #[test]
    fn encode_state_reset_and_category_order() {
        let mut w = StateWindow::reset(4);
        let v = w.encode();
        assert_eq!(v.len(), 20);
        for block in v.chunks(5) {
            assert_eq!(block, [1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        w.push(ActionObsPair::new(1, 2).unwrap());
        let v = w.encode();
        assert_eq!(&v[15..20], [0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_differs_in_exactly_one_block_per_pair_change() {
        let mut w1 = StateWindow::reset(6);
        let mut w2 = StateWindow::reset(6);
        for _ in 0..6 {
            w1.push(ActionObsPair::new(0, 1).unwrap());
            w2.push(ActionObsPair::new(0, 1).unwrap());
        }
        w2.push(ActionObsPair::new(1, 1).unwrap());
        w1.push(ActionObsPair::new(0, 1).unwrap());
        let (v1, v2) = (w1.encode(), w2.encode());
        let differing_blocks = v1
            .chunks(5)
            .zip(v2.chunks(5))
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(differing_blocks, 1);
    }

    #[test]
    fn env_step_against_tdma() {
        let task = TaskSpec::new(vec![ProtocolSpec::tdma(5)], 0.0);
        let mut env = CoexEnv::new(&task, EnvParams::default()).unwrap();
        env.reset(3).unwrap();
        // Slot 1 (frame position 1): TDMA silent, agent transmits -> success.
        let step = env.step(1).unwrap();
        assert_eq!(step.obs, ChannelObs::Success);
        assert!(step.agent_success);
        let tail = &step.next_state[19 * 5..];
        assert_eq!(tail, [0.0, 0.0, 0.0, 1.0, 0.0]);
        // Advance to frame position 5: forced collision.
        for _ in 2..5 {
            env.step(0).unwrap();
        }
        let step = env.step(1).unwrap();
        assert_eq!(step.obs, ChannelObs::Collision);
        assert_eq!(step.reward, 0.0);
    }

    #[test]
    fn env_step_credits_existing_window() {
        let task = TaskSpec::new(vec![ProtocolSpec::QAloha { q: 1.0 }], 0.0);
        let mut env = CoexEnv::new(&task, EnvParams::default()).unwrap();
        env.reset(4).unwrap();
        let step = env.step(0).unwrap();
        assert_eq!(step.obs, ChannelObs::Success);
        assert!(step.existing_success && !step.agent_success);
        assert_eq!(step.reward, 1.0);
        let m = env.metrics();
        assert_eq!(m.s0, 0.0);
        assert!(m.sn > 0.0);
    }

    #[test]
    fn stepping_before_reset_is_a_usage_error() {
        let task = TaskSpec::new(vec![ProtocolSpec::tdma(1)], 0.0);
        let mut env = CoexEnv::new(&task, EnvParams::default()).unwrap();
        assert!(matches!(env.step(0), Err(EnvError::NotReset)));
    }

    #[test]
    fn throughput_windows_sum_to_success_fraction() {
        let task = TaskSpec::new(vec![ProtocolSpec::QAloha { q: 0.5 }], 0.0);
        let mut env = CoexEnv::new(&task, EnvParams::default()).unwrap();
        env.reset(9).unwrap();
        let z = DEFAULT_THROUGHPUT_WINDOW;
        let mut successes = VecDeque::new();
        for t in 0..1200 {
            let step = env.step(u8::from(t % 3 == 0)).unwrap();
            successes.push_back(step.obs == ChannelObs::Success);
            if successes.len() > z {
                successes.pop_front();
            }
            let expected = successes.iter().filter(|&&s| s).count() as f64 / z as f64;
            let m = env.metrics();
            assert!((m.sum - expected).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn reward_is_bounded_and_zero_without_success(
            a in 0u8..=1,
            o in 0u8..=2,
            s0 in 0.0f64..1.0,
            sn in 0.0f64..1.0,
            nu in 0.0f64..=1.0,
        ) {
            let obs = match o { 0 => ChannelObs::Idle, 1 => ChannelObs::Success, _ => ChannelObs::Collision };
            let r = reward(a, obs, s0, sn, nu).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            if obs != ChannelObs::Success {
                prop_assert_eq!(r, 0.0);
            }
        }

        #[test]
        fn fairness_pressure_is_monotone_in_nu(
            s0 in 0.01f64..1.0,
            sn in 0.0f64..1.0,
            nu1 in 0.0f64..=1.0,
            nu2 in 0.0f64..=1.0,
        ) {
            // Holding o = success, a = 1 and S0 > SN fixed, the reward does
            // not increase with nu.
            prop_assume!(s0 > sn);
            let (lo, hi) = if nu1 <= nu2 { (nu1, nu2) } else { (nu2, nu1) };
            let r_lo = reward(1, ChannelObs::Success, s0, sn, lo).unwrap();
            let r_hi = reward(1, ChannelObs::Success, s0, sn, hi).unwrap();
            prop_assert!(r_hi <= r_lo + 1e-15);
        }

        #[test]
        fn jain_is_symmetric_and_bounded(s0 in 0.0f64..1.0, sn in 0.0f64..1.0) {
            prop_assume!(s0 + sn > 0.0);
            let j = jain_index(s0, sn).unwrap();
            let jt = jain_index(sn, s0).unwrap();
            prop_assert!((j - jt).abs() < 1e-15);
            prop_assert!((0.5..=1.0 + 1e-15).contains(&j));
            if (s0 - sn).abs() < 1e-12 {
                prop_assert!((j - 1.0).abs() < 1e-9);
            }
            if s0 == 0.0 || sn == 0.0 {
                prop_assert!((j - 0.5).abs() < 1e-15);
            }
        }
    }
}
