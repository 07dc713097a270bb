//! Slot-level simulation of the shared channel and the legacy MAC protocols.
//!
//! Time is divided into equal slots; every node may start a transmission only
//! at a slot boundary. The access point resolves each slot and broadcasts the
//! outcome: idle, a single successful transmission (ACK), or a collision
//! (NACK). Four legacy protocols are modeled:
//!
//! - **q-ALOHA**: transmit each slot independently with probability `q`.
//! - **FW-ALOHA**: after each transmission draw a counter uniformly from
//!   `[0, W-1]` and wait for it to expire before transmitting again, so
//!   inter-transmission gaps lie in `[1, W]`.
//! - **EB-ALOHA**: FW-ALOHA whose window doubles per own collision up to
//!   `2^b * W` and resets to `W` on success.
//! - **TDMA**: transmit in one assigned slot `X` of every fixed-length frame
//!   (frames have `F` slots, 1-based slot indexing).
//!
//! A node with counter `k` transmits `k` slots after its last
//! transmission-resolution: the counter decrements once per non-transmitting
//! slot and the node transmits when it reads zero. Counter redraws happen at
//! feedback time ([`node_feedback`]), never inside [`node_decide`].
//!
//! Each node owns a dedicated RNG stream derived from the master seed by node
//! index, so editing a scenario never perturbs another node's draws.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derived_rng;

/// Default TDMA frame length in slots.
pub const DEFAULT_FRAME_LEN: u32 = 10;

/// Configuration of one existing node's MAC protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case")]
pub enum ProtocolSpec {
    /// Transmit each slot independently with probability `q`.
    QAloha { q: f64 },
    /// Fixed-window ALOHA with window size `w >= 1`.
    FwAloha { w: u32 },
    /// Exponential-backoff ALOHA with initial window `w` and max stage `b`.
    EbAloha { w: u32, b: u32 },
    /// TDMA with assigned slot `x` in `1..=frame_len`.
    Tdma { x: u32, frame_len: u32 },
}

impl ProtocolSpec {
    pub fn tdma(x: u32) -> Self {
        ProtocolSpec::Tdma {
            x,
            frame_len: DEFAULT_FRAME_LEN,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match *self {
            ProtocolSpec::QAloha { q } => {
                if !(0.0..=1.0).contains(&q) {
                    return Err(SimError::InvalidSpec(format!(
                        "q-ALOHA probability {q} outside [0, 1]"
                    )));
                }
            }
            ProtocolSpec::FwAloha { w } => {
                if w < 1 {
                    return Err(SimError::InvalidSpec("FW-ALOHA window must be >= 1".into()));
                }
            }
            ProtocolSpec::EbAloha { w, .. } => {
                if w < 1 {
                    return Err(SimError::InvalidSpec("EB-ALOHA window must be >= 1".into()));
                }
            }
            ProtocolSpec::Tdma { x, frame_len } => {
                if frame_len < 1 || x < 1 || x > frame_len {
                    return Err(SimError::InvalidSpec(format!(
                        "TDMA slot {x} outside 1..={frame_len}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Short label used in scenario strings and CSV output, e.g. `tdma:5`.
    pub fn label(&self) -> String {
        match *self {
            ProtocolSpec::QAloha { q } => format!("qaloha:{q}"),
            ProtocolSpec::FwAloha { w } => format!("fwaloha:{w}"),
            ProtocolSpec::EbAloha { w, b } => format!("ebaloha:{w}:{b}"),
            ProtocolSpec::Tdma { x, frame_len } => {
                if frame_len == DEFAULT_FRAME_LEN {
                    format!("tdma:{x}")
                } else {
                    format!("tdma:{x}:{frame_len}")
                }
            }
        }
    }
}

/// Per-slot internal state of one existing node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeState {
    /// q-ALOHA is memoryless.
    Memoryless,
    /// FW-ALOHA: slots remaining before the next transmission.
    Window { counter: u32 },
    /// EB-ALOHA: backoff counter plus current stage in `0..=b`.
    Backoff { counter: u32, stage: u32 },
    /// TDMA: current slot index within the frame, in `1..=frame_len`.
    Frame { pos: u32 },
}

/// Channel observation broadcast by the AP after each slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelObs {
    /// No transmission on the channel.
    Idle,
    /// Exactly one node transmitted (ACK).
    Success,
    /// Two or more simultaneous transmissions (NACK).
    Collision,
}

impl ChannelObs {
    /// Numeric code: idle = 0, success = 1, collision = 2.
    pub fn code(self) -> u8 {
        match self {
            ChannelObs::Idle => 0,
            ChannelObs::Success => 1,
            ChannelObs::Collision => 2,
        }
    }
}

/// Resolution of one slot: who transmitted and what the AP broadcast.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotOutcome {
    /// Indices of transmitting nodes (0 = agent, 1.. = existing nodes).
    pub tx_set: Vec<usize>,
    pub obs: ChannelObs,
    /// Transmitting node on success, `None` otherwise.
    pub success_node: Option<usize>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid protocol spec: {0}")]
    InvalidSpec(String),
    #[error("node state does not match protocol variant: {0}")]
    StateMismatch(String),
    #[error("empty decision list")]
    EmptyDecisions,
}

/// Draw the initial state for a node, as if it had just resolved a
/// transmission at t = 0. TDMA frames start at slot position 1.
pub fn initial_state(spec: &ProtocolSpec, rng: &mut ChaCha8Rng) -> NodeState {
    match *spec {
        ProtocolSpec::QAloha { .. } => NodeState::Memoryless,
        ProtocolSpec::FwAloha { w } => NodeState::Window {
            counter: rng.gen_range(0..w),
        },
        ProtocolSpec::EbAloha { w, .. } => NodeState::Backoff {
            counter: rng.gen_range(0..w),
            stage: 0,
        },
        ProtocolSpec::Tdma { .. } => NodeState::Frame { pos: 1 },
    }
}

/// Decide whether the node transmits this slot and stage the state advance
/// (counter decrement / frame advance). Window redraws happen in
/// [`node_feedback`].
pub fn node_decide(
    spec: &ProtocolSpec,
    state: &NodeState,
    rng: &mut ChaCha8Rng,
) -> Result<(bool, NodeState), SimError> {
    match (spec, state) {
        (ProtocolSpec::QAloha { q }, NodeState::Memoryless) => {
            Ok((rng.gen_bool(*q), NodeState::Memoryless))
        }
        (ProtocolSpec::FwAloha { .. }, NodeState::Window { counter }) => {
            if *counter == 0 {
                Ok((true, state.clone()))
            } else {
                Ok((false, NodeState::Window { counter: counter - 1 }))
            }
        }
        (ProtocolSpec::EbAloha { .. }, NodeState::Backoff { counter, stage }) => {
            if *counter == 0 {
                Ok((true, state.clone()))
            } else {
                Ok((
                    false,
                    NodeState::Backoff {
                        counter: counter - 1,
                        stage: *stage,
                    },
                ))
            }
        }
        (ProtocolSpec::Tdma { x, frame_len }, NodeState::Frame { pos }) => {
            let transmit = pos == x;
            let next = if *pos >= *frame_len { 1 } else { pos + 1 };
            Ok((transmit, NodeState::Frame { pos: next }))
        }
        _ => Err(SimError::StateMismatch(format!(
            "{spec:?} with {state:?}"
        ))),
    }
}

/// Apply the resolved slot to the node's state. FW-ALOHA redraws its counter
/// after any own transmission; EB-ALOHA escalates its stage on own collision
/// (capped at `b`) and resets it on own success.
pub fn node_feedback(
    spec: &ProtocolSpec,
    staged: &NodeState,
    transmitted: bool,
    outcome: &SlotOutcome,
    rng: &mut ChaCha8Rng,
) -> Result<NodeState, SimError> {
    match (spec, staged) {
        (ProtocolSpec::QAloha { .. }, NodeState::Memoryless) => Ok(NodeState::Memoryless),
        (ProtocolSpec::FwAloha { w }, NodeState::Window { .. }) => {
            if transmitted {
                Ok(NodeState::Window {
                    counter: rng.gen_range(0..*w),
                })
            } else {
                Ok(staged.clone())
            }
        }
        (ProtocolSpec::EbAloha { w, b }, NodeState::Backoff { stage, .. }) => {
            if transmitted {
                let new_stage = if outcome.obs == ChannelObs::Collision {
                    (*stage + 1).min(*b)
                } else {
                    0
                };
                let window = (1u32 << new_stage) * w;
                Ok(NodeState::Backoff {
                    counter: rng.gen_range(0..window),
                    stage: new_stage,
                })
            } else {
                Ok(staged.clone())
            }
        }
        (ProtocolSpec::Tdma { .. }, NodeState::Frame { .. }) => Ok(staged.clone()),
        _ => Err(SimError::StateMismatch(format!(
            "{spec:?} with {staged:?}"
        ))),
    }
}

/// Resolve one slot from all nodes' decisions (index 0 is the agent node).
/// Mirrors the AP's ACK/NACK broadcast semantics.
pub fn resolve_slot(decisions: &[bool]) -> Result<SlotOutcome, SimError> {
    if decisions.is_empty() {
        return Err(SimError::EmptyDecisions);
    }
    let tx_set: Vec<usize> = decisions
        .iter()
        .enumerate()
        .filter_map(|(i, &tx)| tx.then_some(i))
        .collect();
    let (obs, success_node) = match tx_set.len() {
        0 => (ChannelObs::Idle, None),
        1 => (ChannelObs::Success, Some(tx_set[0])),
        _ => (ChannelObs::Collision, None),
    };
    Ok(SlotOutcome {
        tx_set,
        obs,
        success_node,
    })
}

/// A set of existing nodes stepped jointly, one slot at a time.
///
/// Instances are single-threaded and independently constructible; each node
/// draws from its own stream derived from `(master_seed, "node", index)`.
pub struct NodeBank {
    specs: Vec<ProtocolSpec>,
    states: Vec<NodeState>,
    rngs: Vec<ChaCha8Rng>,
}

impl NodeBank {
    pub fn new(specs: &[ProtocolSpec], master_seed: u64) -> Result<Self, SimError> {
        Self::with_stream_offset(specs, master_seed, 0)
    }

    /// Like [`NodeBank::new`] but derives node streams from
    /// `(master_seed, "node", offset + index)`. Used when a scenario is
    /// hot-swapped mid-run so replacement nodes get fresh streams.
    pub fn with_stream_offset(
        specs: &[ProtocolSpec],
        master_seed: u64,
        offset: u64,
    ) -> Result<Self, SimError> {
        for s in specs {
            s.validate()?;
        }
        let mut rngs: Vec<ChaCha8Rng> = (0..specs.len())
            .map(|i| derived_rng(master_seed, "node", &[offset + 1 + i as u64]))
            .collect();
        let states = specs
            .iter()
            .zip(rngs.iter_mut())
            .map(|(s, r)| initial_state(s, r))
            .collect();
        Ok(NodeBank {
            specs: specs.to_vec(),
            states,
            rngs,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ProtocolSpec] {
        &self.specs
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    /// Decide all nodes for the current slot. Returns per-node transmit flags
    /// and stores the staged states until [`NodeBank::feedback`].
    pub fn decide(&mut self) -> Result<Vec<bool>, SimError> {
        let mut decisions = Vec::with_capacity(self.specs.len());
        for i in 0..self.specs.len() {
            let (tx, staged) = node_decide(&self.specs[i], &self.states[i], &mut self.rngs[i])?;
            self.states[i] = staged;
            decisions.push(tx);
        }
        Ok(decisions)
    }

    /// Apply the resolved slot to every node.
    pub fn feedback(&mut self, decisions: &[bool], outcome: &SlotOutcome) -> Result<(), SimError> {
        for i in 0..self.specs.len() {
            self.states[i] = node_feedback(
                &self.specs[i],
                &self.states[i],
                decisions[i],
                outcome,
                &mut self.rngs[i],
            )?;
        }
        Ok(())
    }

    /// Advance one slot given the agent's decision; resolves and feeds back.
    pub fn step(&mut self, agent_tx: bool) -> Result<SlotOutcome, SimError> {
        let node_decisions = self.decide()?;
        let mut all = Vec::with_capacity(1 + node_decisions.len());
        all.push(agent_tx);
        all.extend_from_slice(&node_decisions);
        let outcome = resolve_slot(&all)?;
        self.feedback(&node_decisions, &outcome)?;
        Ok(outcome)
    }
}

/// Run `slots` slots of the scenario with a fixed agent policy and return the
/// full trace. Reproducible given `(scenario, seed, deterministic policy)`.
pub fn simulate<P>(
    scenario: &[ProtocolSpec],
    mut agent_policy: P,
    slots: usize,
    seed: u64,
) -> Result<Vec<SlotOutcome>, SimError>
where
    P: FnMut(usize) -> bool,
{
    let mut bank = NodeBank::new(scenario, seed)?;
    let mut trace = Vec::with_capacity(slots);
    for t in 0..slots {
        trace.push(bank.step(agent_policy(t))?);
    }
    Ok(trace)
}

/// Fraction of slots carrying exactly one successful transmission.
pub fn sum_throughput(trace: &[SlotOutcome]) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let hits = trace
        .iter()
        .filter(|o| o.obs == ChannelObs::Success)
        .count();
    hits as f64 / trace.len() as f64
}
