//! Coexistence of a learning transmitter with legacy MAC protocols on a
//! shared, time-slotted channel.
//!
//! The crate is organized around three layers:
//!
//! - **Channel layer**: [`sim`] models slot-level transmission of q-ALOHA,
//!   FW-ALOHA, EB-ALOHA and TDMA nodes plus access-point feedback; [`env`]
//!   wraps a scenario as an MDP with a history-window state, a
//!   throughput/fairness reward, and rolling metrics.
//! - **Learner layer**: [`diff`] is a small reverse-mode autodiff substrate
//!   (dense layers, Adam, Polyak updates); [`moe`] is the mixture-of-experts
//!   probabilistic context encoder; [`sac`] the goal-conditioned soft
//!   actor-critic; [`meta`] orchestrates meta-training, few-shot fine-tuning
//!   and dynamic-environment runs; [`baselines`] provides scratch-trained
//!   DQN/SAC agents and [`oracle`] analytic / genie optimal-throughput
//!   benchmarks.
//! - **Bench layer**: [`config`], [`runner`], [`metrics`] and [`checkpoint`]
//!   implement the experiment front end (presets, CSV/JSONL persistence,
//!   reproducible run records).

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod env;
pub mod meta;
pub mod metrics;
pub mod moe;
pub mod oracle;
pub mod runner;
pub mod sac;
pub mod seeding;
pub mod sim;
