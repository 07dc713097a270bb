//! Experiment configuration schema, named presets and scenario parsing.
//!
//! Every hyperparameter defaults to the benchmark setup: history length 20,
//! throughput window 500, discount 0.9, KL weight 1, three experts, latent
//! dimension 6, replay capacity 1000, batch and context-batch size 64,
//! context buffer 150, Adam at 0.003, Polyak rate 0.005, 200 collection
//! steps per task per training episode and 50 during testing. Unknown keys
//! in config files are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

use crate::diff::AdamConfig;
use crate::env::{EnvParams, TaskSpec, PAIR_CATEGORIES};
use crate::moe::EncoderConfig;
use crate::sac::SacConfig;
use crate::sim::ProtocolSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// History window length L.
    pub history_len: usize,
    /// Short-term throughput window Z.
    pub throughput_window: usize,
    pub gamma: f64,
    /// KL-divergence weight in the encoder loss.
    pub kl_weight: f64,
    pub num_experts: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub buffer_capacity: usize,
    /// Transition and context batch size.
    pub batch_size: usize,
    /// Context buffer size U.
    pub context_capacity: usize,
    pub learning_rate: f64,
    pub soft_update_rate: f64,
    /// Collection steps per task per meta-training episode.
    pub collect_steps_train: usize,
    /// Collection steps per meta-testing episode.
    pub collect_steps_test: usize,
    pub updates_per_episode: usize,
    pub episodes: usize,
    /// Fairness factor applied to task rewards.
    pub fairness_factor: f64,
    pub init_alpha: f64,
    pub target_entropy: f64,
    /// Meta-test episode length in slots.
    pub test_horizon: usize,
    /// Fine-tuning trigger steps during meta-testing.
    pub finetune_steps: Vec<usize>,
    /// Update cadence in the dynamic-environment runner.
    pub dynamic_update_every: usize,
    /// Update budget after each dynamic scenario change.
    pub dynamic_updates_per_change: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            history_len: 20,
            throughput_window: 500,
            gamma: 0.9,
            kl_weight: 1.0,
            num_experts: 3,
            latent_dim: 6,
            hidden: 64,
            buffer_capacity: 1000,
            batch_size: 64,
            context_capacity: 150,
            learning_rate: 0.003,
            soft_update_rate: 0.005,
            collect_steps_train: 200,
            collect_steps_test: 50,
            updates_per_episode: 250,
            episodes: 60,
            fairness_factor: 0.0,
            init_alpha: 1.0,
            target_entropy: -1.0,
            test_horizon: 1000,
            finetune_steps: vec![200, 250, 300],
            dynamic_update_every: 50,
            dynamic_updates_per_change: 16,
        }
    }
}

impl Hyperparams {
    pub fn state_dim(&self) -> usize {
        self.history_len * PAIR_CATEGORIES
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams {
            history_len: self.history_len,
            throughput_window: self.throughput_window,
        }
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            state_dim: self.state_dim(),
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            gamma: self.gamma,
            target_entropy: self.target_entropy,
            init_alpha: self.init_alpha,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::new(self.state_dim(), self.hidden, self.num_experts, self.latent_dim)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }

    /// Meta-test warmup: collect for `3 N_c` steps before fine-tuning.
    pub fn warmup_steps(&self) -> usize {
        3 * self.collect_steps_test
    }
}

/// Parse one protocol token: `tdma:X[:F]`, `qaloha:Q`, `fwaloha:W`,
/// `ebaloha:W[:B]` (backoff cap defaults to 2).
pub fn parse_protocol(token: &str) -> Result<ProtocolSpec, String> {
    let parts: Vec<&str> = token.trim().split(':').collect();
    let bad = || format!("cannot parse protocol token '{token}'");
    let spec = match parts.as_slice() {
        ["tdma", x] => ProtocolSpec::tdma(x.parse().map_err(|_| bad())?),
        ["tdma", x, f] => ProtocolSpec::Tdma {
            x: x.parse().map_err(|_| bad())?,
            frame_len: f.parse().map_err(|_| bad())?,
        },
        ["qaloha", q] => ProtocolSpec::QAloha {
            q: q.parse().map_err(|_| bad())?,
        },
        ["fwaloha", w] => ProtocolSpec::FwAloha {
            w: w.parse().map_err(|_| bad())?,
        },
        ["ebaloha", w] => ProtocolSpec::EbAloha {
            w: w.parse().map_err(|_| bad())?,
            b: 2,
        },
        ["ebaloha", w, b] => ProtocolSpec::EbAloha {
            w: w.parse().map_err(|_| bad())?,
            b: b.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Parse a scenario string: protocol tokens joined by `+`.
pub fn parse_scenario(s: &str) -> Result<Vec<ProtocolSpec>, String> {
    s.split('+').map(parse_protocol).collect()
}

fn tasks_from(scenarios: &[&str], nu: f64) -> Vec<TaskSpec> {
    scenarios
        .iter()
        .map(|s| TaskSpec::new(parse_scenario(s).expect("preset scenario"), nu))
        .collect()
}

/// Named task-set presets mirroring the benchmark experiments.
pub fn task_preset(name: &str, nu: f64) -> Option<Vec<TaskSpec>> {
    let qaloha_order = ["qaloha:0.1", "qaloha:0.7", "qaloha:0.5", "qaloha:0.3", "qaloha:0.9"];
    let tdma_order = ["tdma:1", "tdma:9", "tdma:5", "tdma:3", "tdma:7"];
    let set = match name {
        "trainset-8" | "diversity-set-4" => tasks_from(
            &[
                "tdma:1", "tdma:5", "tdma:9", "qaloha:0.1", "qaloha:0.7", "fwaloha:3",
                "fwaloha:4", "ebaloha:2",
            ],
            nu,
        ),
        "testset-6" => tasks_from(
            &[
                "tdma:5",
                "qaloha:0.8",
                "fwaloha:2",
                "ebaloha:3",
                "tdma:2+qaloha:0.1",
                "tdma:3+qaloha:0.6",
            ],
            nu,
        ),
        "diversity-set-1" => tasks_from(
            &[
                "tdma:1", "tdma:2", "tdma:3", "tdma:5", "tdma:6", "tdma:7", "tdma:8", "tdma:9",
            ],
            nu,
        ),
        "diversity-set-2" => tasks_from(
            &[
                "tdma:1", "tdma:3", "tdma:5", "tdma:6", "tdma:7", "tdma:9", "qaloha:0.1",
                "qaloha:0.7",
            ],
            nu,
        ),
        "diversity-set-3" => tasks_from(
            &[
                "tdma:1", "tdma:5", "tdma:6", "tdma:7", "tdma:9", "qaloha:0.1", "qaloha:0.7",
                "ebaloha:2",
            ],
            nu,
        ),
        _ => {
            for (prefix, order) in [("qaloha-sweep-", qaloha_order), ("tdma-sweep-", tdma_order)] {
                if let Some(n) = name.strip_prefix(prefix) {
                    let n: usize = n.parse().ok()?;
                    if (1..=order.len()).contains(&n) {
                        return Some(tasks_from(&order[..n], nu));
                    }
                    return None;
                }
            }
            return None;
        }
    };
    Some(set)
}

/// The dynamic-environment change schedule: `(first_slot, scenario)` per
/// segment.
pub fn dynamic_schedule() -> Vec<(usize, Vec<ProtocolSpec>)> {
    vec![
        (0, parse_scenario("tdma:4").unwrap()),
        (2000, parse_scenario("tdma:2+qaloha:0.1").unwrap()),
        (4000, parse_scenario("tdma:3+qaloha:0.2").unwrap()),
        (6000, parse_scenario("fwaloha:2").unwrap()),
    ]
}

/// Stable hash of a resolved configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex::encode(hasher.finalize())
}

// ---------------------------------------------------------------------------
// Per-command configs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub scenario: String,
    /// `never`, `always`, `random`, or `oracle`.
    pub policy: String,
    pub slots: usize,
    pub seed: u64,
    pub history_len: usize,
    pub throughput_window: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            scenario: "tdma:5".into(),
            policy: "never".into(),
            slots: 10_000,
            seed: 1,
            history_len: 20,
            throughput_window: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    /// Named task-set preset; ignored when `tasks` is non-empty.
    pub preset: String,
    /// Explicit scenario strings.
    pub tasks: Vec<String>,
    pub seed: u64,
    pub hp: Hyperparams,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            preset: "trainset-8".into(),
            tasks: Vec::new(),
            seed: 1,
            hp: Hyperparams::default(),
        }
    }
}

impl MetaTrainConfig {
    pub fn resolve_tasks(&self) -> Result<Vec<TaskSpec>, String> {
        if !self.tasks.is_empty() {
            return self
                .tasks
                .iter()
                .map(|s| Ok(TaskSpec::new(parse_scenario(s)?, self.hp.fairness_factor)))
                .collect();
        }
        task_preset(&self.preset, self.hp.fairness_factor)
            .ok_or_else(|| format!("unknown preset '{}'", self.preset))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTestConfig {
    pub checkpoint: PathBuf,
    /// Named preset; ignored when `envs` is non-empty.
    pub preset: String,
    pub envs: Vec<String>,
    /// Number of independent test repetitions per environment.
    pub seeds: u64,
    pub seed: u64,
    /// Skip all fine-tuning updates.
    pub zero_shot: bool,
    /// Run the dynamic change schedule instead of static environments.
    pub dynamic: bool,
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        MetaTestConfig {
            checkpoint: PathBuf::from("checkpoint.bin"),
            preset: "testset-6".into(),
            envs: Vec::new(),
            seeds: 10,
            seed: 1,
            zero_shot: false,
            dynamic: false,
        }
    }
}

impl MetaTestConfig {
    pub fn resolve_tasks(&self, nu: f64) -> Result<Vec<TaskSpec>, String> {
        if !self.envs.is_empty() {
            return self
                .envs
                .iter()
                .map(|s| Ok(TaskSpec::new(parse_scenario(s)?, nu)))
                .collect();
        }
        task_preset(&self.preset, nu).ok_or_else(|| format!("unknown preset '{}'", self.preset))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Scenario strings; falls back to `preset` when empty.
    pub scenarios: Vec<String>,
    pub preset: String,
    /// Monte Carlo verification rollout length (0 disables).
    pub rollout_slots: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            scenarios: Vec::new(),
            preset: "testset-6".into(),
            rollout_slots: 0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportLatentsConfig {
    pub checkpoint: PathBuf,
    pub preset: String,
    pub envs: Vec<String>,
    /// Rollouts per environment; one latent row each.
    pub rollouts: usize,
    /// Slots rolled per rollout before sampling the latent.
    pub rollout_steps: usize,
    pub seed: u64,
}

impl Default for ExportLatentsConfig {
    fn default() -> Self {
        ExportLatentsConfig {
            checkpoint: PathBuf::from("checkpoint.bin"),
            preset: "testset-6".into(),
            envs: Vec::new(),
            rollouts: 100,
            rollout_steps: 150,
            seed: 1,
        }
    }
}
