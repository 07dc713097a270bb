//! Scratch-trained baseline agents: a DQN access agent and a SAC variant
//! without task conditioning.
//!
//! Both consume the same history-window state encoding as the meta-learner
//! and are sized for comparable decision-network parameter counts. In
//! test-phase comparisons they fill the replay buffer during the warmup and
//! then update every few slots, continuing for the whole run.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Hyperparams;
use crate::diff::{
    init_net, net_forward, AdamConfig, Binding, DiffError, Grads, Mat, NetSpec, ParamStore, Tape,
};
use crate::env::{CoexEnv, TaskSpec, Transition};
use crate::meta::{MetaError, ReplayBuffer, StepMetric};
use crate::sac::{
    act, gradient_step_frozen_z, init_sac, PolicyOutput, SacConfig, SacLosses, TransitionBatch,
};

/// DQN hyperparameters; the epsilon-greedy schedule decays linearly over
/// `eps_decay_steps` action selections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub state_dim: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub lr: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: usize,
    /// Hard target sync period, in updates.
    pub sync_period: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
}

impl DqnConfig {
    pub fn from_hp(hp: &Hyperparams) -> Self {
        DqnConfig {
            state_dim: hp.state_dim(),
            hidden: hp.hidden,
            gamma: hp.gamma,
            lr: hp.learning_rate,
            eps_start: 1.0,
            eps_end: 0.01,
            eps_decay_steps: 500,
            sync_period: 10,
            buffer_capacity: hp.buffer_capacity,
            batch_size: hp.batch_size,
        }
    }

    pub fn q_spec(&self) -> NetSpec {
        NetSpec::mlp(&[self.state_dim, self.hidden, self.hidden, 2])
    }
}

/// Deep Q-network agent over the two access actions.
pub struct DqnAgent {
    pub store: ParamStore,
    pub cfg: DqnConfig,
    pub updates: usize,
    steps_seen: usize,
}

impl DqnAgent {
    pub fn new(cfg: DqnConfig, seed: u64) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        init_net(&mut store, "q", &cfg.q_spec(), seed)?;
        init_net(&mut store, "qt", &cfg.q_spec(), seed)?;
        store.copy_values_from_self("qt/", "q/")?;
        Ok(DqnAgent {
            store,
            cfg,
            updates: 0,
            steps_seen: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        let frac = (self.steps_seen as f64 / self.cfg.eps_decay_steps as f64).min(1.0);
        self.cfg.eps_start + frac * (self.cfg.eps_end - self.cfg.eps_start)
    }

    fn q_values(&self, prefix: &str, states: &Mat) -> Result<Mat, DiffError> {
        let mut tape = Tape::new();
        let x = tape.constant(states.clone());
        let q = net_forward(&mut tape, Binding::Frozen(&self.store), prefix, &self.cfg.q_spec(), x)?;
        Ok(tape.value(q).clone())
    }

    /// Greedy action; ties break toward not transmitting.
    pub fn greedy(&self, state: &[f64]) -> Result<u8, DiffError> {
        let q = self.q_values("q", &crate::diff::row(state))?;
        Ok(u8::from(q[(0, 1)] > q[(0, 0)]))
    }

    /// Epsilon-greedy action; advances the exploration schedule.
    pub fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<u8, DiffError> {
        let eps = self.epsilon();
        self.steps_seen += 1;
        if rng.gen_range(0.0..1.0) < eps {
            Ok(rng.gen_range(0..2u8))
        } else {
            self.greedy(state)
        }
    }

    /// One squared-TD-error update; hard-syncs the target every
    /// `sync_period` updates.
    pub fn update(&mut self, items: &[&Transition]) -> Result<f64, DiffError> {
        let n = items.len();
        let batch = TransitionBatch::from_transitions(items);
        // Bellman targets from the frozen target net.
        let qt = self.q_values("qt", &batch.next_states)?;
        let mut targets = Mat::zeros((n, 1));
        for i in 0..n {
            let best = qt[(i, 0)].max(qt[(i, 1)]);
            targets[(i, 0)] = batch.rewards[(i, 0)] + self.cfg.gamma * best;
        }
        // One-hot action mask selects the predicted Q.
        let mut mask = Mat::zeros((n, 2));
        for (i, t) in items.iter().enumerate() {
            mask[(i, usize::from(t.action))] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch.states.clone());
        let q = net_forward(&mut tape, Binding::Trainable(&self.store), "q", &self.cfg.q_spec(), x)?;
        let m = tape.constant(mask);
        let picked = tape.mul(q, m);
        let q_sel = tape.sum_cols(picked);
        let y = tape.constant(targets);
        let diff = tape.sub(q_sel, y);
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        let mut grads = Grads::zeros(&self.store);
        tape.backward(loss, &mut grads)?;
        self.store.adam_step(&grads, "q/", AdamConfig::with_lr(self.cfg.lr))?;
        self.updates += 1;
        if self.updates % self.cfg.sync_period == 0 {
            self.store.copy_values_from_self("qt/", "q/")?;
        }
        Ok(tape.value(loss)[(0, 0)])
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count("q/")
    }
}

/// SAC agent without a task representation (latent dimension zero).
pub struct ScratchSac {
    pub store: ParamStore,
    pub cfg: SacConfig,
    adam: AdamConfig,
    soft_update_rate: f64,
}

impl ScratchSac {
    pub fn new(hp: &Hyperparams, seed: u64) -> Result<Self, DiffError> {
        let cfg = SacConfig {
            latent_dim: 0,
            ..hp.sac_config()
        };
        let mut store = ParamStore::new();
        init_sac(&mut store, &cfg, seed)?;
        Ok(ScratchSac {
            store,
            cfg,
            adam: hp.adam(),
            soft_update_rate: hp.soft_update_rate,
        })
    }

    pub fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<PolicyOutput, DiffError> {
        act(&self.store, &self.cfg, state, &[], rng, false)
    }

    pub fn update(&mut self, items: &[&Transition], rng: &mut ChaCha8Rng) -> Result<SacLosses, DiffError> {
        let batch = TransitionBatch::from_transitions(items);
        gradient_step_frozen_z(
            &mut self.store,
            &self.cfg,
            self.adam,
            self.soft_update_rate,
            &batch,
            &[],
            rng,
        )
    }
}

/// Which scratch baseline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Dqn,
    ScratchSac,
}

/// A from-scratch training run in one environment: random-ish behavior
/// while the buffer fills during `warmup`, then one update every
/// `update_every` slots through the end of the horizon. Returns per-step
/// metrics.
pub fn run_scratch_baseline(
    kind: BaselineKind,
    task: &TaskSpec,
    hp: &Hyperparams,
    seed: u64,
    horizon: usize,
    warmup: usize,
    update_every: usize,
) -> Result<Vec<StepMetric>, MetaError> {
    let mut env = CoexEnv::new(task, hp.env_params())?;
    env.reset(crate::seeding::derive_seed(seed, "bl-env", &[]))?;
    let mut rng = crate::seeding::derived_rng(seed, "bl", &[]);
    let mut replay = ReplayBuffer::new(hp.buffer_capacity);
    let mut steps = Vec::with_capacity(horizon);
    let mut state = env.state();

    let mut dqn = match kind {
        BaselineKind::Dqn => Some(DqnAgent::new(DqnConfig::from_hp(hp), seed)?),
        BaselineKind::ScratchSac => None,
    };
    let mut sac = match kind {
        BaselineKind::ScratchSac => Some(ScratchSac::new(hp, seed)?),
        BaselineKind::Dqn => None,
    };

    for t in 1..=horizon {
        let action = match kind {
            BaselineKind::Dqn => dqn.as_mut().unwrap().act(&state, &mut rng)?,
            BaselineKind::ScratchSac => sac.as_ref().unwrap().act(&state, &mut rng)?.action,
        };
        let step = env.step(action)?;
        replay.push(Transition {
            state: state.clone(),
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
        });
        let m = env.metrics();
        steps.push(StepMetric {
            t,
            action,
            obs: step.obs.code(),
            reward: step.reward,
            s0: m.s0,
            sn: m.sn,
            sum: m.sum,
            jain: m.jain,
        });
        state = step.next_state;

        if t > warmup && t % update_every == 0 && replay.len() >= hp.batch_size {
            let items = replay.sample(hp.batch_size, &mut rng);
            match kind {
                BaselineKind::Dqn => {
                    dqn.as_mut().unwrap().update(&items)?;
                }
                BaselineKind::ScratchSac => {
                    sac.as_mut().unwrap().update(&items, &mut rng)?;
                }
            }
        }
    }
    Ok(steps)
}

/// Mean sum-throughput of the step records in `[from, to)` (1-based step
/// indices, `to` exclusive).
pub fn window_throughput(steps: &[StepMetric], from: usize, to: usize) -> f64 {
    let hits = steps
        .iter()
        .filter(|s| s.t >= from && s.t < to && s.obs == 1)
        .count();
    hits as f64 / (to - from) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_scenario;
    use crate::seeding::derived_rng;

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            history_len: 4,
            throughput_window: 50,
            hidden: 8,
            latent_dim: 3,
            num_experts: 2,
            buffer_capacity: 300,
            batch_size: 16,
            context_capacity: 12,
            ..Hyperparams::default()
        }
    }

    fn task(s: &str) -> TaskSpec {
        TaskSpec::new(parse_scenario(s).unwrap(), 0.0)
    }

    #[test]
    fn dqn_bellman_target_with_zero_discount_is_reward() {
        let hp = tiny_hp();
        let mut cfg = DqnConfig::from_hp(&hp);
        cfg.gamma = 0.0;
        let mut agent = DqnAgent::new(cfg, 1).unwrap();
        let tr = Transition {
            state: vec![0.0; cfg.state_dim],
            action: 1,
            reward: 0.7,
            next_state: vec![0.0; cfg.state_dim],
        };
        // With gamma = 0 the loss is (Q(s, a) - r)^2; a single long train
        // drives Q(s, 1) to 0.7.
        for _ in 0..600 {
            agent.update(&[&tr]).unwrap();
        }
        let q = agent.q_values("q", &crate::diff::row(&tr.state)).unwrap();
        assert!((q[(0, 1)] - 0.7).abs() < 2e-2, "{}", q[(0, 1)]);
    }

    #[test]
    fn dqn_tie_breaks_toward_silence() {
        let hp = tiny_hp();
        let cfg = DqnConfig::from_hp(&hp);
        let mut agent = DqnAgent::new(cfg, 2).unwrap();
        // Zero net -> equal Q values -> greedy picks action 0.
        for layer in ["l0", "l1", "l2"] {
            for part in ["w", "b"] {
                let name = format!("q/{layer}/{part}");
                let dims = agent.store.value(&name).unwrap().dim();
                agent.store.set_value(&name, Mat::zeros(dims)).unwrap();
            }
        }
        assert_eq!(agent.greedy(&vec![0.2; cfg.state_dim]).unwrap(), 0);
    }

    #[test]
    fn epsilon_schedule_decays_linearly() {
        let hp = tiny_hp();
        let cfg = DqnConfig::from_hp(&hp);
        let mut agent = DqnAgent::new(cfg, 3).unwrap();
        assert_eq!(agent.epsilon(), 1.0);
        let mut rng = derived_rng(4, "e", &[]);
        for _ in 0..cfg.eps_decay_steps {
            agent.act(&vec![0.0; cfg.state_dim], &mut rng).unwrap();
        }
        assert!((agent.epsilon() - cfg.eps_end).abs() < 1e-12);
    }

    #[test]
    fn dqn_parameter_count_is_comparable_to_the_actor() {
        let hp = Hyperparams::default();
        let dqn = DqnConfig::from_hp(&hp);
        let dqn_params = dqn.q_spec().param_count();
        let actor_params = hp.sac_config().decision_param_count();
        let ratio = actor_params as f64 / dqn_params as f64;
        assert!(
            (0.5..=2.0).contains(&ratio),
            "decision-network parity violated: {actor_params} vs {dqn_params}"
        );
    }

    #[test]
    fn dqn_learns_always_transmit_on_sparse_qaloha() {
        // q-ALOHA(0.1): always transmitting achieves 0.9.
        let hp = Hyperparams::default();
        let steps = run_scratch_baseline(
            BaselineKind::Dqn,
            &task("qaloha:0.1"),
            &hp,
            5,
            3000,
            150,
            5,
        )
        .unwrap();
        let thr = window_throughput(&steps, 2000, 3000);
        assert!((thr - 0.9).abs() <= 0.03, "throughput {thr}");
    }

    #[test]
    fn scratch_sac_is_deterministic_given_the_seed() {
        let hp = tiny_hp();
        let a = run_scratch_baseline(BaselineKind::ScratchSac, &task("qaloha:0.3"), &hp, 9, 300, 100, 5)
            .unwrap();
        let b = run_scratch_baseline(BaselineKind::ScratchSac, &task("qaloha:0.3"), &hp, 9, 300, 100, 5)
            .unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.action, y.action);
            assert_eq!(x.obs, y.obs);
            assert_eq!(x.sum, y.sum);
        }
    }

    #[test]
    fn scratch_sac_converges_on_lone_tdma() {
        // TDMA(5): filling the nine free slots approaches throughput 1.
        let hp = Hyperparams::default();
        let steps = run_scratch_baseline(
            BaselineKind::ScratchSac,
            &task("tdma:5"),
            &hp,
            1,
            9000,
            150,
            5,
        )
        .unwrap();
        let thr = window_throughput(&steps, 8000, 9000);
        assert!(thr >= 0.95, "throughput {thr}");
    }
}
