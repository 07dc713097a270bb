//! Meta-training, few-shot meta-testing and dynamic-environment runs.
//!
//! Meta-training alternates two phases per episode. In the collection phase
//! the agent visits every training task with a fresh environment and an
//! empty context, re-samples the task representation after each step from
//! the latest collected transitions (prior draw while the context is empty)
//! and stores transitions into that task's replay buffer. In the
//! optimization phase each update call samples, per task, a context batch
//! from the most recent transitions and a uniform transition batch, draws
//! one `z` per task, computes the critic, encoder, actor and temperature
//! losses summed over tasks, applies Adam steps in that order, then Polyak-
//! refreshes the targets. Encoder gradients flow through the critic loss via
//! `z` plus the KL regularizer; the actor consumes `z` as a constant.
//!
//! Meta-testing freezes the encoder, copies actor/critics from the
//! checkpoint, re-initializes the temperature, collects a warmup of
//! `3 N_c` steps while accumulating context, and afterwards performs one
//! frozen-`z` gradient step at each configured fine-tune slot. The dynamic
//! runner hot-swaps the existing-node set at the configured change points,
//! clears the context (stale context describes the wrong task), and grants a
//! bounded update budget after each change.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::collections::VecDeque;
use thiserror::Error;

use crate::config::Hyperparams;
use crate::diff::{Binding, DiffError, Grads, Mat, ParamStore, Tape};
use crate::env::{CoexEnv, EnvError, MetricsSnapshot, TaskSpec, Transition};
use crate::moe::{
    encode_transition, encoder_forward, kl_to_prior_on_tape, posterior_from_factors, prior_sample,
    sample_mixture, sample_mixture_on_tape, transition_context_vec, EncoderConfig, FactorCache,
    MixtureSample,
};
use crate::sac::{
    act, actor_loss_on_tape, alpha, critic_losses_on_tape, critic_targets, gradient_step_frozen_z,
    init_sac, reset_alpha, temperature_loss_grad, PolicyOutput, SacConfig, SacLosses,
    TransitionBatch,
};
use crate::sim::ProtocolSpec;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    Invalid(String),
}

/// FIFO transition store, one per task.
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            items: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample of `n` distinct transitions (requires `len >= n`).
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&Transition> {
        index_sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }

    /// Uniform sample of `n` distinct transitions from the most recent
    /// `window` entries.
    pub fn sample_recent(&self, n: usize, window: usize, rng: &mut ChaCha8Rng) -> Vec<&Transition> {
        let w = window.min(self.items.len());
        let base = self.items.len() - w;
        index_sample(rng, w, n.min(w))
            .into_iter()
            .map(|i| &self.items[base + i])
            .collect()
    }
}

/// The most recent context transitions, stored as cached encoder factors so
/// the posterior updates incrementally during collection.
pub struct ContextBuffer {
    factors: VecDeque<FactorCache>,
    capacity: usize,
}

impl ContextBuffer {
    pub fn new(capacity: usize) -> Self {
        ContextBuffer {
            factors: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, f: FactorCache) {
        if self.factors.len() == self.capacity {
            self.factors.pop_front();
        }
        self.factors.push_back(f);
    }

    pub fn clear(&mut self) {
        self.factors.clear();
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    fn as_slice(&self) -> Vec<FactorCache> {
        self.factors.iter().cloned().collect()
    }
}

/// Collection/optimization counts for one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schedule {
    /// Collection steps per task per episode.
    pub collect_steps: usize,
    pub episodes: usize,
    pub updates_per_episode: usize,
    /// Fine-tune trigger slots during meta-testing.
    pub finetune_steps: Vec<usize>,
    /// Meta-test warmup before fine-tuning becomes eligible.
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn training(hp: &Hyperparams) -> Self {
        Schedule {
            collect_steps: hp.collect_steps_train,
            episodes: hp.episodes,
            updates_per_episode: hp.updates_per_episode,
            finetune_steps: hp.finetune_steps.clone(),
            warmup_steps: hp.warmup_steps(),
        }
    }
}

/// The meta-learning agent: one parameter store holding encoder, actor,
/// twin critics, targets and temperature.
pub struct GmaAgent {
    pub store: ParamStore,
    pub enc_cfg: EncoderConfig,
    pub sac_cfg: SacConfig,
    pub hp: Hyperparams,
}

impl GmaAgent {
    pub fn new(hp: &Hyperparams, seed: u64) -> Result<Self, MetaError> {
        let enc_cfg = hp.encoder_config();
        let sac_cfg = hp.sac_config();
        let mut store = ParamStore::new();
        crate::moe::init_encoder(&mut store, &enc_cfg, crate::seeding::derive_seed(seed, "init-enc", &[]))?;
        init_sac(&mut store, &sac_cfg, crate::seeding::derive_seed(seed, "init-sac", &[]))?;
        Ok(GmaAgent {
            store,
            enc_cfg,
            sac_cfg,
            hp: hp.clone(),
        })
    }

    pub fn from_parts(store: ParamStore, hp: Hyperparams) -> Self {
        GmaAgent {
            enc_cfg: hp.encoder_config(),
            sac_cfg: hp.sac_config(),
            store,
            hp,
        }
    }

    pub fn clone_agent(&self) -> Self {
        GmaAgent {
            store: self.store.clone(),
            enc_cfg: self.enc_cfg.clone(),
            sac_cfg: self.sac_cfg,
            hp: self.hp.clone(),
        }
    }

    /// Draw the task representation from the current context (prior draw
    /// when the context is empty).
    pub fn sample_z(
        &self,
        ctx: &ContextBuffer,
        rng: &mut ChaCha8Rng,
        deterministic: bool,
    ) -> Result<MixtureSample, MetaError> {
        if ctx.is_empty() {
            let z = prior_sample(self.enc_cfg.latent_dim, rng, deterministic);
            return Ok(MixtureSample {
                weights: vec![1.0 / self.enc_cfg.num_experts as f64; self.enc_cfg.num_experts],
                per_expert: vec![z.clone(); self.enc_cfg.num_experts],
                z,
            });
        }
        let post = posterior_from_factors(&ctx.as_slice(), &self.enc_cfg)?;
        Ok(sample_mixture(&post, rng, deterministic))
    }

    pub fn policy(
        &self,
        state: &[f64],
        z: &[f64],
        rng: &mut ChaCha8Rng,
        deterministic: bool,
    ) -> Result<PolicyOutput, MetaError> {
        Ok(act(&self.store, &self.sac_cfg, state, z, rng, deterministic)?)
    }

    /// Stable digest of the encoder parameters (frozen-encoder checks).
    pub fn encoder_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for name in self.store.names_with_prefix("encoder/") {
            let v = self.store.value(name).expect("listed name");
            for &x in v.iter() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Per-step record of a rollout.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepMetric {
    pub t: usize,
    pub action: u8,
    pub obs: u8,
    pub reward: f64,
    pub s0: f64,
    pub sn: f64,
    pub sum: f64,
    pub jain: Option<f64>,
}

fn step_metric(t: usize, action: u8, obs: u8, reward: f64, m: MetricsSnapshot) -> StepMetric {
    StepMetric {
        t,
        action,
        obs,
        reward,
        s0: m.s0,
        sn: m.sn,
        sum: m.sum,
        jain: m.jain,
    }
}

/// Outcome counts of one collection phase.
#[derive(Clone, Copy, Debug, Default)]
pub struct CollectStats {
    pub steps: usize,
    pub successes: usize,
    pub agent_successes: usize,
    pub reward_sum: f64,
}

impl CollectStats {
    pub fn sum_throughput(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.successes as f64 / self.steps as f64
        }
    }
}

/// Run `steps` collection steps in `env`, storing transitions into `replay`
/// and refreshing `ctx` after every step.
pub fn collect_phase(
    agent: &GmaAgent,
    env: &mut CoexEnv,
    replay: &mut ReplayBuffer,
    ctx: &mut ContextBuffer,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CollectStats, MetaError> {
    let mut stats = CollectStats::default();
    let mut state = env.state();
    for _ in 0..steps {
        let z = agent.sample_z(ctx, rng, false)?;
        let out = agent.policy(&state, &z.z, rng, false)?;
        let step = env.step(out.action)?;
        let transition = Transition {
            state: state.clone(),
            action: out.action,
            reward: step.reward,
            next_state: step.next_state.clone(),
        };
        ctx.push(encode_transition(
            &agent.store,
            &agent.enc_cfg,
            &transition_context_vec(&transition),
        )?);
        replay.push(transition);
        stats.steps += 1;
        stats.successes += usize::from(step.agent_success || step.existing_success);
        stats.agent_successes += usize::from(step.agent_success);
        stats.reward_sum += step.reward;
        state = step.next_state;
    }
    Ok(stats)
}

/// Losses of one optimization update call, summed over tasks.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct UpdateLosses {
    pub episode: usize,
    pub update: usize,
    pub critic1: f64,
    pub critic2: f64,
    pub kl: f64,
    pub encoder: f64,
    pub actor: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub tasks_used: usize,
}

/// One optimization phase: `updates_per_episode` update calls over all task
/// buffers. Tasks with fewer than `batch_size` stored transitions are
/// skipped with a warning.
pub fn optimize_phase(
    agent: &mut GmaAgent,
    buffers: &[ReplayBuffer],
    episode: usize,
    updates: usize,
    seed: u64,
    losses_out: &mut Vec<UpdateLosses>,
) -> Result<(), MetaError> {
    let hp = agent.hp.clone();
    let batch_size = hp.batch_size;
    let mut warned: Vec<bool> = vec![false; buffers.len()];

    for u in 0..updates {
        let mut critic_grads = Grads::zeros(&agent.store);
        let mut actor_grads = Grads::zeros(&agent.store);
        let mut alpha_grads = Grads::zeros(&agent.store);
        let mut rec = UpdateLosses {
            episode,
            update: u,
            ..UpdateLosses::default()
        };

        for (k, buffer) in buffers.iter().enumerate() {
            if buffer.len() < batch_size {
                if !warned[k] {
                    eprintln!(
                        "optimize: skipping task {k} (buffer {} < batch {batch_size})",
                        buffer.len()
                    );
                    warned[k] = true;
                }
                continue;
            }
            let mut rng = crate::seeding::derived_rng(seed, "opt", &[episode as u64, u as u64, k as u64]);

            // Context batch from the most recent transitions; transition
            // batch uniform over the whole buffer.
            let ctx_items = buffer.sample_recent(batch_size, hp.context_capacity, &mut rng);
            let ctx_mat = context_matrix(&ctx_items);
            let batch_items = buffer.sample(batch_size, &mut rng);
            let batch = TransitionBatch::from_transitions(&batch_items);

            // Tape A: encoder + critics. One z per task per update; the
            // Bellman target uses the same z, detached.
            let mut tape = Tape::new();
            let ctx_var = tape.constant(ctx_mat);
            let fwd = encoder_forward(&mut tape, Binding::Trainable(&agent.store), &agent.enc_cfg, ctx_var)?;
            let mut eps_z = Mat::zeros((agent.enc_cfg.num_experts, agent.enc_cfg.latent_dim));
            for v in eps_z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let z_var = sample_mixture_on_tape(&mut tape, &fwd, &eps_z)?;
            let z_value: Vec<f64> = tape.value(z_var).iter().copied().collect();

            let targets = critic_targets(&agent.store, &agent.sac_cfg, &batch, &z_value, &mut rng)?;
            let (jq1, jq2) = critic_losses_on_tape(
                &mut tape,
                Binding::Trainable(&agent.store),
                &agent.sac_cfg,
                &batch,
                Some(z_var),
                &targets,
            )?;
            let kl = kl_to_prior_on_tape(&mut tape, &fwd);
            let qsum = tape.add(jq1, jq2);
            let kl_scaled = tape.scale(kl, hp.kl_weight);
            let total = tape.add(qsum, kl_scaled);
            tape.backward(total, &mut critic_grads)?;
            let (c1, c2) = (tape.value(jq1)[(0, 0)], tape.value(jq2)[(0, 0)]);
            let klv = tape.value(kl)[(0, 0)];
            crate::sac::check_finite(c1, "critic1 loss")?;
            crate::sac::check_finite(c2, "critic2 loss")?;
            crate::sac::check_finite(klv, "kl term")?;

            // Tape B: actor with z constant.
            let mut atape = Tape::new();
            let mut eps_a = Mat::zeros((batch.len(), 1));
            for v in eps_a.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let (jpi, mean_logp) = actor_loss_on_tape(
                &mut atape,
                Binding::Trainable(&agent.store),
                &agent.sac_cfg,
                &batch.states,
                &z_value,
                alpha(&agent.store),
                &eps_a,
            )?;
            atape.backward(jpi, &mut actor_grads)?;
            let jpi_v = atape.value(jpi)[(0, 0)];
            crate::sac::check_finite(jpi_v, "actor loss")?;

            // Tape C: temperature against the fresh sample log-probs.
            let mlp = atape.value(mean_logp)[(0, 0)];
            let jtemp =
                temperature_loss_grad(&agent.store, mlp, agent.sac_cfg.target_entropy, &mut alpha_grads)?;

            rec.critic1 += c1;
            rec.critic2 += c2;
            rec.kl += klv;
            rec.encoder += crate::sac::encoder_loss((c1, c2), klv, hp.kl_weight);
            rec.actor += jpi_v;
            rec.temperature += jtemp;
            rec.tasks_used += 1;
        }

        if rec.tasks_used > 0 {
            let adam = hp.adam();
            agent.store.adam_step(&critic_grads, "critic1/", adam)?;
            agent.store.adam_step(&critic_grads, "critic2/", adam)?;
            agent.store.adam_step(&critic_grads, "encoder/", adam)?;
            agent.store.adam_step(&actor_grads, "actor/", adam)?;
            agent.store.adam_step(&alpha_grads, "alpha/", adam)?;
            crate::diff::soft_update(&mut agent.store, "target1/", "critic1/", hp.soft_update_rate)?;
            crate::diff::soft_update(&mut agent.store, "target2/", "critic2/", hp.soft_update_rate)?;
        }
        rec.alpha = alpha(&agent.store);
        losses_out.push(rec);
    }
    Ok(())
}

fn context_matrix(items: &[&Transition]) -> Mat {
    let vecs: Vec<Vec<f64>> = items.iter().map(|t| transition_context_vec(t)).collect();
    crate::diff::rows(&vecs)
}

/// Per-task, per-episode training curve entry.
#[derive(Clone, Debug, Serialize)]
pub struct EpisodeTaskMetric {
    pub episode: usize,
    pub task: String,
    pub sum_throughput: f64,
    pub jain: Option<f64>,
    pub mean_reward: f64,
}

pub struct MetaTrainOutput {
    pub agent: GmaAgent,
    pub curves: Vec<EpisodeTaskMetric>,
    pub losses: Vec<UpdateLosses>,
}

/// Full meta-training: alternate collection over all tasks and joint
/// optimization for the configured number of episodes.
pub fn meta_train(tasks: &[TaskSpec], hp: &Hyperparams, seed: u64) -> Result<MetaTrainOutput, MetaError> {
    if tasks.is_empty() {
        return Err(MetaError::Invalid("empty task set".into()));
    }
    let mut agent = GmaAgent::new(hp, seed)?;
    let mut buffers: Vec<ReplayBuffer> = tasks
        .iter()
        .map(|_| ReplayBuffer::new(hp.buffer_capacity))
        .collect();
    let mut curves = Vec::new();
    let mut losses = Vec::new();

    for ep in 0..hp.episodes {
        for (k, task) in tasks.iter().enumerate() {
            let mut env = CoexEnv::new(task, hp.env_params())?;
            env.reset(crate::seeding::derive_seed(seed, "env", &[ep as u64, k as u64]))?;
            let mut ctx = ContextBuffer::new(hp.context_capacity);
            let mut rng = crate::seeding::derived_rng(seed, "collect", &[ep as u64, k as u64]);
            let stats = collect_phase(&agent, &mut env, &mut buffers[k], &mut ctx, hp.collect_steps_train, &mut rng)?;
            let m = env.metrics();
            curves.push(EpisodeTaskMetric {
                episode: ep,
                task: task.label.clone(),
                sum_throughput: stats.sum_throughput(),
                jain: m.jain,
                mean_reward: stats.reward_sum / stats.steps.max(1) as f64,
            });
        }
        optimize_phase(&mut agent, &buffers, ep, hp.updates_per_episode, seed, &mut losses)?;
    }
    Ok(MetaTrainOutput { agent, curves, losses })
}

pub struct TestRunOutput {
    pub steps: Vec<StepMetric>,
    pub losses: Vec<SacLosses>,
    /// Encoder digest before and after adaptation (must match).
    pub encoder_digest: (u64, u64),
    pub agent: GmaAgent,
}

/// Meta-testing with scheduled fine-tuning (Algorithm: warmup collection
/// with context accumulation, then frozen-encoder updates at the configured
/// slots). An empty `finetune` set gives pure zero-shot evaluation.
pub fn meta_test_finetune(
    task: &TaskSpec,
    checkpoint: &GmaAgent,
    seed: u64,
    finetune: &[usize],
    horizon: usize,
) -> Result<TestRunOutput, MetaError> {
    let mut agent = checkpoint.clone_agent();
    let hp = agent.hp.clone();
    reset_alpha(&mut agent.store, hp.init_alpha)?;
    for prefix in ["actor/", "critic1/", "critic2/", "alpha/"] {
        agent.store.reset_optimizer(prefix);
    }
    let digest_before = agent.encoder_digest();

    let mut env = CoexEnv::new(task, hp.env_params())?;
    env.reset(crate::seeding::derive_seed(seed, "test-env", &[]))?;
    let mut rng = crate::seeding::derived_rng(seed, "test", &[]);
    let mut replay = ReplayBuffer::new(hp.buffer_capacity);
    let mut ctx = ContextBuffer::new(hp.context_capacity);
    let mut steps = Vec::with_capacity(horizon);
    let mut losses = Vec::new();
    let mut state = env.state();

    for t in 1..=horizon {
        let z = agent.sample_z(&ctx, &mut rng, false)?;
        let out = agent.policy(&state, &z.z, &mut rng, false)?;
        let step = env.step(out.action)?;
        let transition = Transition {
            state: state.clone(),
            action: out.action,
            reward: step.reward,
            next_state: step.next_state.clone(),
        };
        ctx.push(encode_transition(
            &agent.store,
            &agent.enc_cfg,
            &transition_context_vec(&transition),
        )?);
        replay.push(transition);
        steps.push(step_metric(t, out.action, step.obs.code(), step.reward, env.metrics()));
        state = step.next_state;

        if finetune.contains(&t) {
            if replay.len() < hp.batch_size {
                eprintln!("fine-tune at t={t} skipped (buffer {} < batch {})", replay.len(), hp.batch_size);
                continue;
            }
            let batch_items = replay.sample(hp.batch_size, &mut rng);
            let batch = TransitionBatch::from_transitions(&batch_items);
            let l = gradient_step_frozen_z(
                &mut agent.store,
                &agent.sac_cfg,
                hp.adam(),
                hp.soft_update_rate,
                &batch,
                &z.z,
                &mut rng,
            )?;
            losses.push(l);
        }
    }
    let digest_after = agent.encoder_digest();
    Ok(TestRunOutput {
        steps,
        losses,
        encoder_digest: (digest_before, digest_after),
        agent,
    })
}

pub struct DynamicOutput {
    pub steps: Vec<StepMetric>,
    pub losses: Vec<SacLosses>,
    pub encoder_digest: (u64, u64),
}

/// Run the change schedule: hot-swap the node set at each change point
/// without resetting agent parameters, clear the context, and perform up to
/// `dynamic_updates_per_change` frozen-encoder updates per segment (one
/// every `dynamic_update_every` slots).
pub fn dynamic_run(
    schedule: &[(usize, Vec<ProtocolSpec>)],
    checkpoint: &GmaAgent,
    seed: u64,
    horizon: usize,
) -> Result<DynamicOutput, MetaError> {
    if schedule.is_empty() || schedule[0].0 != 0 {
        return Err(MetaError::Invalid("schedule must start at slot 0".into()));
    }
    let mut agent = checkpoint.clone_agent();
    let hp = agent.hp.clone();
    reset_alpha(&mut agent.store, hp.init_alpha)?;
    for prefix in ["actor/", "critic1/", "critic2/", "alpha/"] {
        agent.store.reset_optimizer(prefix);
    }
    let digest_before = agent.encoder_digest();

    let task0 = TaskSpec::new(schedule[0].1.clone(), hp.fairness_factor);
    let mut env = CoexEnv::new(&task0, hp.env_params())?;
    env.reset(crate::seeding::derive_seed(seed, "dyn-env", &[]))?;
    let mut rng = crate::seeding::derived_rng(seed, "dyn", &[]);
    let mut replay = ReplayBuffer::new(hp.buffer_capacity);
    let mut ctx = ContextBuffer::new(hp.context_capacity);
    let mut steps = Vec::with_capacity(horizon);
    let mut losses = Vec::new();
    let mut state = env.state();
    let mut next_change = 1usize;
    let mut steps_since_change = 0usize;
    let mut updates_since_change = 0usize;

    for t in 0..horizon {
        if next_change < schedule.len() && t == schedule[next_change].0 {
            env.swap_scenario(&schedule[next_change].1)?;
            ctx.clear();
            steps_since_change = 0;
            updates_since_change = 0;
            next_change += 1;
        }
        let z = agent.sample_z(&ctx, &mut rng, false)?;
        let out = agent.policy(&state, &z.z, &mut rng, false)?;
        let step = env.step(out.action)?;
        let transition = Transition {
            state: state.clone(),
            action: out.action,
            reward: step.reward,
            next_state: step.next_state.clone(),
        };
        ctx.push(encode_transition(
            &agent.store,
            &agent.enc_cfg,
            &transition_context_vec(&transition),
        )?);
        replay.push(transition);
        steps.push(step_metric(t, out.action, step.obs.code(), step.reward, env.metrics()));
        state = step.next_state;
        steps_since_change += 1;

        let due = steps_since_change % hp.dynamic_update_every == 0;
        if due && updates_since_change < hp.dynamic_updates_per_change && replay.len() >= hp.batch_size {
            let batch_items = replay.sample(hp.batch_size, &mut rng);
            let batch = TransitionBatch::from_transitions(&batch_items);
            let l = gradient_step_frozen_z(
                &mut agent.store,
                &agent.sac_cfg,
                hp.adam(),
                hp.soft_update_rate,
                &batch,
                &z.z,
                &mut rng,
            )?;
            losses.push(l);
            updates_since_change += 1;
        }
    }
    Ok(DynamicOutput {
        steps,
        losses,
        encoder_digest: (digest_before, agent.encoder_digest()),
    })
}
