//! Goal-conditioned soft actor-critic.
//!
//! The actor maps `[state, z]` through an input layer, a residual block and a
//! two-unit head to the mean and log-std of a Tanh-normal over a continuous
//! action in (-1, 1); the executed action is binary: transmit iff the
//! squashed sample is >= 0. Log-densities carry the squashing correction
//! `ln(1 - tanh^2)`. Twin critics score `[state, action, z]`; targets are
//! separate frozen copies refreshed only by Polyak updates. Evaluation takes
//! the minimum of the two critics.
//!
//! Losses:
//! - critics: mean squared soft Bellman error against the shared target
//!   `y = r + gamma (min_i Qt_i(s', a', z) - alpha log pi(a'|s', z))` with
//!   `a'` freshly sampled from the current actor;
//! - actor: `mean(alpha log pi(a|s,z) - min_i Q_i(s, a, z))` through the
//!   shift-and-scale sample, with `z` held constant;
//! - temperature: `mean(-alpha log pi - alpha Ht)` against the target
//!   entropy `Ht = -1`, differentiated in log alpha so alpha stays positive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{
    init_net, net_forward, row, soft_update, AdamConfig, Binding, DiffError, Grads, Mat, NetSpec,
    ParamStore, Tape, Var,
};
use crate::env::Transition;

pub const LOGSTD_MIN: f64 = -20.0;
pub const LOGSTD_MAX: f64 = 2.0;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Network and loss hyperparameters of the actor-critic stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub state_dim: usize,
    /// Zero disables task conditioning (scratch agent).
    pub latent_dim: usize,
    pub hidden: usize,
    pub gamma: f64,
    /// Target expected entropy, `-dim(action) = -1`.
    pub target_entropy: f64,
    pub init_alpha: f64,
}

impl SacConfig {
    pub fn actor_spec(&self) -> NetSpec {
        NetSpec::residual(self.state_dim + self.latent_dim, self.hidden, 2)
    }

    pub fn critic_spec(&self) -> NetSpec {
        NetSpec::mlp(&[
            self.state_dim + self.latent_dim + 1,
            self.hidden,
            self.hidden,
            1,
        ])
    }

    /// Parameter count of the decision path (actor), for parity checks
    /// against baseline agents.
    pub fn decision_param_count(&self) -> usize {
        self.actor_spec().param_count()
    }
}

/// Register actor, twin critics, their targets (equal to the critics at
/// initialization) and the log-temperature under the standard prefixes.
pub fn init_sac(
    store: &mut ParamStore,
    cfg: &SacConfig,
    master_seed: u64,
) -> Result<(), DiffError> {
    init_net(store, "actor", &cfg.actor_spec(), master_seed)?;
    init_net(store, "critic1", &cfg.critic_spec(), master_seed)?;
    init_net(store, "critic2", &cfg.critic_spec(), master_seed.wrapping_add(1))?;
    init_net(store, "target1", &cfg.critic_spec(), master_seed)?;
    init_net(store, "target2", &cfg.critic_spec(), master_seed.wrapping_add(1))?;
    store.copy_values_from_self("target1/", "critic1/")?;
    store.copy_values_from_self("target2/", "critic2/")?;
    store.register("alpha/log", crate::diff::scalar(cfg.init_alpha.ln()))
}

/// Current temperature.
pub fn alpha(store: &ParamStore) -> f64 {
    store
        .value("alpha/log")
        .map(|v| v[(0, 0)].exp())
        .unwrap_or(1.0)
}

/// Re-initialize the temperature (meta-testing starts from a fresh alpha).
pub fn reset_alpha(store: &mut ParamStore, init_alpha: f64) -> Result<(), DiffError> {
    store.set_value("alpha/log", crate::diff::scalar(init_alpha.ln()))
}

/// A sampled (or deterministic) policy draw on a tape.
pub struct ActorSample {
    /// Squashed continuous action, `n x 1` in (-1, 1).
    pub squashed: Var,
    /// Tanh-normal log-density of the squashed action, `n x 1`.
    pub logp: Var,
    pub mean: Var,
    pub logstd: Var,
}

/// Forward the actor at `input = [state, z]` and draw with the provided
/// standard-normal noise (`n x 1`; zeros give the deterministic mode).
pub fn actor_sample(
    tape: &mut Tape,
    binding: Binding<'_>,
    cfg: &SacConfig,
    input: Var,
    eps: &Mat,
) -> Result<ActorSample, DiffError> {
    let out = net_forward(tape, binding, "actor", &cfg.actor_spec(), input)?;
    let mean = tape.slice_cols(out, 0, 1);
    let logstd_raw = tape.slice_cols(out, 1, 1);
    let logstd = tape.clamp(logstd_raw, LOGSTD_MIN, LOGSTD_MAX);
    let std = tape.exp(logstd);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e);
    let pre = tape.add(mean, noise);
    let squashed = tape.tanh(pre);

    // log N(pre; mean, std) = -eps^2/2 - logstd - ln(2 pi)/2, then subtract
    // the squashing term ln(1 - tanh^2(pre)) = 2 (ln 2 - pre - softplus(-2 pre)).
    let eps_sq = tape.square(e);
    let gauss = tape.scale(eps_sq, -0.5);
    let neg_logstd = tape.neg(logstd);
    let base = tape.add(gauss, neg_logstd);
    let base = tape.add_const(base, -HALF_LN_TWO_PI);
    let m2p = tape.scale(pre, -2.0);
    let sp = tape.softplus(m2p);
    let pre_plus_sp = tape.add(pre, sp);
    let neg_inner = tape.neg(pre_plus_sp);
    let ln2_inner = tape.add_const(neg_inner, std::f64::consts::LN_2);
    let squash_corr = tape.scale(ln2_inner, 2.0);
    let logp = tape.sub(base, squash_corr);

    Ok(ActorSample {
        squashed,
        logp,
        mean,
        logstd,
    })
}

/// One executed policy decision.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    pub mean: f64,
    pub log_std: f64,
    /// Continuous action in (-1, 1).
    pub squashed: f64,
    pub log_prob: f64,
    /// Binary mapping: transmit iff `squashed >= 0`.
    pub action: u8,
}

/// Sample one action for a single state (inference; parameters frozen).
pub fn act(
    store: &ParamStore,
    cfg: &SacConfig,
    state: &[f64],
    z: &[f64],
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> Result<PolicyOutput, DiffError> {
    let mut tape = Tape::new();
    let mut input = Vec::with_capacity(state.len() + z.len());
    input.extend_from_slice(state);
    input.extend_from_slice(z);
    let x = tape.constant(row(&input));
    let eps = if deterministic {
        Mat::zeros((1, 1))
    } else {
        crate::diff::scalar(rng.sample(StandardNormal))
    };
    let sample = actor_sample(&mut tape, Binding::Frozen(store), cfg, x, &eps)?;
    let squashed = tape.value(sample.squashed)[(0, 0)];
    let log_prob = tape.value(sample.logp)[(0, 0)];
    if !squashed.is_finite() || !log_prob.is_finite() {
        return Err(DiffError::NonFinite {
            what: "policy output",
            name: "actor".into(),
        });
    }
    Ok(PolicyOutput {
        mean: tape.value(sample.mean)[(0, 0)],
        log_std: tape.value(sample.logstd)[(0, 0)],
        squashed,
        log_prob,
        action: u8::from(squashed >= 0.0),
    })
}

/// A batch of stored transitions in matrix form. The critic's action input
/// is the centered mapping `2a - 1` of the stored binary action, matching
/// the (-1, 1) range of the continuous relaxation.
pub struct TransitionBatch {
    pub states: Mat,
    pub action_inputs: Mat,
    pub rewards: Mat,
    pub next_states: Mat,
}

impl TransitionBatch {
    pub fn from_transitions(items: &[&Transition]) -> Self {
        let n = items.len();
        let sd = items.first().map_or(0, |t| t.state.len());
        let mut states = Mat::zeros((n, sd));
        let mut next_states = Mat::zeros((n, sd));
        let mut action_inputs = Mat::zeros((n, 1));
        let mut rewards = Mat::zeros((n, 1));
        for (i, t) in items.iter().enumerate() {
            for (j, &v) in t.state.iter().enumerate() {
                states[(i, j)] = v;
            }
            for (j, &v) in t.next_state.iter().enumerate() {
                next_states[(i, j)] = v;
            }
            action_inputs[(i, 0)] = 2.0 * f64::from(t.action) - 1.0;
            rewards[(i, 0)] = t.reward;
        }
        TransitionBatch {
            states,
            action_inputs,
            rewards,
            next_states,
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn broadcast_z(tape: &mut Tape, z: &[f64], n: usize) -> Option<Var> {
    if z.is_empty() {
        return None;
    }
    let zr = tape.constant(row(z));
    Some(tape.broadcast_row(zr, n))
}

fn critic_input(tape: &mut Tape, states: Var, actions: Var, zb: Option<Var>) -> Var {
    match zb {
        Some(z) => tape.concat_cols(&[states, actions, z]),
        None => tape.concat_cols(&[states, actions]),
    }
}

fn actor_input(tape: &mut Tape, states: Var, zb: Option<Var>) -> Var {
    match zb {
        Some(z) => tape.concat_cols(&[states, z]),
        None => states,
    }
}

/// Shared soft Bellman target
/// `y = r + gamma (min_i Qt_i(s', a', z) - alpha log pi(a'|s', z))` with `a'`
/// freshly drawn from the current actor. Entirely detached.
pub fn critic_targets(
    store: &ParamStore,
    cfg: &SacConfig,
    batch: &TransitionBatch,
    z: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Mat, DiffError> {
    let n = batch.len();
    let mut tape = Tape::new();
    let s_next = tape.constant(batch.next_states.clone());
    let zb = broadcast_z(&mut tape, z, n);
    let a_in = actor_input(&mut tape, s_next, zb);
    let mut eps = Mat::zeros((n, 1));
    for v in eps.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let sample = actor_sample(&mut tape, Binding::Frozen(store), cfg, a_in, &eps)?;
    let q_in = critic_input(&mut tape, s_next, sample.squashed, zb);
    let qt1 = net_forward(
        &mut tape,
        Binding::Frozen(store),
        "target1",
        &cfg.critic_spec(),
        q_in,
    )?;
    let qt2 = net_forward(
        &mut tape,
        Binding::Frozen(store),
        "target2",
        &cfg.critic_spec(),
        q_in,
    )?;
    let qmin = tape.min_elem(qt1, qt2);
    let a = alpha(store);
    let logp_scaled = tape.scale(sample.logp, -a);
    let value = tape.add(qmin, logp_scaled);
    let discounted = tape.scale(value, cfg.gamma);
    let r = tape.constant(batch.rewards.clone());
    let y = tape.add(r, discounted);
    let out = tape.value(y).clone();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite {
            what: "target",
            name: "critic_target".into(),
        });
    }
    Ok(out)
}

/// Mean squared Bellman errors of both critics against the shared target.
/// `z_var` may carry encoder gradients; pass a constant for frozen-z updates.
pub fn critic_losses_on_tape(
    tape: &mut Tape,
    binding: Binding<'_>,
    cfg: &SacConfig,
    batch: &TransitionBatch,
    z_var: Option<Var>,
    targets: &Mat,
) -> Result<(Var, Var), DiffError> {
    let n = batch.len();
    let s = tape.constant(batch.states.clone());
    let a = tape.constant(batch.action_inputs.clone());
    let zb = z_var.map(|z| tape.broadcast_row(z, n));
    let q_in = critic_input(tape, s, a, zb);
    let y = tape.constant(targets.clone());
    let mut losses = Vec::with_capacity(2);
    for name in ["critic1", "critic2"] {
        let q = net_forward(tape, binding, name, &cfg.critic_spec(), q_in)?;
        let diff = tape.sub(q, y);
        let sq = tape.square(diff);
        losses.push(tape.mean_all(sq));
    }
    Ok((losses[0], losses[1]))
}

/// Actor loss `mean(alpha log pi - min_i Q_i)` over fresh samples at the
/// batch states; returns the loss and the mean log-probability (for the
/// temperature update). `z` enters as a constant.
pub fn actor_loss_on_tape(
    tape: &mut Tape,
    binding: Binding<'_>,
    cfg: &SacConfig,
    states: &Mat,
    z: &[f64],
    alpha_value: f64,
    eps: &Mat,
) -> Result<(Var, Var), DiffError> {
    let n = states.nrows();
    let s = tape.constant(states.clone());
    let zb = broadcast_z(tape, z, n);
    let a_in = actor_input(tape, s, zb);
    let sample = actor_sample(tape, binding, cfg, a_in, eps)?;
    let q_in = critic_input(tape, s, sample.squashed, zb);
    let q1 = net_forward(tape, binding, "critic1", &cfg.critic_spec(), q_in)?;
    let q2 = net_forward(tape, binding, "critic2", &cfg.critic_spec(), q_in)?;
    let qmin = tape.min_elem(q1, q2);
    let ent = tape.scale(sample.logp, alpha_value);
    let gap = tape.sub(ent, qmin);
    let loss = tape.mean_all(gap);
    let mean_logp = tape.mean_all(sample.logp);
    Ok((loss, mean_logp))
}

/// Temperature loss `-alpha (mean_logp + Ht)`, differentiated in log alpha.
/// Returns the loss value; the gradient is accumulated into `grads`.
pub fn temperature_loss_grad(
    store: &ParamStore,
    mean_logp: f64,
    target_entropy: f64,
    grads: &mut Grads,
) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let log_alpha = tape.param(Binding::Trainable(store), "alpha/log")?;
    let a = tape.exp(log_alpha);
    let coeff = tape.scalar_const(-(mean_logp + target_entropy));
    let loss = tape.mul(a, coeff);
    tape.backward(loss, grads)?;
    Ok(tape.value(loss)[(0, 0)])
}

/// Loss values of one gradient step.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SacLosses {
    pub critic1: f64,
    pub critic2: f64,
    pub kl: f64,
    pub actor: f64,
    pub temperature: f64,
    pub alpha: f64,
}

/// One full frozen-representation gradient step (critics, actor,
/// temperature, in that order, then Polyak target refresh). Used by the
/// meta-testing fine-tuner, the dynamic-environment runner, and the scratch
/// SAC baseline; `z` is empty for unconditioned agents.
pub fn gradient_step_frozen_z(
    store: &mut ParamStore,
    cfg: &SacConfig,
    adam: AdamConfig,
    soft_update_rate: f64,
    batch: &TransitionBatch,
    z: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SacLosses, DiffError> {
    if batch.is_empty() {
        return Err(DiffError::Shape {
            op: "gradient_step",
            details: "empty batch".into(),
        });
    }
    let targets = critic_targets(store, cfg, batch, z, rng)?;

    let mut critic_grads = Grads::zeros(store);
    let mut tape = Tape::new();
    let z_const = if z.is_empty() {
        None
    } else {
        Some(tape.constant(row(z)))
    };
    let (jq1, jq2) = critic_losses_on_tape(
        &mut tape,
        Binding::Trainable(store),
        cfg,
        batch,
        z_const,
        &targets,
    )?;
    let critic_total = tape.add(jq1, jq2);
    tape.backward(critic_total, &mut critic_grads)?;
    let (c1, c2) = (tape.value(jq1)[(0, 0)], tape.value(jq2)[(0, 0)]);
    check_finite(c1, "critic1 loss")?;
    check_finite(c2, "critic2 loss")?;

    let mut actor_grads = Grads::zeros(store);
    let mut atape = Tape::new();
    let mut eps = Mat::zeros((batch.len(), 1));
    for v in eps.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let a_now = alpha(store);
    let (jpi, mean_logp) = actor_loss_on_tape(
        &mut atape,
        Binding::Trainable(store),
        cfg,
        &batch.states,
        z,
        a_now,
        &eps,
    )?;
    atape.backward(jpi, &mut actor_grads)?;
    let actor_loss = atape.value(jpi)[(0, 0)];
    let mlp = atape.value(mean_logp)[(0, 0)];
    check_finite(actor_loss, "actor loss")?;

    let mut alpha_grads = Grads::zeros(store);
    let jtemp = temperature_loss_grad(store, mlp, cfg.target_entropy, &mut alpha_grads)?;
    check_finite(jtemp, "temperature loss")?;

    store.adam_step(&critic_grads, "critic1/", adam)?;
    store.adam_step(&critic_grads, "critic2/", adam)?;
    store.adam_step(&actor_grads, "actor/", adam)?;
    store.adam_step(&alpha_grads, "alpha/", adam)?;
    soft_update(store, "target1/", "critic1/", soft_update_rate)?;
    soft_update(store, "target2/", "critic2/", soft_update_rate)?;

    Ok(SacLosses {
        critic1: c1,
        critic2: c2,
        kl: 0.0,
        actor: actor_loss,
        temperature: jtemp,
        alpha: alpha(store),
    })
}

pub(crate) fn check_finite(v: f64, name: &str) -> Result<(), DiffError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFinite {
            what: "loss",
            name: name.into(),
        })
    }
}

/// Encoder loss assembly `J_en = J_Q1 + J_Q2 + beta * KL`.
pub fn encoder_loss(critic_losses: (f64, f64), kl_term: f64, beta: f64) -> f64 {
    critic_losses.0 + critic_losses.1 + beta * kl_term
}
