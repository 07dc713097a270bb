//! Mixture-of-experts probabilistic context encoder.
//!
//! Each recent transition `c_u = (s, a, r, s')` is flattened to a fixed-width
//! vector and pushed through a shared ReLU trunk. Every expert `m` is a
//! linear head over the trunk feature emitting a diagonal Gaussian factor
//! `N(mu_m(c_u), var_m(c_u))` over the latent task variable; the per-expert
//! posterior is the product of its factors (precisions add, means are
//! precision-weighted). A gating head — a linear map over the concatenation
//! of the trunk feature and the raw transition vector — produces per-item
//! logits that are averaged over the context and passed through a softmax to
//! give mixture weights. The task representation is
//! `z = sum_m g_m z_m` with `z_m` drawn from expert `m`'s posterior by the
//! shift-and-scale construction, so `z` stays differentiable in the encoder
//! parameters.
//!
//! All context reductions (precision sums, weighted-mean sums, logit
//! averages) accumulate in canonical value order, so every output here is
//! bit-identical under any permutation of the context transitions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::{
    canonical_sum, init_net, net_forward, Binding, DiffError, Mat, NetSpec, ParamStore, Tape, Var,
};
use crate::env::Transition;

/// Variance floor applied to every Gaussian factor.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Shapes of the encoder networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Width of one flattened transition vector.
    pub context_dim: usize,
    pub hidden: usize,
    pub num_experts: usize,
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn new(state_dim: usize, hidden: usize, num_experts: usize, latent_dim: usize) -> Self {
        EncoderConfig {
            context_dim: 2 * state_dim + 2,
            hidden,
            num_experts,
            latent_dim,
        }
    }

    fn trunk_spec(&self) -> NetSpec {
        NetSpec::trunk(&[self.context_dim, self.hidden, self.hidden])
    }

    fn expert_spec(&self) -> NetSpec {
        NetSpec::mlp(&[self.hidden, 2 * self.latent_dim])
    }

    fn gate_spec(&self) -> NetSpec {
        NetSpec::mlp(&[self.hidden + self.context_dim, self.num_experts])
    }

    pub fn param_count(&self) -> usize {
        self.trunk_spec().param_count()
            + self.num_experts * self.expert_spec().param_count()
            + self.gate_spec().param_count()
    }
}

/// Register all encoder parameters under `encoder/`.
pub fn init_encoder(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    master_seed: u64,
) -> Result<(), DiffError> {
    init_net(store, "encoder/trunk", &cfg.trunk_spec(), master_seed)?;
    for m in 0..cfg.num_experts {
        init_net(
            store,
            &format!("encoder/expert{m}"),
            &cfg.expert_spec(),
            master_seed,
        )?;
    }
    init_net(store, "encoder/gate", &cfg.gate_spec(), master_seed)
}

/// Flatten a transition to the encoder input layout
/// `[encoded s, a, r, encoded s']`.
pub fn transition_context_vec(t: &Transition) -> Vec<f64> {
    let mut v = Vec::with_capacity(t.state.len() + 2 + t.next_state.len());
    v.extend_from_slice(&t.state);
    v.push(f64::from(t.action));
    v.push(t.reward);
    v.extend_from_slice(&t.next_state);
    v
}

/// Per-expert posterior and gate weights recorded on a tape.
pub struct EncoderForward {
    /// `(mean, variance)` per expert, each `1 x latent_dim`.
    pub posteriors: Vec<(Var, Var)>,
    /// Gate weights, `1 x num_experts`, on the simplex.
    pub gate: Var,
}

/// Run the encoder over a non-empty context batch (`U x context_dim`).
pub fn encoder_forward(
    tape: &mut Tape,
    binding: Binding<'_>,
    cfg: &EncoderConfig,
    context: Var,
) -> Result<EncoderForward, DiffError> {
    let u = tape.value(context).nrows();
    if u == 0 {
        return Err(DiffError::Shape {
            op: "encoder_forward",
            details: "empty context".into(),
        });
    }
    let feat = net_forward(tape, binding, "encoder/trunk", &cfg.trunk_spec(), context)?;

    let mut posteriors = Vec::with_capacity(cfg.num_experts);
    for m in 0..cfg.num_experts {
        let head = net_forward(
            tape,
            binding,
            &format!("encoder/expert{m}"),
            &cfg.expert_spec(),
            feat,
        )?;
        let mu = tape.slice_cols(head, 0, cfg.latent_dim);
        let logv = tape.slice_cols(head, cfg.latent_dim, cfg.latent_dim);
        let raw_var = tape.exp(logv);
        let var = tape.max_const(raw_var, VARIANCE_FLOOR);
        let precision = tape.recip(var);
        let lambda = tape.sum_rows_canonical(precision);
        let weighted = tape.mul(precision, mu);
        let weighted_sum = tape.sum_rows_canonical(weighted);
        let post_mean = tape.div(weighted_sum, lambda);
        let post_var = tape.recip(lambda);
        posteriors.push((post_mean, post_var));
    }

    let gate_in = tape.concat_cols(&[feat, context]);
    let logits = net_forward(tape, binding, "encoder/gate", &cfg.gate_spec(), gate_in)?;
    let logit_sum = tape.sum_rows_canonical(logits);
    let logit_mean = tape.scale(logit_sum, 1.0 / u as f64);
    let gate = tape.softmax_rows(logit_mean);

    Ok(EncoderForward { posteriors, gate })
}

/// Mixture sample `z = sum_m g_m (mean_m + sqrt(var_m) ⊙ eps_m)` on the tape.
/// `eps` is one standard-normal row per expert (all zeros for deterministic
/// evaluation).
pub fn sample_mixture_on_tape(
    tape: &mut Tape,
    fwd: &EncoderForward,
    eps: &Mat,
) -> Result<Var, DiffError> {
    let m = fwd.posteriors.len();
    if eps.nrows() != m {
        return Err(DiffError::Shape {
            op: "sample_mixture",
            details: format!("{} noise rows for {m} experts", eps.nrows()),
        });
    }
    let mut samples = Vec::with_capacity(m);
    for (i, (mean, var)) in fwd.posteriors.iter().enumerate() {
        let std = tape.sqrt(*var);
        let e = tape.constant(eps.row(i).insert_axis(ndarray::Axis(0)).to_owned());
        let scaled = tape.mul(std, e);
        samples.push(tape.add(*mean, scaled));
    }
    let stacked = tape.concat_rows(&samples);
    Ok(tape.matmul(fwd.gate, stacked))
}

/// `sum_m KL(N(mean_m, var_m) || N(0, I))` on the tape, using the diagonal
/// closed form `0.5 * sum_d (mu^2 + var - ln var - 1)`.
pub fn kl_to_prior_on_tape(tape: &mut Tape, fwd: &EncoderForward) -> Var {
    let mut total: Option<Var> = None;
    for (mean, var) in &fwd.posteriors {
        let mu2 = tape.square(*mean);
        let lnv = tape.ln(*var);
        let a = tape.add(mu2, *var);
        let b = tape.sub(a, lnv);
        let c = tape.add_const(b, -1.0);
        let s = tape.sum_all(c);
        let half = tape.scale(s, 0.5);
        total = Some(match total {
            Some(t) => tape.add(t, half),
            None => half,
        });
    }
    total.expect("at least one expert")
}

// ---------------------------------------------------------------------------
// Inference path (no gradients): cached factors and posterior sampling
// ---------------------------------------------------------------------------

/// Gaussian factor parameters of one transition under every expert, plus its
/// gating logits. Cached so context posteriors update incrementally during
/// data collection.
#[derive(Clone, Debug)]
pub struct FactorCache {
    /// Per expert: `(mean, variance)` of this transition's factor.
    pub factors: Vec<(Vec<f64>, Vec<f64>)>,
    pub gate_logits: Vec<f64>,
}

/// Encode one transition with frozen parameters.
pub fn encode_transition(
    store: &ParamStore,
    cfg: &EncoderConfig,
    context_vec: &[f64],
) -> Result<FactorCache, DiffError> {
    let mut tape = Tape::new();
    let x = tape.constant(crate::diff::row(context_vec));
    let feat = net_forward(
        &mut tape,
        Binding::Frozen(store),
        "encoder/trunk",
        &cfg.trunk_spec(),
        x,
    )?;
    let mut factors = Vec::with_capacity(cfg.num_experts);
    for m in 0..cfg.num_experts {
        let head = net_forward(
            &mut tape,
            Binding::Frozen(store),
            &format!("encoder/expert{m}"),
            &cfg.expert_spec(),
            feat,
        )?;
        let hv = tape.value(head);
        let mean: Vec<f64> = (0..cfg.latent_dim).map(|d| hv[(0, d)]).collect();
        let var: Vec<f64> = (0..cfg.latent_dim)
            .map(|d| hv[(0, cfg.latent_dim + d)].exp().max(VARIANCE_FLOOR))
            .collect();
        factors.push((mean, var));
    }
    let gate_in = tape.concat_cols(&[feat, x]);
    let gate_out = net_forward(
        &mut tape,
        Binding::Frozen(store),
        "encoder/gate",
        &cfg.gate_spec(),
        gate_in,
    )?;
    let gv = tape.value(gate_out);
    let gate_logits = (0..cfg.num_experts).map(|m| gv[(0, m)]).collect();
    Ok(FactorCache { factors, gate_logits })
}

/// Product-of-Gaussians posterior per expert plus softmax gate weights for a
/// set of cached factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPosterior {
    /// Per expert: posterior mean and variance, `latent_dim` each.
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    pub gate: Vec<f64>,
}

impl ContextPosterior {
    /// The unit-Gaussian prior with uniform gating (used before any context
    /// has been observed).
    pub fn prior(num_experts: usize, latent_dim: usize) -> Self {
        ContextPosterior {
            means: vec![vec![0.0; latent_dim]; num_experts],
            vars: vec![vec![1.0; latent_dim]; num_experts],
            gate: vec![1.0 / num_experts as f64; num_experts],
        }
    }
}

/// Combine cached factors: precisions add, means are precision-weighted,
/// gate logits are averaged then softmaxed. Empty input is a usage error.
pub fn posterior_from_factors(
    items: &[FactorCache],
    cfg: &EncoderConfig,
) -> Result<ContextPosterior, DiffError> {
    if items.is_empty() {
        return Err(DiffError::Shape {
            op: "posterior_from_factors",
            details: "empty context".into(),
        });
    }
    let mut means = Vec::with_capacity(cfg.num_experts);
    let mut vars = Vec::with_capacity(cfg.num_experts);
    let mut scratch: Vec<f64> = Vec::with_capacity(items.len());
    for m in 0..cfg.num_experts {
        let mut mean = vec![0.0; cfg.latent_dim];
        let mut var = vec![0.0; cfg.latent_dim];
        for d in 0..cfg.latent_dim {
            scratch.clear();
            scratch.extend(items.iter().map(|f| 1.0 / f.factors[m].1[d]));
            let lambda = canonical_sum(&mut scratch);
            scratch.clear();
            scratch.extend(items.iter().map(|f| f.factors[m].0[d] / f.factors[m].1[d]));
            let weighted = canonical_sum(&mut scratch);
            if !lambda.is_finite() || !weighted.is_finite() {
                return Err(DiffError::NonFinite {
                    what: "factor",
                    name: format!("expert{m}[{d}]"),
                });
            }
            mean[d] = weighted / lambda;
            var[d] = 1.0 / lambda;
        }
        means.push(mean);
        vars.push(var);
    }
    let mut gate = vec![0.0; cfg.num_experts];
    for (m, g) in gate.iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(items.iter().map(|f| f.gate_logits[m]));
        *g = canonical_sum(&mut scratch) / items.len() as f64;
    }
    softmax_in_place(&mut gate);
    Ok(ContextPosterior { means, vars, gate })
}

fn softmax_in_place(logits: &mut [f64]) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// A drawn mixture representation.
#[derive(Clone, Debug)]
pub struct MixtureSample {
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
    pub per_expert: Vec<Vec<f64>>,
}

/// Draw `z_m` from each expert posterior (shift-and-scale; independent noise
/// per expert) and mix with the gate weights. Deterministic mode uses zero
/// noise.
pub fn sample_mixture(
    post: &ContextPosterior,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> MixtureSample {
    let m = post.means.len();
    let d = post.means[0].len();
    let mut per_expert = Vec::with_capacity(m);
    for i in 0..m {
        let mut zi = vec![0.0; d];
        for k in 0..d {
            let eps: f64 = if deterministic {
                0.0
            } else {
                rng.sample(StandardNormal)
            };
            zi[k] = post.means[i][k] + post.vars[i][k].sqrt() * eps;
        }
        per_expert.push(zi);
    }
    let mut z = vec![0.0; d];
    for i in 0..m {
        for k in 0..d {
            z[k] += post.gate[i] * per_expert[i][k];
        }
    }
    MixtureSample {
        z,
        weights: post.gate.clone(),
        per_expert,
    }
}

/// Standard-normal draw of the latent dimension (the unit Gaussian prior);
/// deterministic mode returns the prior mean.
pub fn prior_sample(latent_dim: usize, rng: &mut ChaCha8Rng, deterministic: bool) -> Vec<f64> {
    (0..latent_dim)
        .map(|_| {
            if deterministic {
                0.0
            } else {
                rng.sample(StandardNormal)
            }
        })
        .collect()
}

/// Closed-form `sum_m KL(N(mean_m, var_m) || N(0, I))`.
pub fn kl_to_prior(post: &ContextPosterior) -> Result<f64, DiffError> {
    let mut total = 0.0;
    for (mean, var) in post.means.iter().zip(&post.vars) {
        for (&mu, &v) in mean.iter().zip(var) {
            if v <= 0.0 {
                return Err(DiffError::NonFinite {
                    what: "variance",
                    name: "kl_to_prior".into(),
                });
            }
            total += 0.5 * (mu * mu + v - v.ln() - 1.0);
        }
    }
    Ok(total)
}

/// Gate weights for a raw context batch (inference path).
pub fn gate_weights(
    store: &ParamStore,
    cfg: &EncoderConfig,
    context: &[Vec<f64>],
) -> Result<Vec<f64>, DiffError> {
    let factors: Vec<FactorCache> = context
        .iter()
        .map(|c| encode_transition(store, cfg, c))
        .collect::<Result<_, _>>()?;
    Ok(posterior_from_factors(&factors, cfg)?.gate)
}

/// Posterior `(mean, variance)` of expert `m` for a raw context batch.
pub fn expert_posterior(
    store: &ParamStore,
    cfg: &EncoderConfig,
    context: &[Vec<f64>],
    m: usize,
) -> Result<(Vec<f64>, Vec<f64>), DiffError> {
    let factors: Vec<FactorCache> = context
        .iter()
        .map(|c| encode_transition(store, cfg, c))
        .collect::<Result<_, _>>()?;
    let post = posterior_from_factors(&factors, cfg)?;
    Ok((post.means[m].clone(), post.vars[m].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::finite_diff_check;
    use crate::diff::rows;
    use crate::diff::Grads;
    use crate::seeding::derived_rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn tiny_cfg() -> EncoderConfig {
        // state_dim 4 -> context_dim 10.
        EncoderConfig::new(4, 6, 3, 2)
    }

    fn init_store(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_encoder(&mut store, cfg, seed).unwrap();
        store
    }

    fn random_context(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = derived_rng(seed, "ctx", &[]);
        (0..n)
            .map(|_| (0..cfg.context_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zeroed_gate_yields_uniform_weights() {
        let cfg = tiny_cfg();
        let mut store = init_store(&cfg, 1);
        store
            .set_value("encoder/gate/l0/w", Mat::zeros((cfg.hidden + cfg.context_dim, 3)))
            .unwrap();
        store.set_value("encoder/gate/l0/b", Mat::zeros((1, 3))).unwrap();
        let ctx = random_context(&cfg, 5, 2);
        let w = gate_weights(&store, &cfg, &ctx).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_weights_lie_on_the_simplex() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 3);
        let ctx = random_context(&cfg, 7, 4);
        let w = gate_weights(&store, &cfg, &ctx).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!(gate_weights(&store, &cfg, &[]).is_err());
    }

    #[test]
    fn outputs_are_exactly_permutation_invariant() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 5);
        let ctx = random_context(&cfg, 9, 6);
        let mut shuffled = ctx.clone();
        shuffled.shuffle(&mut derived_rng(7, "perm", &[]));

        let factors = |c: &[Vec<f64>]| -> Vec<FactorCache> {
            c.iter().map(|v| encode_transition(&store, &cfg, v).unwrap()).collect()
        };
        let a = posterior_from_factors(&factors(&ctx), &cfg).unwrap();
        let b = posterior_from_factors(&factors(&shuffled), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(kl_to_prior(&a).unwrap(), kl_to_prior(&b).unwrap());

        // Tape path as well.
        let run = |c: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.constant(rows(c));
            let fwd = encoder_forward(&mut tape, Binding::Frozen(&store), &cfg, x).unwrap();
            let g = tape.value(fwd.gate).clone();
            let post: Vec<(Mat, Mat)> = fwd
                .posteriors
                .iter()
                .map(|(m, v)| (tape.value(*m).clone(), tape.value(*v).clone()))
                .collect();
            (g, post)
        };
        let (ga, pa) = run(&ctx);
        let (gb, pb) = run(&shuffled);
        assert_eq!(ga, gb);
        for ((ma, va), (mb, vb)) in pa.iter().zip(&pb) {
            assert_eq!(ma, mb);
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn tape_and_cache_paths_agree() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 8);
        let ctx = random_context(&cfg, 6, 9);
        let factors: Vec<FactorCache> = ctx
            .iter()
            .map(|v| encode_transition(&store, &cfg, v).unwrap())
            .collect();
        let cached = posterior_from_factors(&factors, &cfg).unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(rows(&ctx));
        let fwd = encoder_forward(&mut tape, Binding::Frozen(&store), &cfg, x).unwrap();
        for m in 0..cfg.num_experts {
            let (mean, var) = fwd.posteriors[m];
            for d in 0..cfg.latent_dim {
                assert!((tape.value(mean)[(0, d)] - cached.means[m][d]).abs() < 1e-12);
                assert!((tape.value(var)[(0, d)] - cached.vars[m][d]).abs() < 1e-12);
            }
        }
        for m in 0..cfg.num_experts {
            assert!((tape.value(fwd.gate)[(0, m)] - cached.gate[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn product_of_two_unit_variance_factors() {
        // N(1, 1) * N(3, 1) -> N(2, 0.5) per dimension.
        let cfg = EncoderConfig { context_dim: 2, hidden: 2, num_experts: 1, latent_dim: 3 };
        let f = |mu: f64| FactorCache {
            factors: vec![(vec![mu; 3], vec![1.0; 3])],
            gate_logits: vec![0.0],
        };
        let post = posterior_from_factors(&[f(1.0), f(3.0)], &cfg).unwrap();
        for d in 0..3 {
            assert!((post.means[0][d] - 2.0).abs() < 1e-12);
            assert!((post.vars[0][d] - 0.5).abs() < 1e-12);
        }

        // A single factor is its own posterior.
        let single = posterior_from_factors(&[f(1.25)], &cfg).unwrap();
        assert!((single.means[0][0] - 1.25).abs() < 1e-12);
        assert!((single.vars[0][0] - 1.0).abs() < 1e-12);

        // K identical factors N(mu, var) -> N(mu, var / K).
        let k = 7;
        let same: Vec<FactorCache> = (0..k)
            .map(|_| FactorCache {
                factors: vec![(vec![0.4; 3], vec![2.0; 3])],
                gate_logits: vec![0.0],
            })
            .collect();
        let post = posterior_from_factors(&same, &cfg).unwrap();
        assert!((post.means[0][0] - 0.4).abs() < 1e-12);
        assert!((post.vars[0][0] - 2.0 / k as f64).abs() < 1e-12);
    }

    #[test]
    fn posterior_precision_grows_with_context() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 10);
        let ctx = random_context(&cfg, 12, 11);
        let factors: Vec<FactorCache> = ctx
            .iter()
            .map(|v| encode_transition(&store, &cfg, v).unwrap())
            .collect();
        let mut prev_var: Option<Vec<Vec<f64>>> = None;
        for n in 1..=factors.len() {
            let post = posterior_from_factors(&factors[..n], &cfg).unwrap();
            if let Some(prev) = &prev_var {
                for m in 0..cfg.num_experts {
                    for d in 0..cfg.latent_dim {
                        assert!(post.vars[m][d] <= prev[m][d] + 1e-15);
                    }
                }
            }
            prev_var = Some(post.vars.clone());
        }
    }

    #[test]
    fn mixture_sampling_modes() {
        let mut post = ContextPosterior::prior(3, 2);
        post.means = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        post.vars = vec![vec![VARIANCE_FLOOR; 2]; 3];
        let mut rng = derived_rng(12, "z", &[]);

        // Deterministic draw is the gate-weighted mean.
        post.gate = vec![0.2, 0.3, 0.5];
        let s = sample_mixture(&post, &mut rng, true);
        assert!((s.z[0] - (0.2 * 1.0 + 0.3 * 3.0 + 0.5 * 5.0)).abs() < 1e-12);

        // One-hot gate selects that expert's sample.
        post.gate = vec![0.0, 1.0, 0.0];
        let s = sample_mixture(&post, &mut rng, false);
        assert_eq!(s.z, s.per_expert[1]);

        // A single expert reduces to the plain product-of-Gaussians encoder.
        let single = ContextPosterior {
            means: vec![vec![0.7, -0.2]],
            vars: vec![vec![0.5, 0.25]],
            gate: vec![1.0],
        };
        let s = sample_mixture(&single, &mut rng, true);
        assert_eq!(s.z, single.means[0]);
        assert_eq!(s.weights, vec![1.0]);
    }

    #[test]
    fn prior_sample_statistics() {
        let mut rng = derived_rng(13, "prior", &[]);
        assert_eq!(prior_sample(4, &mut rng, true), vec![0.0; 4]);
        let n = 100_000;
        let mut mean = 0.0;
        let mut var = 0.0;
        for _ in 0..n {
            let z = prior_sample(1, &mut rng, false);
            mean += z[0];
            var += z[0] * z[0];
        }
        mean /= n as f64;
        var = var / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn kl_closed_form_values() {
        // All posteriors at the prior -> 0.
        let prior = ContextPosterior::prior(3, 4);
        assert!(kl_to_prior(&prior).unwrap().abs() < 1e-15);

        // Single expert, 1-D, N(1, 1) -> 0.5.
        let single = ContextPosterior {
            means: vec![vec![1.0]],
            vars: vec![vec![1.0]],
            gate: vec![1.0],
        };
        assert!((kl_to_prior(&single).unwrap() - 0.5).abs() < 1e-15);

        let bad = ContextPosterior {
            means: vec![vec![0.0]],
            vars: vec![vec![0.0]],
            gate: vec![1.0],
        };
        assert!(kl_to_prior(&bad).is_err());
    }

    #[test]
    fn kl_matches_numerical_quadrature() {
        // Simpson quadrature of integral q ln(q/p) on random 1-D cases.
        let mut rng = derived_rng(14, "quad", &[]);
        for _ in 0..20 {
            let mu: f64 = rng.gen_range(-2.0..2.0);
            let var: f64 = rng.gen_range(0.05..4.0);
            let post = ContextPosterior {
                means: vec![vec![mu]],
                vars: vec![vec![var]],
                gate: vec![1.0],
            };
            let closed = kl_to_prior(&post).unwrap();
            let sd = var.sqrt();
            let (lo, hi) = (mu - 12.0 * sd.max(1.0), mu + 12.0 * sd.max(1.0));
            let steps = 40_000;
            let h = (hi - lo) / steps as f64;
            let integrand = |x: f64| {
                let q = (-0.5 * (x - mu) * (x - mu) / var).exp()
                    / (var * 2.0 * std::f64::consts::PI).sqrt();
                if q < 1e-300 {
                    return 0.0;
                }
                let ln_p = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
                q * (q.ln() - ln_p)
            };
            let mut acc = integrand(lo) + integrand(hi);
            for i in 1..steps {
                let x = lo + i as f64 * h;
                acc += integrand(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let quad = acc * h / 3.0;
            assert!(
                (closed - quad).abs() < 1e-6,
                "mu={mu} var={var}: closed {closed} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig::new(2, 4, 2, 2);
        let mut store = init_store(&cfg, 15);
        let ctx = rows(&random_context(&cfg, 4, 16));
        let eps = rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]);
        let probe = rows(&[vec![0.5, -1.0]]);

        let build = |tape: &mut Tape, s: &ParamStore| -> Result<Var, DiffError> {
            let x = tape.constant(ctx.clone());
            let fwd = encoder_forward(tape, Binding::Trainable(s), &cfg, x)?;
            let z = sample_mixture_on_tape(tape, &fwd, &eps)?;
            let kl = kl_to_prior_on_tape(tape, &fwd);
            // Loss touches both the sample path and the KL path.
            let p = tape.constant(probe.clone());
            let zp = tape.mul(z, p);
            let zs = tape.sum_all(zp);
            let kl_scaled = tape.scale(kl, 0.1);
            Ok(tape.add(zs, kl_scaled))
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store).unwrap();
        let mut grads = Grads::zeros(&store);
        tape.backward(loss, &mut grads).unwrap();
        let loss_fn = |s: &ParamStore| -> Result<f64, DiffError> {
            let mut t = Tape::new();
            let l = build(&mut t, s)?;
            Ok(t.value(l)[(0, 0)])
        };
        let report = finite_diff_check(&mut store, &["encoder/"], &grads, 1e-4, loss_fn).unwrap();
        assert!(report.max_err < 1e-4, "worst: {}", report.worst_param);
    }

    #[test]
    fn single_expert_matches_plain_encoder() {
        let cfg1 = EncoderConfig::new(4, 6, 1, 2);
        let store = init_store(&cfg1, 17);
        let ctx = random_context(&cfg1, 5, 18);
        let w = gate_weights(&store, &cfg1, &ctx).unwrap();
        assert_eq!(w, vec![1.0]);
        // Mixture z with one expert equals that expert's own sample for
        // matched noise.
        let factors: Vec<FactorCache> = ctx
            .iter()
            .map(|v| encode_transition(&store, &cfg1, v).unwrap())
            .collect();
        let post = posterior_from_factors(&factors, &cfg1).unwrap();
        let mut r1 = derived_rng(19, "a", &[]);
        let mut r2 = derived_rng(19, "a", &[]);
        let s = sample_mixture(&post, &mut r1, false);
        let expected: Vec<f64> = (0..cfg1.latent_dim)
            .map(|d| {
                let eps: f64 = r2.sample(StandardNormal);
                post.means[0][d] + post.vars[0][d].sqrt() * eps
            })
            .collect();
        assert_eq!(s.z, expected);
    }

    #[test]
    fn non_finite_factors_fail_fast() {
        let cfg = EncoderConfig { context_dim: 2, hidden: 2, num_experts: 1, latent_dim: 1 };
        let bad = FactorCache {
            factors: vec![(vec![f64::NAN], vec![1.0])],
            gate_logits: vec![0.0],
        };
        assert!(posterior_from_factors(&[bad], &cfg).is_err());
    }

    #[test]
    fn context_vec_layout() {
        let t = Transition {
            state: vec![1.0, 0.0],
            action: 1,
            reward: 0.5,
            next_state: vec![0.0, 1.0],
        };
        assert_eq!(
            transition_context_vec(&t),
            vec![1.0, 0.0, 1.0, 0.5, 0.0, 1.0]
        );
    }
}
