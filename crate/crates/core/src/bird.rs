//! Mutual-information bridging: confidence-weighted value gradients with a
//! policy-entropy bonus, the soft-value ablation, and the combined update
//! that trains model, policy and value in turn.

use std::fmt;
use std::str::FromStr;

use diffcore::{adam_step, clip_gradient_norm, Array, Axis, DiffError, GradientMap, OptimizerState, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::agent::{
    imagine_rollout, lambda_targets, lambda_values, policy_entropy, svg_objective, target_matrix, td_loss,
    ImaginedRollout, Policy, RolloutNoise, ValueNet,
};
use crate::error::{BirdError, Result};
use crate::rng::{normal_array, RngStreams, Stream, StreamRng};
use crate::worldmodel::{BoundModel, LatentState, ModelDims, ModelLoss, Observation, SequenceBatch, WorldModel};

pub const WEIGHT_MIN: f64 = 0.1;
pub const WEIGHT_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dreamer,
    Bird,
    SoftBird,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dreamer, Variant::Bird, Variant::SoftBird];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dreamer => "dreamer",
            Variant::Bird => "bird",
            Variant::SoftBird => "soft-bird",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = BirdError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| BirdError::Config(format!("unknown variant '{s}' (valid: dreamer, bird, soft-bird)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantSelector {
    pub variant: Variant,
    pub w_mi: f64,
    pub alpha_soft: f64,
}

impl VariantSelector {
    pub fn new(variant: Variant, w_mi: f64, alpha_soft: f64) -> Result<Self> {
        if !(w_mi >= 0.0 && w_mi.is_finite()) || !(alpha_soft >= 0.0 && alpha_soft.is_finite()) {
            return Err(BirdError::Config(format!(
                "w_mi and alpha_soft must be finite and >= 0, got {w_mi}, {alpha_soft}"
            )));
        }
        Ok(Self {
            variant,
            w_mi,
            alpha_soft,
        })
    }
}

/// Per-sequence model confidence and the normalized weights derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceBatch {
    pub raw: Vec<f64>,
    /// Weights after clipping, before the final renormalization.
    pub clipped: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ConfidenceBatch {
    pub fn from_raw(raw: Vec<f64>) -> diffcore::Result<Self> {
        let (clipped, weights) = normalize_confidence(&raw)?;
        Ok(Self { raw, clipped, weights })
    }

    pub fn mean_raw(&self) -> f64 {
        self.raw.iter().sum::<f64>() / self.raw.len() as f64
    }

    /// Weights as a `B x 1` constant.
    pub fn on_tape(&self, tape: &mut Tape) -> Var {
        tape.constant(Array::from_shape_vec((self.weights.len(), 1), self.weights.clone()).expect("column"))
    }
}

/// Max-subtract, exponentiate, scale to mean one, clip, renormalize.
/// Returns `(clipped, final)`.
pub fn normalize_confidence(raw: &[f64]) -> diffcore::Result<(Vec<f64>, Vec<f64>)> {
    if raw.is_empty() {
        return Err(DiffError::InvalidArgument("confidence batch is empty".into()));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(DiffError::NonFinite("confidence log-likelihood".into()));
    }
    let n = raw.len() as f64;
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|x| (x - max).exp()).collect();
    let mean = e.iter().sum::<f64>() / n;
    let clipped: Vec<f64> = e.iter().map(|x| (x / mean).clamp(WEIGHT_MIN, WEIGHT_MAX)).collect();
    let mean = clipped.iter().sum::<f64>() / n;
    let weights = clipped.iter().map(|x| x / mean).collect();
    Ok((clipped, weights))
}

/// Per-sequence mean over steps of the prior log-density at the posterior
/// sample, normalized into weights.
pub fn confidence_weights(tape: &Tape, observed: &Observation) -> diffcore::Result<ConfidenceBatch> {
    let steps = observed.posteriors.len();
    if steps == 0 {
        return Err(DiffError::InvalidArgument("no observed steps".into()));
    }
    let b = tape.shape(observed.posteriors[0].sample).0;
    let mut raw = vec![0.0; b];
    for (post, prior) in observed.posteriors.iter().zip(&observed.priors) {
        let x = tape.value(post.sample);
        let m = tape.value(prior.mean);
        let s = tape.value(prior.std);
        for (i, acc) in raw.iter_mut().enumerate() {
            let mut lp = 0.0;
            for j in 0..x.ncols() {
                let z = (x[[i, j]] - m[[i, j]]) / s[[i, j]];
                lp += -0.5 * z * z - s[[i, j]].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            *acc += lp / steps as f64;
        }
    }
    ConfidenceBatch::from_raw(raw)
}

/// `mean_b[w_b J_b] + w_mi * mean(real_entropy)`. `weights` is `B x 1` and
/// is stop-gradiented here; rollout seed row `n` belongs to sequence `n % B`.
pub fn bird_policy_objective(
    tape: &mut Tape,
    rollout: &ImaginedRollout,
    weights: Var,
    real_entropy: Var,
    w_mi: f64,
) -> diffcore::Result<Var> {
    let n = rollout.batch_size(tape);
    let (b, cols) = tape.shape(weights);
    if cols != 1 || b == 0 || n % b != 0 {
        return Err(DiffError::InvalidArgument(format!(
            "{n} rollout seeds cannot be split over {b} confidence weights"
        )));
    }
    let w = tape.stop_gradient(weights)?;
    let expanded = tape.concat(Axis::Rows, &vec![w; n / b])?;
    let targets = target_matrix(tape, &rollout.lambda_targets)?;
    let weighted = tape.mul(targets, expanded)?;
    let svg = tape.mean(weighted)?;
    let ent = tape.mean(real_entropy)?;
    let bonus = tape.scale(ent, w_mi)?;
    tape.add(svg, bonus)
}

/// Gradient of the model's share of the mutual information, i.e. of the
/// negated model loss.
pub fn bird_model_gradient(
    tape: &mut Tape,
    model: &BoundModel,
    batch: &SequenceBatch,
    observed: &Observation,
    beta: f64,
) -> diffcore::Result<(GradientMap, ModelLoss)> {
    let loss = model.model_loss(tape, batch, observed, beta)?;
    let info = tape.neg(loss.loss)?;
    Ok((tape.grad(info, &model.vars)?, loss))
}

/// λ-returns of entropy-augmented rewards `r_i + α H(π(·|s_i))`.
pub fn soft_value_target(
    rewards: &[f64],
    entropies: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
    alpha: f64,
) -> diffcore::Result<Vec<f64>> {
    if entropies.len() != rewards.len() {
        return Err(DiffError::InvalidArgument(format!(
            "{} entropies for {} rewards",
            entropies.len(),
            rewards.len()
        )));
    }
    let aug: Vec<f64> = rewards.iter().zip(entropies).map(|(r, h)| r + alpha * h).collect();
    lambda_values(&aug, values, gamma, lambda)
}

/// Tape version of [`soft_value_target`] over a rollout.
pub fn soft_lambda_targets(tape: &mut Tape, rollout: &ImaginedRollout, alpha: f64) -> diffcore::Result<Vec<Var>> {
    let mut aug = Vec::with_capacity(rollout.horizon());
    for (r, d) in rollout.rewards.iter().zip(&rollout.dists) {
        let h = policy_entropy(tape, d)?;
        let bonus = tape.scale(h, alpha)?;
        aug.push(tape.add(*r, bonus)?);
    }
    lambda_targets(tape, &aug, &rollout.values, rollout.gamma, rollout.lambda)
}

/// Mean soft λ-return; also returns the targets for the value step.
pub fn soft_bird_objective(tape: &mut Tape, rollout: &ImaginedRollout, alpha: f64) -> diffcore::Result<(Var, Vec<Var>)> {
    let targets = soft_lambda_targets(tape, rollout, alpha)?;
    let m = target_matrix(tape, &targets)?;
    Ok((tape.mean(m)?, targets))
}

/// Parameters and optimizer state for the three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub model: WorldModel,
    pub policy: Policy,
    pub value: ValueNet,
    pub model_opt: OptimizerState,
    pub policy_opt: OptimizerState,
    pub value_opt: OptimizerState,
}

impl Learner {
    pub fn new(dims: ModelDims, action_scale: f64, rng: &mut StreamRng) -> Self {
        let model = WorldModel::new(dims, rng);
        let policy = Policy::new(dims.feature(), dims.hidden, dims.action, action_scale, dims.std_floor, rng);
        let value = ValueNet::new(dims.feature(), dims.hidden, rng);
        Self {
            model_opt: OptimizerState::zeros_like(model.params().arrays()),
            policy_opt: OptimizerState::zeros_like(policy.params().arrays()),
            value_opt: OptimizerState::zeros_like(value.params().arrays()),
            model,
            policy,
            value,
        }
    }

    pub fn dims(&self) -> &ModelDims {
        self.model.dims()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub model_lr: f64,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub grad_clip: f64,
    pub selector: VariantSelector,
    /// Replace the confidence weights by ones.
    pub unit_confidence: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateMetrics {
    pub model_loss: f64,
    pub obs_nll: f64,
    pub reward_nll: f64,
    pub kl: f64,
    pub policy_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub confidence: f64,
    pub max_weight: f64,
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(BirdError::NonFinite(what.to_string()))
    }
}

fn descend(params: &mut [Array], grads: GradientMap, clip: f64, state: &mut OptimizerState, lr: f64, negate: bool) -> Result<()> {
    let clipped = clip_gradient_norm(&grads, clip).map_err(|e| BirdError::NonFinite(e.to_string()))?;
    let mut arrays = clipped.into_arrays();
    if negate {
        for a in &mut arrays {
            a.mapv_inplace(|g| -g);
        }
    }
    adam_step(params, &arrays, state, lr)?;
    Ok(())
}

/// Draws the model-step noise for one batch.
pub fn model_noise(rng: &mut StreamRng, batch: usize, length: usize, stoch: usize) -> Vec<Array> {
    (0..length).map(|_| normal_array(rng, batch, stoch)).collect()
}

/// One model step, one policy step and one value step on a sampled batch.
pub fn combined_update(
    learner: &mut Learner,
    batch: &SequenceBatch,
    cfg: &UpdateConfig,
    streams: &mut RngStreams,
) -> Result<UpdateMetrics> {
    let dims = *learner.dims();
    let (b, l) = (batch.batch_size(), batch.length());
    let mut metrics = UpdateMetrics::default();

    // model
    let noises = model_noise(streams.get(Stream::Model), b, l, dims.stoch);
    let mut tape = Tape::new();
    let bm = learner.model.bind(&mut tape, true);
    let observed = bm.observe_sequence(&mut tape, batch, &LatentState::zeros(b, &dims), &noises)?;
    let (info_grad, loss) = bird_model_gradient(&mut tape, &bm, batch, &observed, cfg.beta)?;
    metrics.model_loss = finite(tape.scalar_value(loss.loss), "model loss")?;
    metrics.obs_nll = loss.obs_nll;
    metrics.reward_nll = loss.reward_nll;
    metrics.kl = loss.kl;

    let conf = confidence_weights(&tape, &observed)?;
    metrics.confidence = conf.mean_raw();
    let weights = if cfg.unit_confidence {
        vec![1.0; b]
    } else {
        conf.weights.clone()
    };
    metrics.max_weight = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let seed_parts: Vec<LatentState> = observed.posteriors.iter().map(|p| p.state(&tape)).collect();
    drop(tape);
    descend(
        learner.model.params_mut().arrays_mut(),
        info_grad,
        cfg.grad_clip,
        &mut learner.model_opt,
        cfg.model_lr,
        true,
    )?;

    // policy
    let seeds = stack_states(&seed_parts);
    let n = seeds.batch_size();
    let noise = RolloutNoise::sample(streams.get(Stream::Imagine), n, cfg.horizon, dims.action, dims.stoch);
    let mut tape = Tape::new();
    let bm = learner.model.bind(&mut tape, false);
    let bp = learner.policy.bind(&mut tape, true);
    let bv = learner.value.bind(&mut tape, false);
    let seed_latent = seeds.on_tape(&mut tape);
    let rollout = imagine_rollout(&mut tape, &bm, &bp, &bv, seed_latent, &noise, cfg.gamma, cfg.lambda)?;
    let real_dist = bp.distribution(&mut tape, &seed_latent)?;
    let real_entropy = policy_entropy(&mut tape, &real_dist)?;
    metrics.entropy = tape.value(real_entropy).mean().unwrap_or(0.0);

    let sel = cfg.selector;
    let (objective, targets) = match sel.variant {
        Variant::Dreamer => (svg_objective(&mut tape, &rollout)?, rollout.lambda_targets.clone()),
        Variant::Bird => {
            let w = tape.constant(Array::from_shape_vec((b, 1), weights).expect("column"));
            let obj = bird_policy_objective(&mut tape, &rollout, w, real_entropy, sel.w_mi)?;
            (obj, rollout.lambda_targets.clone())
        }
        Variant::SoftBird => soft_bird_objective(&mut tape, &rollout, sel.alpha_soft)?,
    };
    metrics.policy_objective = finite(tape.scalar_value(objective), "policy objective")?;
    let policy_loss = tape.neg(objective)?;
    let g = tape.grad(policy_loss, &bp.vars)?;
    descend(
        learner.policy.params_mut().arrays_mut(),
        g,
        cfg.grad_clip,
        &mut learner.policy_opt,
        cfg.actor_lr,
        false,
    )?;

    // value
    let bv_train = learner.value.bind(&mut tape, true);
    let td = td_loss(&mut tape, &rollout, &targets, &bv_train)?;
    metrics.value_loss = finite(tape.scalar_value(td), "value loss")?;
    let g = tape.grad(td, &bv_train.vars)?;
    descend(
        learner.value.params_mut().arrays_mut(),
        g,
        cfg.grad_clip,
        &mut learner.value_opt,
        cfg.value_lr,
        false,
    )?;

    if !(learner.model.params().is_finite() && learner.policy.params().is_finite() && learner.value.params().is_finite()) {
        return Err(BirdError::NonFinite("parameters after update".into()));
    }
    Ok(metrics)
}

/// Row-stacks latent states, keeping their order.
pub fn stack_states(parts: &[LatentState]) -> LatentState {
    let cat = |f: fn(&LatentState) -> &Array| {
        let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform latent widths")
    };
    LatentState {
        deterministic: cat(|p| &p.deterministic),
        stoch_mean: cat(|p| &p.stoch_mean),
        stoch_std: cat(|p| &p.stoch_std),
        stoch_sample: cat(|p| &p.stoch_sample),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_raw_gives_unit_weights() {
        let c = ConfidenceBatch::from_raw(vec![-3.2; 5]).unwrap();
        assert!(c.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn dominant_sequence_hits_ceiling() {
        let b = 16;
        let mut raw = vec![0.0; b];
        raw[3] = 10.0_f64.ln() * b as f64 + 1.0;
        let c = ConfidenceBatch::from_raw(raw).unwrap();
        assert_eq!(c.clipped[3], WEIGHT_MAX);
        assert!(c.clipped.iter().enumerate().all(|(i, &w)| i == 3 || w == WEIGHT_MIN));
        let mean = c.weights.iter().sum::<f64>() / b as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(ConfidenceBatch::from_raw(vec![]).is_err());
        assert!(ConfidenceBatch::from_raw(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("planet".parse::<Variant>().is_err());
        assert!(VariantSelector::new(Variant::Bird, -1.0, 0.0).is_err());
    }

    #[test]
    fn soft_target_reductions() {
        let r = [0.1, 0.4, 0.0];
        let h = [1.3, -0.2, 0.8];
        let v = [0.5, 0.2, 0.9, 1.0];
        assert_eq!(
            soft_value_target(&r, &h, &v, 0.99, 0.95, 0.0).unwrap(),
            lambda_values(&r, &v, 0.99, 0.95).unwrap()
        );
        let g: f64 = 0.9;
        let hh = 0.7;
        let out = soft_value_target(&[0.0; 5], &[hh; 5], &[0.0; 6], g, 1.0, 1.0).unwrap();
        assert!((out[0] - hh * (1.0 - g.powi(5)) / (1.0 - g)).abs() < 1e-12);
    }
}
