//! Tanh-Gaussian policy, value network, imagination rollouts and the
//! λ-return objectives built on them.

use diffcore::{Array, Axis, DiffError, Result, Tape, Var};

use crate::nn::{Mlp, ParamSet};
use crate::rng::{normal_array, StreamRng};
use crate::worldmodel::{ImaginationModel, Latent};

/// `½ ln(2πe)`, the entropy of a unit Gaussian.
pub const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

const MEAN_LIMIT: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    params: ParamSet,
    net: Mlp,
    action_dim: usize,
    scale: f64,
    std_floor: f64,
}

impl Policy {
    pub fn new(feature: usize, hidden: usize, action_dim: usize, scale: f64, std_floor: f64, rng: &mut StreamRng) -> Self {
        let mut params = ParamSet::new();
        let net = Mlp::new(&mut params, "policy", &[feature, hidden, hidden, 2 * action_dim], rng);
        Self {
            params,
            net,
            action_dim,
            scale,
            std_floor,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPolicy<'_> {
        BoundPolicy {
            policy: self,
            vars: self.params.bind(tape, trainable),
        }
    }
}

pub struct BoundPolicy<'a> {
    pub policy: &'a Policy,
    pub vars: Vec<Var>,
}

/// Pre-tanh Gaussian `N(mean, std)` and the tanh output scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionDistribution {
    pub mean: Var,
    pub std: Var,
    pub scale: f64,
}

impl BoundPolicy<'_> {
    pub fn distribution(&self, tape: &mut Tape, latent: &Latent) -> Result<ActionDistribution> {
        let f = latent.features(tape)?;
        let raw = self.policy.net.forward(tape, &self.vars, f)?;
        let a = self.policy.action_dim;
        let m = tape.slice_cols(raw, 0, a)?;
        let m = tape.scale(m, 1.0 / MEAN_LIMIT)?;
        let m = tape.tanh(m)?;
        let mean = tape.scale(m, MEAN_LIMIT)?;
        let s = tape.slice_cols(raw, a, 2 * a)?;
        let s = tape.softplus(s)?;
        let std = tape.offset(s, self.policy.std_floor)?;
        Ok(ActionDistribution {
            mean,
            std,
            scale: self.policy.scale,
        })
    }
}

/// `scale * tanh(mean + std * noise)`.
pub fn sample_action(tape: &mut Tape, dist: &ActionDistribution, noise: &Array) -> Result<Var> {
    let pre = tape.gaussian_sample(dist.mean, dist.std, noise.clone())?;
    let squashed = tape.tanh(pre)?;
    tape.scale(squashed, dist.scale)
}

/// Pre-tanh Gaussian entropy `Σ ½ ln(2πe v²)`, one value per row.
pub fn policy_entropy(tape: &mut Tape, dist: &ActionDistribution) -> Result<Var> {
    let dims = tape.shape(dist.std).1;
    let log_std = tape.log(dist.std)?;
    let total = tape.sum_cols(log_std)?;
    tape.offset(total, dims as f64 * HALF_LN_2PI_E)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    params: ParamSet,
    net: Mlp,
}

impl ValueNet {
    pub fn new(feature: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        let mut params = ParamSet::new();
        let net = Mlp::new(&mut params, "value", &[feature, hidden, hidden, 1], rng);
        Self { params, net }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundValue<'_> {
        BoundValue {
            value: self,
            vars: self.params.bind(tape, trainable),
        }
    }
}

pub struct BoundValue<'a> {
    pub value: &'a ValueNet,
    pub vars: Vec<Var>,
}

impl BoundValue<'_> {
    pub fn value(&self, tape: &mut Tape, latent: &Latent) -> Result<Var> {
        let f = latent.features(tape)?;
        self.value.net.forward(tape, &self.vars, f)
    }
}

/// Exogenous noise for one rollout: per step, action noise `N x D_a` and
/// latent noise `N x D_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutNoise {
    pub action: Vec<Array>,
    pub latent: Vec<Array>,
}

impl RolloutNoise {
    pub fn sample(rng: &mut StreamRng, rows: usize, horizon: usize, action_dim: usize, stoch: usize) -> Self {
        let mut action = Vec::with_capacity(horizon);
        let mut latent = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            action.push(normal_array(rng, rows, action_dim));
            latent.push(normal_array(rng, rows, stoch));
        }
        Self { action, latent }
    }

    pub fn zeros(rows: usize, horizon: usize, action_dim: usize, stoch: usize) -> Self {
        Self {
            action: vec![Array::zeros((rows, action_dim)); horizon],
            latent: vec![Array::zeros((rows, stoch)); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.action.len()
    }
}

/// Imagined trajectories for a batch of `N` seeds. Per-step quantities are
/// `N x 1` columns; `rewards[x]` is predicted at `latents[x + 1]` and
/// `values[x]` at `latents[x]`.
#[derive(Clone, Debug)]
pub struct ImaginedRollout {
    pub latents: Vec<Latent>,
    pub dists: Vec<ActionDistribution>,
    pub actions: Vec<Var>,
    pub rewards: Vec<Var>,
    pub values: Vec<Var>,
    pub lambda_targets: Vec<Var>,
    pub gamma: f64,
    pub lambda: f64,
}

impl ImaginedRollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn batch_size(&self, tape: &Tape) -> usize {
        tape.shape(self.latents[0].deter).0
    }
}

fn rows_of(tape: &mut Tape, stacked: Var, parts: usize, rows: usize) -> Result<Vec<Var>> {
    (0..parts).map(|x| tape.slice_rows(stacked, x * rows, (x + 1) * rows)).collect()
}

/// Rolls the policy through the model's prior for `noise.horizon()` steps.
/// Seeds should already be detached.
#[allow(clippy::too_many_arguments)]
pub fn imagine_rollout<M: ImaginationModel>(
    tape: &mut Tape,
    model: &M,
    policy: &BoundPolicy,
    value: &BoundValue,
    seeds: Latent,
    noise: &RolloutNoise,
    gamma: f64,
    lambda: f64,
) -> Result<ImaginedRollout> {
    let h = noise.horizon();
    if h == 0 {
        return Err(DiffError::InvalidArgument("imagination horizon must be at least 1".into()));
    }
    let n = tape.shape(seeds.deter).0;
    let mut latents = Vec::with_capacity(h + 1);
    let mut dists = Vec::with_capacity(h);
    let mut actions = Vec::with_capacity(h);
    latents.push(seeds);
    for x in 0..h {
        let dist = policy.distribution(tape, &latents[x])?;
        let action = sample_action(tape, &dist, &noise.action[x])?;
        let next = model.imagine_step(tape, &latents[x], action, &noise.latent[x])?;
        dists.push(dist);
        actions.push(action);
        latents.push(next);
    }
    // heads evaluated once over all steps
    let all = Latent::concat_rows(tape, &latents)?;
    let v = value.value(tape, &all)?;
    let values = rows_of(tape, v, h + 1, n)?;
    let after = Latent::concat_rows(tape, &latents[1..])?;
    let r = model.predict_reward(tape, &after)?;
    let rewards = rows_of(tape, r, h, n)?;
    let lambda_targets = lambda_targets(tape, &rewards, &values, gamma, lambda)?;
    Ok(ImaginedRollout {
        latents,
        dists,
        actions,
        rewards,
        values,
        lambda_targets,
        gamma,
        lambda,
    })
}

fn check_discount(gamma: f64, lambda: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) || !(0.0..=1.0).contains(&lambda) {
        return Err(DiffError::InvalidArgument(format!(
            "need 0 < gamma <= 1 and 0 <= lambda <= 1, got gamma={gamma}, lambda={lambda}"
        )));
    }
    Ok(())
}

/// `V(x) = r_x + γ[(1-λ) v_{x+1} + λ V(x+1)]`, `V(H-1) = r_{H-1} + γ v_H`.
pub fn lambda_values(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    check_discount(gamma, lambda)?;
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(DiffError::InvalidArgument(format!(
            "{} rewards need {} values, got {}",
            h,
            h + 1,
            values.len()
        )));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for x in (0..h).rev() {
        let boot = if x + 1 == h {
            values[h]
        } else {
            (1.0 - lambda) * values[x + 1] + lambda * next
        };
        out[x] = rewards[x] + gamma * boot;
        next = out[x];
    }
    Ok(out)
}

/// Tape version of [`lambda_values`] over `N x 1` columns.
pub fn lambda_targets(tape: &mut Tape, rewards: &[Var], values: &[Var], gamma: f64, lambda: f64) -> Result<Vec<Var>> {
    check_discount(gamma, lambda)?;
    let h = rewards.len();
    if values.len() != h + 1 || h == 0 {
        return Err(DiffError::InvalidArgument(format!(
            "{} rewards need {} values, got {}",
            h,
            h + 1,
            values.len()
        )));
    }
    let mut out = vec![rewards[0]; h];
    let mut next = values[h];
    for x in (0..h).rev() {
        let boot = if x + 1 == h {
            values[h]
        } else {
            let a = tape.scale(values[x + 1], 1.0 - lambda)?;
            let b = tape.scale(next, lambda)?;
            tape.add(a, b)?
        };
        let disc = tape.scale(boot, gamma)?;
        out[x] = tape.add(rewards[x], disc)?;
        next = out[x];
    }
    Ok(out)
}

/// `N x H` matrix of per-seed, per-step targets.
pub fn target_matrix(tape: &mut Tape, targets: &[Var]) -> Result<Var> {
    tape.concat(Axis::Cols, targets)
}

/// Mean λ-return over seeds and steps.
pub fn svg_objective(tape: &mut Tape, rollout: &ImaginedRollout) -> Result<Var> {
    let m = target_matrix(tape, &rollout.lambda_targets)?;
    tape.mean(m)
}

/// Mean squared error between the value at detached `s_x` and the
/// stop-gradient target, for `x < H`.
pub fn td_loss(tape: &mut Tape, rollout: &ImaginedRollout, targets: &[Var], value: &BoundValue) -> Result<Var> {
    let h = rollout.horizon();
    if targets.len() != h {
        return Err(DiffError::InvalidArgument(format!("{} targets for horizon {h}", targets.len())));
    }
    let states = Latent::concat_rows(tape, &rollout.latents[..h])?;
    let states = states.detach(tape)?;
    let v = value.value(tape, &states)?;
    let t = tape.concat(Axis::Rows, targets)?;
    let t = tape.stop_gradient(t)?;
    let d = tape.sub(v, t)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn zero_policy(scale: f64) -> Policy {
        let mut p = Policy::new(3, 4, 2, scale, 1e-4, &mut stream_rng(0, Stream::Init));
        p.params_mut().zero_all();
        p
    }

    fn latent_on(tape: &mut Tape, rows: usize) -> Latent {
        Latent {
            deter: tape.constant(Array::from_elem((rows, 1), 0.3)),
            mean: tape.constant(Array::zeros((rows, 2))),
            std: tape.constant(Array::ones((rows, 2))),
            sample: tape.constant(Array::from_elem((rows, 2), -0.2)),
        }
    }

    #[test]
    fn zero_policy_distribution() {
        let p = zero_policy(2.0);
        let mut t = Tape::new();
        let bp = p.bind(&mut t, false);
        let l = latent_on(&mut t, 2);
        let d = bp.distribution(&mut t, &l).unwrap();
        assert!(t.value(d.mean).iter().all(|&m| m == 0.0));
        let expected = std::f64::consts::LN_2 + 1e-4;
        assert!(t.value(d.std).iter().all(|&s| (s - expected).abs() < 1e-15));
        let a = sample_action(&mut t, &d, &Array::zeros((2, 2))).unwrap();
        assert!(t.value(a).iter().all(|&a| a == 0.0));
    }

    #[test]
    fn action_saturates_at_scale() {
        let mut t = Tape::new();
        let dist = ActionDistribution {
            mean: t.constant(Array::zeros((1, 1))),
            std: t.constant(Array::ones((1, 1))),
            scale: 2.0,
        };
        let mut last = -3.0;
        for eta in [0.0, 1.0, 5.0, 20.0, 1e6] {
            let a = sample_action(&mut t, &dist, &Array::from_elem((1, 1), eta)).unwrap();
            let a = t.value(a)[[0, 0]];
            assert!(a >= last && a <= 2.0);
            last = a;
        }
        assert_eq!(last, 2.0);
    }

    #[test]
    fn action_derivative_wrt_std() {
        for eta in [-1.3, 0.4, 2.0] {
            let mut t = Tape::new();
            let m = t.constant(Array::zeros((1, 1)));
            let v = t.param(Array::ones((1, 1)));
            let d = ActionDistribution { mean: m, std: v, scale: 2.0 };
            let a = sample_action(&mut t, &d, &Array::from_elem((1, 1), eta)).unwrap();
            let l = t.sum(a).unwrap();
            let g = t.grad(l, &[v]).unwrap().get(v).unwrap()[[0, 0]];
            let analytic = 2.0 * (1.0 - eta.tanh().powi(2)) * eta;
            assert!((g - analytic).abs() < 1e-14);
            let fd = diffcore::finite_difference_check(
                |t, vs| {
                    let m = t.constant(Array::zeros((1, 1)));
                    let d = ActionDistribution { mean: m, std: vs[0], scale: 2.0 };
                    let a = sample_action(t, &d, &Array::from_elem((1, 1), eta))?;
                    t.sum(a)
                },
                &[Array::ones((1, 1))],
                1e-5,
            )
            .unwrap();
            assert!(fd < 1e-8);
        }
    }

    #[test]
    fn entropy_closed_forms() {
        let mut t = Tape::new();
        let one = ActionDistribution {
            mean: t.constant(Array::zeros((1, 1))),
            std: t.constant(Array::ones((1, 1))),
            scale: 1.0,
        };
        let h = policy_entropy(&mut t, &one).unwrap();
        assert!((t.scalar_value(h) - 1.418939).abs() < 1e-6);

        let sigma = Array::from_shape_vec((1, 3), vec![0.2, 1.0, 3.5]).unwrap();
        let wide = sigma.mapv(|s| s * std::f64::consts::E);
        let a = ActionDistribution { mean: t.constant(Array::zeros((1, 3))), std: t.constant(sigma), scale: 1.0 };
        let b = ActionDistribution { mean: t.constant(Array::zeros((1, 3))), std: t.constant(wide), scale: 1.0 };
        let ha = policy_entropy(&mut t, &a).unwrap();
        let hb = policy_entropy(&mut t, &b).unwrap();
        assert!((t.scalar_value(hb) - t.scalar_value(ha) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_limits() {
        let r = [0.3, -0.1, 0.7, 0.2];
        let v = [1.0, 0.5, -0.4, 0.9, 2.0];
        let g = 0.9;
        let td = lambda_values(&r, &v, g, 0.0).unwrap();
        for x in 0..4 {
            assert!((td[x] - (r[x] + g * v[x + 1])).abs() < 1e-15);
        }
        let mc = lambda_values(&r, &v, g, 1.0).unwrap();
        let expected: f64 = r.iter().enumerate().map(|(i, r)| g.powi(i as i32) * r).sum::<f64>() + g.powi(4) * v[4];
        assert!((mc[0] - expected).abs() < 1e-12);
        assert!(lambda_values(&r, &v[..4], g, 0.5).is_err());
        assert!(lambda_values(&r, &v, 0.0, 0.5).is_err());
        assert!(lambda_values(&r, &v, 0.9, 1.5).is_err());
    }

    #[test]
    fn lambda_hand_example() {
        let out = lambda_values(&[1.0, 0.0], &[0.0, 0.0, 10.0], 0.99, 0.95).unwrap();
        // k=1 return from step 0 is 1 + γ·0, k=2 is 1 + γ²·10
        let k1 = 1.0;
        let k2 = 1.0 + 0.99 * 0.99 * 10.0;
        let oracle0 = 0.05 * k1 + 0.95 * k2;
        assert!((out[0] - oracle0).abs() < 1e-12);
        assert!((out[1] - 9.9).abs() < 1e-12);
    }

    #[test]
    fn tape_targets_match_plain() {
        let r = [0.3, -0.1, 0.7];
        let v = [1.0, 0.5, -0.4, 0.9];
        let plain = lambda_values(&r, &v, 0.99, 0.95).unwrap();
        let mut t = Tape::new();
        let rv: Vec<Var> = r.iter().map(|&x| t.scalar(x)).collect();
        let vv: Vec<Var> = v.iter().map(|&x| t.scalar(x)).collect();
        let tt = lambda_targets(&mut t, &rv, &vv, 0.99, 0.95).unwrap();
        for (a, b) in tt.iter().zip(&plain) {
            assert_eq!(t.scalar_value(*a), *b);
        }
    }
}
