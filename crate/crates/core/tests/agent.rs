mod common;

use bird_core::agent::{
    imagine_rollout, lambda_values, policy_entropy, sample_action, svg_objective, td_loss, ActionDistribution,
    ImaginedRollout, Policy, RolloutNoise, ValueNet, HALF_LN_2PI_E,
};
use bird_core::rng::{normal_array, stream_rng, Stream};
use bird_core::worldmodel::{Latent, WorldModel};
use common::*;
use diffcore::{finite_difference_report, Array, Tape, Var};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn bind_with(t: &mut Tape, base: &[Array], overrides: &[(usize, Var)]) -> Vec<Var> {
    let mut vars: Vec<Var> = base.iter().map(|a| t.constant(a.clone())).collect();
    for &(i, v) in overrides {
        vars[i] = v;
    }
    vars
}

#[test]
fn policy_and_value_head_gradients() {
    let dims = small_dims();
    let policy = Policy::new(dims.feature(), 8, 1, 2.0, 1e-4, &mut stream_rng(1, Stream::Init));
    let value = ValueNet::new(dims.feature(), 8, &mut stream_rng(2, Stream::Init));
    let mut rng = stream_rng(3, Stream::Model);
    let lat = random_latents(&mut rng, 3, &dims);
    let w = normal_array(&mut rng, 3, 1);

    let report = finite_difference_report(
        |t, v| {
            let bp = bird_core::agent::BoundPolicy { policy: &policy, vars: v.to_vec() };
            let l = lat.on_tape(t);
            let d = bp.distribution(t, &l)?;
            let wm = t.constant(w.clone());
            let a = t.mul(d.mean, wm)?;
            let b = t.mul(d.std, wm)?;
            let s = t.add(a, b)?;
            t.sum(s)
        },
        policy.params().arrays(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");

    let report = finite_difference_report(
        |t, v| {
            let bv = bird_core::agent::BoundValue { value: &value, vars: v.to_vec() };
            let l = lat.on_tape(t);
            let out = bv.value(t, &l)?;
            let wm = t.constant(w.clone());
            let p = t.mul(out, wm)?;
            t.sum(p)
        },
        value.params().arrays(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn distribution_is_deterministic_and_zero_value_is_zero() {
    let dims = small_dims();
    let policy = Policy::new(dims.feature(), 8, 1, 2.0, 1e-4, &mut stream_rng(1, Stream::Init));
    let mut value = ValueNet::new(dims.feature(), 8, &mut stream_rng(2, Stream::Init));
    value.params_mut().zero_all();
    let lat = random_latents(&mut stream_rng(4, Stream::Model), 2, &dims);
    let mut t = Tape::new();
    let bp = policy.bind(&mut t, false);
    let bv = value.bind(&mut t, false);
    let l = lat.on_tape(&mut t);
    let a = bp.distribution(&mut t, &l).unwrap();
    let b = bp.distribution(&mut t, &l).unwrap();
    assert_eq!(t.value(a.mean), t.value(b.mean));
    assert_eq!(t.value(a.std), t.value(b.std));
    let v = bv.value(&mut t, &l).unwrap();
    assert!(t.value(v).iter().all(|&x| x == 0.0));
}

#[test]
fn entropy_matches_monte_carlo() {
    let sigma: f64 = 0.7;
    let mut t = Tape::new();
    let d = ActionDistribution {
        mean: t.constant(Array::from_elem((1, 1), 0.3)),
        std: t.constant(Array::from_elem((1, 1), sigma)),
        scale: 1.0,
    };
    let h = policy_entropy(&mut t, &d).unwrap();
    let analytic = t.scalar_value(h);
    assert!((analytic - (HALF_LN_2PI_E + sigma.ln())).abs() < 1e-12);

    let normal = Normal::new(0.3, sigma).unwrap();
    let mut rng = stream_rng(5, Stream::Diagnostics);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let x: f64 = normal.sample(&mut rng);
        let z = (x - 0.3) / sigma;
        acc += 0.5 * z * z + sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    let mc = acc / n as f64;
    assert!((mc - analytic).abs() < 1e-2, "{mc} vs {analytic}");
}

fn toy_policy() -> Policy {
    let mut p = Policy::new(2, 4, 1, 1.0, 1e-4, &mut stream_rng(6, Stream::Init));
    for a in p.params_mut().arrays_mut() {
        a.mapv_inplace(|x| 0.5 * x);
    }
    p
}

fn zero_value(feature: usize) -> ValueNet {
    let mut v = ValueNet::new(feature, 4, &mut stream_rng(7, Stream::Init));
    v.params_mut().zero_all();
    v
}

fn mean_bias_grad(policy: &Policy, value: &ValueNet, noise: &RolloutNoise, s0: &[f64], svg: bool) -> f64 {
    let mut t = Tape::new();
    let bp = policy.bind(&mut t, true);
    let bv = value.bind(&mut t, false);
    let seeds = toy_seeds(&mut t, s0);
    let r = imagine_rollout(&mut t, &ToyModel { zero_reward: false }, &bp, &bv, seeds, noise, 0.99, 0.95).unwrap();
    let j = if svg {
        svg_objective(&mut t, &r).unwrap()
    } else {
        let all = t.concat(diffcore::Axis::Rows, &r.rewards).unwrap();
        t.sum(all).unwrap()
    };
    let bias = policy.params().names().iter().position(|n| n == "policy.2.b").unwrap();
    let g = t.grad(j, &[bp.vars[bias]]).unwrap();
    g.get(bp.vars[bias]).unwrap()[[0, 0]]
}

#[test]
fn toy_rollout_reward_gradient_wrt_policy_bias() {
    let policy = toy_policy();
    let value = zero_value(2);
    let bias = policy.params().names().iter().position(|n| n == "policy.2.b").unwrap();
    let noise = RolloutNoise::sample(&mut stream_rng(8, Stream::Imagine), 3, 4, 1, 1);
    let model = ToyModel { zero_reward: false };
    let base = policy.params().arrays().to_vec();
    let report = finite_difference_report(
        |t, v| {
            let vars = bind_with(t, &base, &[(bias, v[0])]);
            let bp = bird_core::agent::BoundPolicy { policy: &policy, vars };
            let bv = value.bind(t, false);
            let seeds = toy_seeds(t, &[0.1, -0.4, 0.7]);
            let r = imagine_rollout(t, &model, &bp, &bv, seeds, &noise, 0.99, 0.95)?;
            let all = t.concat(diffcore::Axis::Rows, &r.rewards)?;
            t.sum(all)
        },
        &[base[bias].clone()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    // reward grows with the action, so raising the mean-head bias helps
    assert!(mean_bias_grad(&policy, &value, &noise, &[0.1, -0.4, 0.7], false) > 0.0);
}

#[test]
fn toy_svg_sign_matches_finite_differences() {
    let policy = toy_policy();
    let value = zero_value(2);
    let bias = policy.params().names().iter().position(|n| n == "policy.2.b").unwrap();
    let noise = RolloutNoise::sample(&mut stream_rng(9, Stream::Imagine), 2, 3, 1, 1);
    let base = policy.params().arrays().to_vec();
    let report = finite_difference_report(
        |t, v| {
            let vars = bind_with(t, &base, &[(bias, v[0])]);
            let bp = bird_core::agent::BoundPolicy { policy: &policy, vars };
            let bv = value.bind(t, false);
            let seeds = toy_seeds(t, &[0.0, 0.3]);
            let r = imagine_rollout(t, &ToyModel { zero_reward: false }, &bp, &bv, seeds, &noise, 0.99, 0.95)?;
            svg_objective(t, &r)
        },
        &[base[bias].clone()],
        1e-5,
    )
    .unwrap();
    assert!(mean_bias_grad(&policy, &value, &noise, &[0.0, 0.3], true) > 0.0);
    assert!(report.max_rel_error < 1e-6);
}

fn small_rollout(t: &mut Tape, model: &WorldModel, policy: &Policy, value: &ValueNet, seeds: &bird_core::worldmodel::LatentState, noise: &RolloutNoise) -> ImaginedRollout {
    let bm = model.bind(t, false);
    let bp = policy.bind(t, false);
    let bv = value.bind(t, false);
    let s = seeds.on_tape(t);
    imagine_rollout(t, &bm, &bp, &bv, s, noise, 0.99, 0.95).unwrap()
}

#[test]
fn rollout_shapes_and_determinism() {
    let dims = small_dims();
    let l = small_learner(10);
    let seeds = random_latents(&mut stream_rng(10, Stream::Model), 4, &dims);
    let noise = RolloutNoise::sample(&mut stream_rng(10, Stream::Imagine), 4, 1, 1, 4);
    let mut t = Tape::new();
    let r = small_rollout(&mut t, &l.model, &l.policy, &l.value, &seeds, &noise);
    assert_eq!((r.actions.len(), r.latents.len(), r.rewards.len(), r.values.len()), (1, 2, 1, 2));

    let noise = RolloutNoise::sample(&mut stream_rng(11, Stream::Imagine), 4, 5, 1, 4);
    let mut t1 = Tape::new();
    let a = small_rollout(&mut t1, &l.model, &l.policy, &l.value, &seeds, &noise);
    let mut t2 = Tape::new();
    let b = small_rollout(&mut t2, &l.model, &l.policy, &l.value, &seeds, &noise);
    for (x, y) in a.lambda_targets.iter().zip(&b.lambda_targets) {
        assert_eq!(t1.value(*x), t2.value(*y));
    }
    for (x, y) in a.actions.iter().zip(&b.actions) {
        assert_eq!(t1.value(*x), t2.value(*y));
        assert!(t1.value(*x).iter().all(|v| v.abs() < 2.0));
    }
    // each imagined latent is the transition of the previous one
    let bm = l.model.bind(&mut t1, false);
    for x in 0..5 {
        use bird_core::worldmodel::ImaginationModel;
        let next = bm.imagine_step(&mut t1, &a.latents[x], a.actions[x], &noise.latent[x]).unwrap();
        assert_eq!(t1.value(next.sample), t1.value(a.latents[x + 1].sample));
    }
    let empty = RolloutNoise::zeros(4, 0, 1, 4);
    let mut t3 = Tape::new();
    let bm = l.model.bind(&mut t3, false);
    let bp = l.policy.bind(&mut t3, false);
    let bv = l.value.bind(&mut t3, false);
    let s = seeds.on_tape(&mut t3);
    assert!(imagine_rollout(&mut t3, &bm, &bp, &bv, s, &empty, 0.99, 0.95).is_err());
}

#[test]
fn svg_gradient_on_small_dims() {
    let dims = small_dims();
    let l = small_learner(12);
    let seeds = random_latents(&mut stream_rng(12, Stream::Model), 6, &dims);
    let noise = RolloutNoise::sample(&mut stream_rng(12, Stream::Imagine), 6, 3, 1, 4);
    let report = finite_difference_report(
        |t, v| {
            let bm = l.model.bind(t, false);
            let bp = bird_core::agent::BoundPolicy { policy: &l.policy, vars: v.to_vec() };
            let bv = l.value.bind(t, false);
            let s = seeds.on_tape(t);
            let r = imagine_rollout(t, &bm, &bp, &bv, s, &noise, 0.99, 0.95)?;
            svg_objective(t, &r)
        },
        l.policy.params().arrays(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn svg_zero_world_and_permutation() {
    let policy = toy_policy();
    let value = zero_value(2);
    let noise = RolloutNoise::sample(&mut stream_rng(13, Stream::Imagine), 3, 4, 1, 1);
    let mut t = Tape::new();
    let bp = policy.bind(&mut t, true);
    let bv = value.bind(&mut t, false);
    let seeds = toy_seeds(&mut t, &[0.2, -0.1, 0.5]);
    let r = imagine_rollout(&mut t, &ToyModel { zero_reward: true }, &bp, &bv, seeds, &noise, 0.99, 0.95).unwrap();
    let j = svg_objective(&mut t, &r).unwrap();
    assert_eq!(t.scalar_value(j), 0.0);
    let g = t.grad(j, &bp.vars).unwrap();
    assert!(g.arrays().all(|a| a.iter().all(|&x| x == 0.0)));

    let objective = |order: [usize; 3]| {
        let samples = [0.2, -0.1, 0.5];
        let mut n = RolloutNoise::zeros(3, 4, 1, 1);
        for x in 0..4 {
            for (row, &src) in order.iter().enumerate() {
                n.action[x][[row, 0]] = noise.action[x][[src, 0]];
            }
        }
        let mut t = Tape::new();
        let bp = policy.bind(&mut t, false);
        let bv = value.bind(&mut t, false);
        let s: Vec<f64> = order.iter().map(|&i| samples[i]).collect();
        let seeds = toy_seeds(&mut t, &s);
        let r = imagine_rollout(&mut t, &ToyModel { zero_reward: false }, &bp, &bv, seeds, &n, 0.99, 0.95).unwrap();
        let j = svg_objective(&mut t, &r).unwrap();
        t.scalar_value(j)
    };
    assert_close(objective([0, 1, 2]), objective([2, 0, 1]), 1e-12, "permuted batch");
}

#[test]
fn one_step_td_reduction() {
    let dims = small_dims();
    let l = small_learner(14);
    let seeds = random_latents(&mut stream_rng(14, Stream::Model), 5, &dims);
    let noise = RolloutNoise::sample(&mut stream_rng(14, Stream::Imagine), 5, 1, 1, 4);
    let mut t = Tape::new();
    let bm = l.model.bind(&mut t, false);
    let bp = l.policy.bind(&mut t, false);
    let bv = l.value.bind(&mut t, false);
    let s = seeds.on_tape(&mut t);
    let r = imagine_rollout(&mut t, &bm, &bp, &bv, s, &noise, 0.99, 0.0).unwrap();
    let j = svg_objective(&mut t, &r).unwrap();
    let j = t.scalar_value(j);
    let rew = t.value(r.rewards[0]).clone();
    let v1 = t.value(r.values[1]).clone();
    let expected = (rew + v1 * 0.99).mean().unwrap();
    assert_close(j, expected, 1e-12, "λ=0, H=1");
}

#[test]
fn td_loss_cases() {
    let policy = toy_policy();
    let value = zero_value(2);
    let noise = RolloutNoise::sample(&mut stream_rng(15, Stream::Imagine), 2, 1, 1, 1);
    let mut t = Tape::new();
    let bp = policy.bind(&mut t, true);
    let bv = value.bind(&mut t, true);
    let seeds = toy_seeds(&mut t, &[0.2, -0.1]);
    let r = imagine_rollout(&mut t, &ToyModel { zero_reward: false }, &bp, &bv, seeds, &noise, 0.99, 0.95).unwrap();

    // zero value head: loss is the mean squared target
    let td = td_loss(&mut t, &r, &r.lambda_targets, &bv).unwrap();
    let targets = t.value(r.lambda_targets[0]).clone();
    assert_close(t.scalar_value(td), targets.mapv(|x| x * x).mean().unwrap(), 1e-15, "zero value");
    let g = t.grad(td, &bp.vars).unwrap();
    assert!(g.arrays().all(|a| a.iter().all(|&x| x == 0.0)));

    // value equal to target
    let v_as_target = vec![r.values[0]];
    let td0 = td_loss(&mut t, &r, &v_as_target, &bv).unwrap();
    assert_eq!(t.scalar_value(td0), 0.0);

    // hand batch v = [1, 2], targets = [0, 0]; the value head reads the sample coordinate
    let mut t = Tape::new();
    let mut v2 = zero_value(2);
    for (name, r, c) in [("value.0.w", 1, 0), ("value.1.w", 0, 0), ("value.2.w", 0, 0)] {
        v2.params_mut().get_mut(name).unwrap()[[r, c]] = 1.0;
    }
    let bv2 = v2.bind(&mut t, true);
    let seeds = toy_seeds(&mut t, &[1.0, 2.0]);
    let zero_noise = RolloutNoise::zeros(2, 1, 1, 1);
    let bp = policy.bind(&mut t, false);
    let r = imagine_rollout(&mut t, &ToyModel { zero_reward: false }, &bp, &bv2, seeds, &zero_noise, 0.99, 0.95).unwrap();
    assert_eq!(t.value(r.values[0]).column(0).to_vec(), vec![1.0, 2.0]);
    let zeros = vec![t.constant(Array::zeros((2, 1)))];
    let td = td_loss(&mut t, &r, &zeros, &bv2).unwrap();
    assert_close(t.scalar_value(td), 2.5, 1e-12, "hand batch");
}

#[test]
fn action_derivative_matches_closed_form() {
    for eta in [-2.0, -0.3, 0.0, 0.8, 3.0] {
        let mut t = Tape::new();
        let v = t.param(Array::ones((1, 1)));
        let d = ActionDistribution {
            mean: t.constant(Array::zeros((1, 1))),
            std: v,
            scale: 2.0,
        };
        let a = sample_action(&mut t, &d, &Array::from_elem((1, 1), eta)).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.grad(s, &[v]).unwrap().get(v).unwrap()[[0, 0]];
        assert_close(g, 2.0 * (1.0 - eta.tanh().powi(2)) * eta, 1e-14, "∂a/∂v");
    }
}

#[test]
fn lambda_hand_example_against_enumeration() {
    let r = [1.0, 0.0];
    let v = [0.0, 0.0, 10.0];
    let out = lambda_values(&r, &v, 0.99, 0.95).unwrap();
    let oracle = brute_force_lambda(&r, &v, 0.99, 0.95);
    for (a, b) in out.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn lambda_recursion_equals_enumeration(
        h in 1usize..=6,
        raw in prop::collection::vec(-5.0f64..5.0, 13),
        gamma in 0.01f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let rewards = &raw[..h];
        let values = &raw[6..6 + h + 1];
        let rec = lambda_values(rewards, values, gamma, lambda).unwrap();
        let brute = brute_force_lambda(rewards, values, gamma, lambda);
        for (a, b) in rec.iter().zip(&brute) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn actions_stay_inside_bounds(m in -10.0f64..10.0, s in 1e-4f64..10.0, eta in -50.0f64..50.0, scale in 0.5f64..3.0) {
        let mut t = Tape::new();
        let d = ActionDistribution {
            mean: t.constant(Array::from_elem((1, 1), m)),
            std: t.constant(Array::from_elem((1, 1), s)),
            scale,
        };
        let a = sample_action(&mut t, &d, &Array::from_elem((1, 1), eta)).unwrap();
        let a = t.value(a)[[0, 0]];
        prop_assert!(a.abs() <= scale);
    }
}

#[test]
fn policy_actions_inside_bounds_on_rollouts() {
    let dims = small_dims();
    let l = small_learner(16);
    let seeds = random_latents(&mut stream_rng(16, Stream::Model), 8, &dims);
    let noise = RolloutNoise::sample(&mut stream_rng(16, Stream::Imagine), 8, 6, 1, 4);
    let mut t = Tape::new();
    let r = small_rollout(&mut t, &l.model, &l.policy, &l.value, &seeds, &noise);
    for a in &r.actions {
        assert!(t.value(*a).iter().all(|x| x.abs() < 2.0));
    }
    let _ = Latent::concat_rows(&mut t, &r.latents).unwrap();
}
