use bird_core::envs::{exploration_noise, make_env, ObservationMode, StepResult, ENV_NAMES};
use bird_core::rng::{stream_rng, Stream};
use proptest::prelude::*;
use rand::Rng;

fn trace(name: &str, seed: u64, actions: &[Vec<f64>]) -> Vec<StepResult> {
    let mut env = make_env(name, seed).unwrap();
    env.reset();
    actions.iter().map(|a| env.step(a).unwrap()).collect()
}

#[test]
fn random_steps_keep_rewards_in_range() {
    for name in ENV_NAMES {
        let mut env = make_env(name, 3).unwrap();
        let mut rng = stream_rng(3, Stream::Explore);
        env.reset();
        let bound = env.action_bound() * 1.5;
        for _ in 0..10_000 {
            if env.is_done() {
                env.reset();
            }
            let a: Vec<f64> = (0..env.action_dim()).map(|_| rng.random_range(-bound..bound)).collect();
            let r = env.step(&a).unwrap();
            assert!((0.0..=1.0).contains(&r.reward), "{name}: {}", r.reward);
            assert!(r.observation.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn episode_trace_is_a_function_of_name_seed_and_actions() {
    let mut rng = stream_rng(4, Stream::Explore);
    for name in ENV_NAMES {
        let dim = make_env(name, 0).unwrap().action_dim();
        let actions: Vec<Vec<f64>> = (0..500).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = trace(name, 9, &actions);
        let b = trace(name, 9, &actions);
        assert_eq!(a, b);
        assert!(a.last().unwrap().done);
        assert!(a[..499].iter().all(|s| !s.done));
    }
}

#[test]
fn image_mode_is_deterministic_and_bounded() {
    for name in ENV_NAMES {
        let mut env = make_env(name, 5).unwrap().with_mode(ObservationMode::Image).unwrap();
        let first = env.reset();
        assert_eq!(first.len(), 64);
        let r = env.step(&vec![0.5; env.action_dim()]).unwrap();
        assert!(r.observation.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rewards_in_range_for_random_policies(seed in 0u64..1000, env_idx in 0usize..2, scale in 0.1f64..5.0) {
        let name = ENV_NAMES[env_idx];
        let mut env = make_env(name, seed).unwrap();
        env.reset();
        let mut rng = stream_rng(seed, Stream::Explore);
        for _ in 0..200 {
            let a: Vec<f64> = (0..env.action_dim()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let r = env.step(&a).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.reward));
        }
    }

    #[test]
    fn exploration_noise_stays_in_bounds(x in -3.0f64..3.0, sigma in 0.0f64..2.0, seed in 0u64..100) {
        let mut rng = stream_rng(seed, Stream::Explore);
        let out = exploration_noise(&[x, -x], sigma, 2.0, &mut rng);
        prop_assert!(out.iter().all(|v| v.abs() <= 2.0));
    }
}
