#![allow(dead_code)]

use bird_core::bird::{Learner, UpdateConfig, Variant, VariantSelector};
use bird_core::rng::{normal_array, stream_rng, Stream, StreamRng};
use bird_core::worldmodel::{ImaginationModel, Latent, LatentState, ModelDims, SequenceBatch};
use diffcore::{Array, Result, Tape, Var};
use ndarray::{Array2, Array3};
use rand::Rng;

pub fn small_dims() -> ModelDims {
    ModelDims {
        obs: 3,
        action: 1,
        deter: 8,
        stoch: 4,
        hidden: 8,
        std_floor: 1e-4,
    }
}

pub fn random_batch(rng: &mut StreamRng, b: usize, l: usize, dims: &ModelDims) -> SequenceBatch {
    let obs = Array3::from_shape_simple_fn((b, l, dims.obs), || rng.random_range(-1.0..1.0));
    let act = Array3::from_shape_simple_fn((b, l, dims.action), || rng.random_range(-1.0..1.0));
    let rew = Array2::from_shape_simple_fn((b, l), || rng.random_range(0.0..1.0));
    SequenceBatch::new(obs, act, rew).unwrap()
}

pub fn random_latents(rng: &mut StreamRng, n: usize, dims: &ModelDims) -> LatentState {
    LatentState {
        deterministic: normal_array(rng, n, dims.deter).mapv(|x| 0.5 * x),
        stoch_mean: normal_array(rng, n, dims.stoch),
        stoch_std: Array::ones((n, dims.stoch)),
        stoch_sample: normal_array(rng, n, dims.stoch),
    }
}

pub fn small_learner(seed: u64) -> Learner {
    Learner::new(small_dims(), 2.0, &mut stream_rng(seed, Stream::Init))
}

pub fn update_config(variant: Variant, w_mi: f64, alpha_soft: f64) -> UpdateConfig {
    UpdateConfig {
        beta: 1.0,
        gamma: 0.99,
        lambda: 0.95,
        horizon: 3,
        model_lr: 6e-4,
        actor_lr: 8e-5,
        value_lr: 8e-5,
        grad_clip: 100.0,
        selector: VariantSelector::new(variant, w_mi, alpha_soft).unwrap(),
        unit_confidence: false,
    }
}

/// One-dimensional latent with `s' = s + a` and reward `r = s` (or zero).
pub struct ToyModel {
    pub zero_reward: bool,
}

impl ImaginationModel for ToyModel {
    fn imagine_step(&self, tape: &mut Tape, prev: &Latent, action: Var, _noise: &Array) -> Result<Latent> {
        let sample = tape.add(prev.sample, action)?;
        let rows = tape.shape(sample).0;
        Ok(Latent {
            deter: prev.deter,
            mean: sample,
            std: tape.constant(Array::ones((rows, 1))),
            sample,
        })
    }

    fn predict_reward(&self, tape: &mut Tape, latent: &Latent) -> Result<Var> {
        if self.zero_reward {
            tape.scale(latent.sample, 0.0)
        } else {
            Ok(latent.sample)
        }
    }
}

pub fn toy_seeds(tape: &mut Tape, samples: &[f64]) -> Latent {
    let n = samples.len();
    let s = Array::from_shape_vec((n, 1), samples.to_vec()).unwrap();
    Latent {
        deter: tape.constant(Array::zeros((n, 1))),
        mean: tape.constant(s.clone()),
        std: tape.constant(Array::ones((n, 1))),
        sample: tape.constant(s),
    }
}

/// `Σ_k (1-λ)λ^{k-1} G_k + λ^{H-x-1} G_{H-x}` with explicit k-step returns.
pub fn brute_force_lambda(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = rewards.len();
    let k_step = |x: usize, k: usize| {
        let mut g = 0.0;
        for i in 0..k {
            g += gamma.powi(i as i32) * rewards[x + i];
        }
        g + gamma.powi(k as i32) * values[x + k]
    };
    (0..h)
        .map(|x| {
            let n = h - x;
            let mut total = 0.0;
            for k in 1..n {
                total += (1.0 - lambda) * lambda.powi(k as i32 - 1) * k_step(x, k);
            }
            total + lambda.powi(n as i32 - 1) * k_step(x, n)
        })
        .collect()
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (diff {})", (a - b).abs());
}
