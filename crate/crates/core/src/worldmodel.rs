//! Latent world model: representation, transition, observation and reward
//! heads over a joint deterministic/stochastic latent.

use diffcore::{Array, Axis, DiffError, Result, Tape, Var};
use ndarray::{s, Array2, Array3};

use crate::nn::{Gru, Linear, Mlp, ParamSet};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub obs: usize,
    pub action: usize,
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub std_floor: f64,
}

impl ModelDims {
    pub fn feature(&self) -> usize {
        self.deter + self.stoch
    }
}

/// Latent state as plain arrays, one row per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub deterministic: Array,
    pub stoch_mean: Array,
    pub stoch_std: Array,
    pub stoch_sample: Array,
}

impl LatentState {
    /// All-zero start state. The std slot holds ones; it is never read.
    pub fn zeros(batch: usize, dims: &ModelDims) -> Self {
        Self {
            deterministic: Array::zeros((batch, dims.deter)),
            stoch_mean: Array::zeros((batch, dims.stoch)),
            stoch_std: Array::ones((batch, dims.stoch)),
            stoch_sample: Array::zeros((batch, dims.stoch)),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.deterministic.nrows()
    }

    pub fn features(&self) -> Array {
        ndarray::concatenate![ndarray::Axis(1), self.deterministic, self.stoch_sample]
    }

    /// Places the state on a tape as constants.
    pub fn on_tape(&self, tape: &mut Tape) -> Latent {
        Latent {
            deter: tape.constant(self.deterministic.clone()),
            mean: tape.constant(self.stoch_mean.clone()),
            std: tape.constant(self.stoch_std.clone()),
            sample: tape.constant(self.stoch_sample.clone()),
        }
    }
}

/// Latent state living on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Latent {
    pub deter: Var,
    pub mean: Var,
    pub std: Var,
    pub sample: Var,
}

impl Latent {
    pub fn state(&self, tape: &Tape) -> LatentState {
        LatentState {
            deterministic: tape.value(self.deter).clone(),
            stoch_mean: tape.value(self.mean).clone(),
            stoch_std: tape.value(self.std).clone(),
            stoch_sample: tape.value(self.sample).clone(),
        }
    }

    /// `[deterministic, stoch_sample]`, the input every head reads.
    pub fn features(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat(Axis::Cols, &[self.deter, self.sample])
    }

    pub fn detach(&self, tape: &mut Tape) -> Result<Latent> {
        Ok(Latent {
            deter: tape.stop_gradient(self.deter)?,
            mean: tape.stop_gradient(self.mean)?,
            std: tape.stop_gradient(self.std)?,
            sample: tape.stop_gradient(self.sample)?,
        })
    }

    pub fn concat_rows(tape: &mut Tape, parts: &[Latent]) -> Result<Latent> {
        let field = |tape: &mut Tape, f: fn(&Latent) -> Var| {
            let vars: Vec<Var> = parts.iter().map(f).collect();
            tape.concat(Axis::Rows, &vars)
        };
        Ok(Latent {
            deter: field(tape, |l| l.deter)?,
            mean: field(tape, |l| l.mean)?,
            std: field(tape, |l| l.std)?,
            sample: field(tape, |l| l.sample)?,
        })
    }
}

/// Diagonal Gaussian parameters on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gaussian {
    pub mean: Var,
    pub std: Var,
}

/// Real experience segments: `observations[b, t]` is seen after taking
/// `actions[b, t]` and receiving `rewards[b, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    observations: Array3<f64>,
    actions: Array3<f64>,
    rewards: Array2<f64>,
}

impl SequenceBatch {
    pub fn new(observations: Array3<f64>, actions: Array3<f64>, rewards: Array2<f64>) -> Result<Self> {
        let (b, l, _) = observations.dim();
        let (ab, al, _) = actions.dim();
        if (ab, al) != (b, l) || rewards.dim() != (b, l) {
            return Err(DiffError::InvalidArgument(format!(
                "batch leading dims disagree: obs {:?}, actions {:?}, rewards {:?}",
                observations.dim(),
                actions.dim(),
                rewards.dim()
            )));
        }
        if rewards.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(DiffError::InvalidArgument("rewards must lie in [0, 1]".into()));
        }
        if observations.iter().chain(actions.iter()).any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite("sequence batch".into()));
        }
        Ok(Self {
            observations,
            actions,
            rewards,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.observations.dim().0
    }

    pub fn length(&self) -> usize {
        self.observations.dim().1
    }

    pub fn observations(&self) -> &Array3<f64> {
        &self.observations
    }

    pub fn actions(&self) -> &Array3<f64> {
        &self.actions
    }

    pub fn rewards(&self) -> &Array2<f64> {
        &self.rewards
    }

    pub fn obs_at(&self, t: usize) -> Array {
        self.observations.slice(s![.., t, ..]).to_owned()
    }

    pub fn action_at(&self, t: usize) -> Array {
        self.actions.slice(s![.., t, ..]).to_owned()
    }

    pub fn reward_at(&self, t: usize) -> Array {
        self.rewards.slice(s![.., t..t + 1]).to_owned()
    }

    /// Time-major stacking of `obs_at(0..L)`: row `t * B + b`.
    fn stacked(&self, f: impl Fn(usize) -> Array) -> Array {
        let parts: Vec<Array> = (0..self.length()).map(f).collect();
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform step shapes")
    }
}

/// What the dynamics must provide for imagination rollouts.
pub trait ImaginationModel {
    fn imagine_step(&self, tape: &mut Tape, prev: &Latent, action: Var, noise: &Array) -> Result<Latent>;
    fn predict_reward(&self, tape: &mut Tape, latent: &Latent) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
struct ModelLayout {
    encoder: Mlp,
    img_in: Linear,
    gru: Gru,
    prior: Mlp,
    posterior: Mlp,
    decoder: Mlp,
    reward: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    dims: ModelDims,
    params: ParamSet,
    layout: ModelLayout,
}

pub const MODEL_GROUPS: [&str; 7] = ["encoder", "img_in", "gru", "prior", "posterior", "decoder", "reward"];

impl WorldModel {
    pub fn new(dims: ModelDims, rng: &mut StreamRng) -> Self {
        let h = dims.hidden;
        let mut p = ParamSet::new();
        let layout = ModelLayout {
            encoder: Mlp::new(&mut p, "encoder", &[dims.obs, h, h, h], rng),
            img_in: Linear::new(&mut p, "img_in", dims.stoch + dims.action, h, rng),
            gru: Gru::new(&mut p, "gru", h, dims.deter, rng),
            prior: Mlp::new(&mut p, "prior", &[dims.deter, h, 2 * dims.stoch], rng),
            posterior: Mlp::new(&mut p, "posterior", &[dims.deter + h, h, 2 * dims.stoch], rng),
            decoder: Mlp::new(&mut p, "decoder", &[dims.feature(), h, h, dims.obs], rng),
            reward: Mlp::new(&mut p, "reward", &[dims.feature(), h, h, 1], rng),
        };
        Self {
            dims,
            params: p,
            layout,
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel<'_> {
        BoundModel {
            model: self,
            vars: self.params.bind(tape, trainable),
        }
    }

    /// Makes the posterior head ignore the observation embedding and
    /// reproduce the prior head exactly.
    pub fn tie_posterior_to_prior(&mut self) {
        let d = self.dims.deter;
        let prior = self.layout.prior.clone();
        let post = self.layout.posterior.clone();
        let arrays = self.params.arrays_mut();
        for (i, (pl, ql)) in prior.layers.iter().zip(&post.layers).enumerate() {
            let w = arrays[pl.w].clone();
            let b = arrays[pl.b].clone();
            let qw = &mut arrays[ql.w];
            if i == 0 {
                qw.fill(0.0);
                qw.slice_mut(s![0..d, ..]).assign(&w);
            } else {
                qw.assign(&w);
            }
            arrays[ql.b].assign(&b);
        }
    }
}

/// A world model whose parameters sit on a particular tape.
pub struct BoundModel<'a> {
    pub model: &'a WorldModel,
    pub vars: Vec<Var>,
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite(what.to_string()))
    }
}

impl BoundModel<'_> {
    fn layout(&self) -> &ModelLayout {
        &self.model.layout
    }

    pub fn dims(&self) -> &ModelDims {
        &self.model.dims
    }

    /// Recurrent advance shared by the representation and transition models.
    pub fn deter_step(&self, tape: &mut Tape, prev: &Latent, action: Var) -> Result<Var> {
        let x = tape.concat(Axis::Cols, &[prev.sample, action])?;
        let x = self.layout().img_in.forward(tape, &self.vars, x)?;
        let x = tape.elu(x)?;
        self.layout().gru.forward(tape, &self.vars, x, prev.deter)
    }

    fn split_stats(&self, tape: &mut Tape, raw: Var) -> Result<Gaussian> {
        let s = self.dims().stoch;
        let mean = tape.slice_cols(raw, 0, s)?;
        let pre = tape.slice_cols(raw, s, 2 * s)?;
        let sp = tape.softplus(pre)?;
        let std = tape.offset(sp, self.dims().std_floor)?;
        Ok(Gaussian { mean, std })
    }

    pub fn prior_head(&self, tape: &mut Tape, deter: Var) -> Result<Gaussian> {
        let raw = self.layout().prior.forward(tape, &self.vars, deter)?;
        self.split_stats(tape, raw)
    }

    pub fn posterior_head(&self, tape: &mut Tape, deter: Var, embed: Var) -> Result<Gaussian> {
        let x = tape.concat(Axis::Cols, &[deter, embed])?;
        let raw = self.layout().posterior.forward(tape, &self.vars, x)?;
        self.split_stats(tape, raw)
    }

    pub fn encode(&self, tape: &mut Tape, obs: Var) -> Result<Var> {
        self.layout().encoder.forward(tape, &self.vars, obs)
    }

    fn posterior_from(&self, tape: &mut Tape, deter: Var, embed: Var, noise: &Array) -> Result<Latent> {
        let post = self.posterior_head(tape, deter, embed)?;
        let sample = tape.gaussian_sample(post.mean, post.std, noise.clone())?;
        Ok(Latent {
            deter,
            mean: post.mean,
            std: post.std,
            sample,
        })
    }

    /// Posterior latent `s_t ~ p(s_t | s_{t-1}, a_{t-1}, o_t)`.
    pub fn represent(&self, tape: &mut Tape, prev: &Latent, action: Var, obs: Var, noise: &Array) -> Result<Latent> {
        check_finite(tape, obs, "observation")?;
        check_finite(tape, action, "action")?;
        let deter = self.deter_step(tape, prev, action)?;
        let embed = self.encode(tape, obs)?;
        self.posterior_from(tape, deter, embed, noise)
    }

    /// Predicted observation mean for each row of `latent`.
    pub fn decode_observation(&self, tape: &mut Tape, latent: &Latent) -> Result<Var> {
        let f = latent.features(tape)?;
        self.layout().decoder.forward(tape, &self.vars, f)
    }

    /// Runs the representation model over a batch of segments. `noises[t]`
    /// is the `B x D_s` reparameterization noise for step `t`.
    pub fn observe_sequence(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        init: &LatentState,
        noises: &[Array],
    ) -> Result<Observation> {
        let (b, l) = (batch.batch_size(), batch.length());
        if l == 0 {
            return Err(DiffError::InvalidArgument("sequence length must be at least 1".into()));
        }
        if noises.len() != l || init.batch_size() != b {
            return Err(DiffError::InvalidArgument(format!(
                "observe_sequence: {} noise arrays / init batch {} for B={b}, L={l}",
                noises.len(),
                init.batch_size()
            )));
        }
        let obs_all = tape.constant(batch.stacked(|t| batch.obs_at(t)));
        let embed_all = self.encode(tape, obs_all)?;

        let mut prev = init.on_tape(tape);
        let mut posteriors = Vec::with_capacity(l);
        let mut priors = Vec::with_capacity(l);
        for (t, noise) in noises.iter().enumerate() {
            let action = tape.constant(batch.action_at(t));
            let deter = self.deter_step(tape, &prev, action)?;
            let prior = self.prior_head(tape, deter)?;
            let embed = tape.slice_rows(embed_all, t * b, (t + 1) * b)?;
            let post = self.posterior_from(tape, deter, embed, noise)?;
            posteriors.push(post);
            priors.push(prior);
            prev = post;
        }
        Ok(Observation { posteriors, priors })
    }

    /// Negated VAE-style objective, averaged over `B * L` steps.
    pub fn model_loss(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        observed: &Observation,
        beta: f64,
    ) -> Result<ModelLoss> {
        if !(beta >= 0.0) {
            return Err(DiffError::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        let rows = batch.batch_size() * batch.length();
        let post = Latent::concat_rows(tape, &observed.posteriors)?;
        let prior_mean = {
            let v: Vec<Var> = observed.priors.iter().map(|p| p.mean).collect();
            tape.concat(Axis::Rows, &v)?
        };
        let prior_std = {
            let v: Vec<Var> = observed.priors.iter().map(|p| p.std).collect();
            tape.concat(Axis::Rows, &v)?
        };

        let feats = post.features(tape)?;
        let obs_pred = self.layout().decoder.forward(tape, &self.vars, feats)?;
        let rew_pred = self.layout().reward.forward(tape, &self.vars, feats)?;
        let obs = tape.constant(batch.stacked(|t| batch.obs_at(t)));
        let rew = tape.constant(batch.stacked(|t| batch.reward_at(t)));
        let unit_o = tape.constant(Array::ones((rows, self.dims().obs)));
        let unit_r = tape.constant(Array::ones((rows, 1)));

        let logp_o = tape.gaussian_log_density(obs, obs_pred, unit_o)?;
        let logp_r = tape.gaussian_log_density(rew, rew_pred, unit_r)?;
        let kl = tape.gaussian_kl(post.mean, post.std, prior_mean, prior_std)?;

        let ll = tape.add(logp_o, logp_r)?;
        let penalty = tape.scale(kl, -beta)?;
        let per_step = tape.add(ll, penalty)?;
        let objective = tape.mean(per_step)?;
        let loss = tape.neg(objective)?;

        let mean_of = |v: Var| tape.value(v).mean().unwrap_or(0.0);
        let out = ModelLoss {
            loss,
            obs_nll: -mean_of(logp_o),
            reward_nll: -mean_of(logp_r),
            kl: mean_of(kl),
        };
        if !tape.scalar_value(loss).is_finite() {
            return Err(DiffError::NonFinite("model loss".into()));
        }
        Ok(out)
    }

    /// Mean squared distance between `k`-step open-loop prior means, rolled
    /// with zero noise and the recorded actions from every posterior start,
    /// and the posterior means at the matching steps.
    pub fn latent_prediction_error(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        observed: &Observation,
        k: usize,
    ) -> Result<f64> {
        let (b, l) = (batch.batch_size(), batch.length());
        if k == 0 || k >= l {
            return Err(DiffError::InvalidArgument(format!("horizon k={k} must satisfy 1 <= k < L={l}")));
        }
        let starts = l - k;
        let seeds: Vec<Latent> = observed.posteriors[..starts].to_vec();
        let mut latent = Latent::concat_rows(tape, &seeds)?;
        let zero = Array::zeros((starts * b, self.dims().stoch));
        for j in 1..=k {
            let parts: Vec<Array> = (0..starts).map(|t| batch.action_at(t + j)).collect();
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            let actions = ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform action shapes");
            let action = tape.constant(actions);
            latent = self.imagine_step(tape, &latent, action, &zero)?;
        }
        let targets: Vec<Var> = observed.posteriors[k..].iter().map(|p| p.mean).collect();
        let target = tape.concat(Axis::Rows, &targets)?;
        let diff = tape.sub(latent.mean, target)?;
        let sq = tape.square(diff)?;
        Ok(tape.value(sq).sum() / (starts * b) as f64)
    }
}

impl ImaginationModel for BoundModel<'_> {
    /// Prior latent `s_t ~ p(s_t | s_{t-1}, a_{t-1})`.
    fn imagine_step(&self, tape: &mut Tape, prev: &Latent, action: Var, noise: &Array) -> Result<Latent> {
        check_finite(tape, action, "action")?;
        let deter = self.deter_step(tape, prev, action)?;
        let prior = self.prior_head(tape, deter)?;
        let sample = tape.gaussian_sample(prior.mean, prior.std, noise.clone())?;
        Ok(Latent {
            deter,
            mean: prior.mean,
            std: prior.std,
            sample,
        })
    }

    fn predict_reward(&self, tape: &mut Tape, latent: &Latent) -> Result<Var> {
        let f = latent.features(tape)?;
        self.layout().reward.forward(tape, &self.vars, f)
    }
}

/// Posterior latents and matched prior parameters, one entry per step.
#[derive(Clone, Debug)]
pub struct Observation {
    pub posteriors: Vec<Latent>,
    pub priors: Vec<Gaussian>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelLoss {
    pub loss: Var,
    pub obs_nll: f64,
    pub reward_nll: f64,
    pub kl: f64,
}
