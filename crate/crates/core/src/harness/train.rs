use std::path::{Path, PathBuf};
use std::time::Instant;

use diffcore::{Array, DiffError, OptimizerState, Tape};

use super::buffer::{Episode, EpisodeBuilder, ReplayBuffer};
use super::checkpoint::Checkpoint;
use super::config::{RunConfig, LATENT_ERROR_HORIZONS};
use super::metrics::{MetricsRecord, MetricsWriter, METRICS_HEADER};
use crate::agent::sample_action;
use crate::bird::{combined_update, Learner, UpdateMetrics};
use crate::envs::{exploration_noise, make_env, Env, ACTION_REPEAT};
use crate::error::{BirdError, CheckpointError, Result};
use crate::nn::ParamSet;
use crate::rng::{normal_array, stream_rng, RngStreams, Stream, StreamRng, StreamState};
use crate::worldmodel::{LatentState, SequenceBatch};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "final.ckpt";

/// Filters the latent with the new observation and picks the next action.
/// `None` noise means posterior mean and mean action.
pub fn agent_step(
    learner: &Learner,
    prev: &LatentState,
    prev_action: &[f64],
    obs: &[f64],
    noise: Option<(&Array, &Array)>,
) -> Result<(LatentState, Vec<f64>)> {
    let dims = *learner.dims();
    let (latent_noise, action_noise) = match noise {
        Some((l, a)) => (l.clone(), a.clone()),
        None => (Array::zeros((1, dims.stoch)), Array::zeros((1, dims.action))),
    };
    let mut tape = Tape::new();
    let bm = learner.model.bind(&mut tape, false);
    let bp = learner.policy.bind(&mut tape, false);
    let prev = prev.on_tape(&mut tape);
    let a = tape.constant(Array::from_shape_vec((1, prev_action.len()), prev_action.to_vec()).expect("row"));
    let o = tape.constant(Array::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row"));
    let latent = bm.represent(&mut tape, &prev, a, o, &latent_noise)?;
    let dist = bp.distribution(&mut tape, &latent)?;
    let action = sample_action(&mut tape, &dist, &action_noise)?;
    Ok((latent.state(&tape), tape.value(action).iter().copied().collect()))
}

/// Returns of a uniformly random policy.
pub fn random_policy_returns(env_name: &str, episodes: usize, seed: u64, episode_steps: usize) -> Result<Vec<f64>> {
    let mut env = make_env(env_name, seed)?.with_limit(episode_steps);
    let mut rng = stream_rng(seed, Stream::Explore);
    (0..episodes).map(|_| random_episode(&mut env, &mut rng).map(|e| e.total_reward())).collect()
}

fn random_episode(env: &mut Env, rng: &mut StreamRng) -> Result<Episode> {
    use rand::Rng;
    let bound = env.action_bound();
    let obs = env.reset();
    let mut b = EpisodeBuilder::new(&obs, env.action_dim());
    loop {
        let action: Vec<f64> = (0..env.action_dim()).map(|_| rng.random_range(-bound..=bound)).collect();
        let r = env.step(&action)?;
        b.push(&action, r.reward, &r.observation);
        if r.done {
            return b.finish();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalSummary {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { returns, mean, std }
    }
}

/// Runs the mean action with noiseless latents on fresh episodes.
pub fn evaluate(learner: &Learner, config: &RunConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(BirdError::InvalidInput("evaluation needs at least one episode".into()));
    }
    let mut env = make_env(&config.env, seed)?
        .with_limit(config.episode_steps)
        .with_mode(config.observation_mode)?;
    let dims = learner.dims();
    if env.obs_dim() != dims.obs || env.action_dim() != dims.action {
        return Err(BirdError::InvalidInput(format!(
            "model expects obs/action dims {}/{}, env '{}' has {}/{}",
            dims.obs,
            dims.action,
            config.env,
            env.obs_dim(),
            env.action_dim()
        )));
    }
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut latent = LatentState::zeros(1, dims);
        let mut prev_action = vec![0.0; dims.action];
        let mut total = 0.0;
        loop {
            let (next, action) = agent_step(learner, &latent, &prev_action, &obs, None)?;
            let r = env.step(&action)?;
            total += r.reward;
            latent = next;
            prev_action = action;
            obs = r.observation;
            if r.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalSummary::from_returns(returns))
}

pub fn evaluate_checkpoint(path: &Path, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let trainer = Trainer::load(path)?;
    evaluate(trainer.learner(), trainer.config(), episodes, seed)
}

/// The training loop: `C` combined updates, then one exploratory episode.
pub struct Trainer {
    config: RunConfig,
    learner: Learner,
    buffer: ReplayBuffer,
    streams: RngStreams,
    env: Env,
    episode: usize,
    env_steps: usize,
}

fn mean_metrics(sum: &UpdateMetrics, n: usize) -> UpdateMetrics {
    let k = n.max(1) as f64;
    UpdateMetrics {
        model_loss: sum.model_loss / k,
        obs_nll: sum.obs_nll / k,
        reward_nll: sum.reward_nll / k,
        kl: sum.kl / k,
        policy_objective: sum.policy_objective / k,
        value_loss: sum.value_loss / k,
        entropy: sum.entropy / k,
        confidence: sum.confidence / k,
        max_weight: sum.max_weight / k,
    }
}

fn accumulate(sum: &mut UpdateMetrics, m: &UpdateMetrics) {
    sum.model_loss += m.model_loss;
    sum.obs_nll += m.obs_nll;
    sum.reward_nll += m.reward_nll;
    sum.kl += m.kl;
    sum.policy_objective += m.policy_objective;
    sum.value_loss += m.value_loss;
    sum.entropy += m.entropy;
    sum.confidence += m.confidence;
    sum.max_weight += m.max_weight;
}

fn divergence(episode: usize, err: BirdError) -> BirdError {
    match err {
        BirdError::NonFinite(reason) | BirdError::Diff(DiffError::NonFinite(reason)) => {
            BirdError::Divergence { episode, reason }
        }
        other => other,
    }
}

impl Trainer {
    /// Builds networks and environment and prefills the buffer with
    /// random-agent episodes.
    pub fn new(config: RunConfig) -> Result<Self> {
        let mut t = Self::build(config)?;
        let mut rng = t.streams.get(Stream::Explore).clone();
        for _ in 0..t.config.prefill_episodes {
            let e = random_episode(&mut t.env, &mut rng)?;
            t.env_steps += (e.len() - 1) * ACTION_REPEAT;
            t.buffer.add(e)?;
        }
        *t.streams.get(Stream::Explore) = rng;
        Ok(t)
    }

    fn build(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let env = make_env(&config.env, config.seed)?
            .with_limit(config.episode_steps)
            .with_mode(config.observation_mode)?;
        let mut streams = RngStreams::new(config.seed);
        let dims = config.model_dims(env.obs_dim(), env.action_dim());
        let learner = Learner::new(dims, env.action_bound(), streams.get(Stream::Init));
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            config,
            learner,
            streams,
            env,
            episode: 0,
            env_steps: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn is_finished(&self) -> bool {
        self.episode >= self.config.total_episodes
    }

    /// Changes the episode budget, e.g. to extend a resumed run.
    pub fn set_total_episodes(&mut self, total: usize) {
        self.config.total_episodes = total;
    }

    /// One outer iteration: `C` updates, one environment episode, one
    /// diagnostic pass.
    pub fn run_episode(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let index = self.episode + 1;
        let ucfg = self.config.update_config();
        let mut sum = UpdateMetrics::default();
        for _ in 0..self.config.learn_steps {
            let batch = self
                .buffer
                .sample(self.config.batch_size, self.config.seq_len, self.streams.get(Stream::Buffer))?;
            let m = combined_update(&mut self.learner, &batch, &ucfg, &mut self.streams)
                .map_err(|e| divergence(index, e))?;
            accumulate(&mut sum, &m);
        }
        let stats = mean_metrics(&sum, self.config.learn_steps);

        let episode = self.collect_episode()?;
        let episode_return = episode.total_reward();
        self.env_steps += (episode.len() - 1) * ACTION_REPEAT;
        self.buffer.add(episode)?;
        self.episode = index;

        let latent_error = self.latent_errors()?;
        Ok(MetricsRecord {
            episode: index,
            env_steps: self.env_steps,
            episode_return,
            model_loss: stats.model_loss,
            policy_objective: stats.policy_objective,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            confidence: stats.confidence,
            latent_error,
            wall_clock: start.elapsed().as_secs_f64(),
        })
    }

    fn collect_episode(&mut self) -> Result<Episode> {
        let dims = *self.learner.dims();
        let bound = self.env.action_bound();
        let mut obs = self.env.reset();
        let mut builder = EpisodeBuilder::new(&obs, dims.action);
        let mut latent = LatentState::zeros(1, &dims);
        let mut prev_action = vec![0.0; dims.action];
        loop {
            let rng = self.streams.get(Stream::Act);
            let ln = normal_array(rng, 1, dims.stoch);
            let an = normal_array(rng, 1, dims.action);
            let (next, action) = agent_step(&self.learner, &latent, &prev_action, &obs, Some((&ln, &an)))?;
            let action = exploration_noise(&action, self.config.explore_sigma, bound, self.streams.get(Stream::Explore));
            let r = self.env.step(&action)?;
            builder.push(&action, r.reward, &r.observation);
            latent = next;
            prev_action = action;
            obs = r.observation;
            if r.done {
                return builder.finish();
            }
        }
    }

    /// Open-loop latent error at each diagnostic horizon on a fresh sample;
    /// NaN where the horizon does not fit in a segment.
    fn latent_errors(&mut self) -> Result<[f64; 3]> {
        let (b, l) = (self.config.diag_batch, self.config.seq_len);
        let batch: SequenceBatch = self.buffer.sample(b, l, self.streams.get(Stream::Diagnostics))?;
        let dims = *self.learner.dims();
        let noises: Vec<Array> = (0..l)
            .map(|_| normal_array(self.streams.get(Stream::Diagnostics), b, dims.stoch))
            .collect();
        let mut tape = Tape::new();
        let bm = self.learner.model.bind(&mut tape, false);
        let observed = bm.observe_sequence(&mut tape, &batch, &LatentState::zeros(b, &dims), &noises)?;
        let mut out = [f64::NAN; 3];
        for (slot, &k) in out.iter_mut().zip(&LATENT_ERROR_HORIZONS) {
            if k < l {
                *slot = bm.latent_prediction_error(&mut tape, &batch, &observed, k)?;
            }
        }
        Ok(out)
    }

    /// Runs until the episode budget is spent, writing each record.
    pub fn train(&mut self, mut writer: Option<&mut MetricsWriter>) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while !self.is_finished() {
            let r = self.run_episode()?;
            if let Some(w) = writer.as_deref_mut() {
                w.write(&r)?;
            }
            records.push(r);
        }
        Ok(records)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        let mut counters = vec![
            ("episode".to_string(), self.episode as u64),
            ("env_steps".to_string(), self.env_steps as u64),
            ("buffer_episodes".to_string(), self.buffer.len() as u64),
        ];
        let nets: [(&str, &ParamSet, &OptimizerState); 3] = [
            ("model", self.learner.model.params(), &self.learner.model_opt),
            ("policy", self.learner.policy.params(), &self.learner.policy_opt),
            ("value", self.learner.value.params(), &self.learner.value_opt),
        ];
        for (net, params, opt) in nets {
            for (i, name) in params.names().iter().enumerate() {
                arrays.push((format!("{net}/{name}"), params.arrays()[i].clone()));
                arrays.push((format!("{net}.m/{name}"), opt.first_moment[i].clone()));
                arrays.push((format!("{net}.v/{name}"), opt.second_moment[i].clone()));
            }
            counters.push((format!("{net}.step"), opt.step));
        }
        for (i, e) in self.buffer.episodes().enumerate() {
            arrays.push((format!("buffer/{i}/obs"), e.observations.clone()));
            arrays.push((format!("buffer/{i}/act"), e.actions.clone()));
            let r = Array::from_shape_vec((1, e.len()), e.rewards.clone()).expect("row");
            arrays.push((format!("buffer/{i}/rew"), r));
        }
        let mut rng = self.streams.states();
        rng.push(self.env.rng_state());
        Checkpoint {
            config: self.config.to_toml(),
            counters,
            arrays,
            rng,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_toml_str(&ckpt.config)?;
        let mut t = Self::build(config)?;
        let count = |n: &str| ckpt.counter(n).map(|v| v as usize);
        t.episode = count("episode")?;
        t.env_steps = count("env_steps")?;

        let learner = &mut t.learner;
        let nets: [(&str, &mut ParamSet, &mut OptimizerState); 3] = [
            ("model", learner.model.params_mut(), &mut learner.model_opt),
            ("policy", learner.policy.params_mut(), &mut learner.policy_opt),
            ("value", learner.value.params_mut(), &mut learner.value_opt),
        ];
        for (net, params, opt) in nets {
            let names = params.names().to_vec();
            for (i, name) in names.iter().enumerate() {
                let shape = params.arrays()[i].dim();
                params.arrays_mut()[i].assign(ckpt.shaped(&format!("{net}/{name}"), shape)?);
                opt.first_moment[i].assign(ckpt.shaped(&format!("{net}.m/{name}"), shape)?);
                opt.second_moment[i].assign(ckpt.shaped(&format!("{net}.v/{name}"), shape)?);
            }
            opt.step = ckpt.counter(&format!("{net}.step"))?;
        }

        for i in 0..count("buffer_episodes")? {
            let obs = ckpt.array(&format!("buffer/{i}/obs"))?.clone();
            let act = ckpt.array(&format!("buffer/{i}/act"))?.clone();
            let rew = ckpt.array(&format!("buffer/{i}/rew"))?.iter().copied().collect();
            let e = Episode::new(obs, act, rew).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            t.buffer.add(e).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }

        let n = crate::rng::Stream::ALL.len();
        if ckpt.rng.len() != n + 1 {
            return Err(CheckpointError::Malformed(format!("expected {} RNG streams, found {}", n + 1, ckpt.rng.len())).into());
        }
        t.streams = RngStreams::from_states(&ckpt.rng[..n]).expect("length checked");
        t.env.restore_rng(&ckpt.rng[n]);
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn rng_states(&self) -> Vec<StreamState> {
        self.streams.states()
    }
}

/// Trains `config` into `out`: effective config, metrics, timing sidecar and
/// the final checkpoint. With `resume`, continues from that checkpoint and
/// appends to the metrics already in `out`.
pub fn run_training(config: RunConfig, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    std::fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            t.set_total_episodes(config.total_episodes);
            t
        }
        None => Trainer::new(config)?,
    };
    std::fs::write(out.join(CONFIG_FILE), trainer.config().to_toml())?;
    let mut writer = MetricsWriter::open(out)?;
    trainer.train(Some(&mut writer))?;
    trainer.save(&out.join(CHECKPOINT_FILE))?;
    Ok(trainer)
}

/// One entry of a comparison: a label (usually the config file stem) and
/// its config.
#[derive(Clone, Debug)]
pub struct CompareRun {
    pub label: String,
    pub config: RunConfig,
}

pub const COMPARE_FILE: &str = "compare.tsv";

/// Trains every config under every seed into `out/<label>-seed<s>` and
/// merges all metrics into `out/compare.tsv`.
pub fn compare(runs: &[CompareRun], seeds: &[u64], out: &Path) -> Result<Vec<PathBuf>> {
    let mut labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != runs.len() {
        return Err(BirdError::InvalidInput("compare labels must be distinct".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut merged = format!("run\tvariant\tseed\t{}\n", METRICS_HEADER.join("\t"));
    let mut dirs = Vec::new();
    for run in runs {
        for &seed in seeds {
            let mut config = run.config.clone();
            config.seed = seed;
            let dir = out.join(format!("{}-seed{seed}", run.label));
            let _ = std::fs::remove_file(dir.join(super::metrics::METRICS_FILE));
            let _ = std::fs::remove_file(dir.join(super::metrics::TIMING_FILE));
            run_training(config.clone(), &dir, None)?;
            for r in super::metrics::read_metrics(&dir.join(super::metrics::METRICS_FILE))? {
                merged.push_str(&format!("{}\t{}\t{seed}\t{}\n", run.label, config.variant, r.to_tsv()));
            }
            dirs.push(dir);
        }
    }
    std::fs::write(out.join(COMPARE_FILE), merged)?;
    Ok(dirs)
}
