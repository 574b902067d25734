use std::collections::VecDeque;

use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::error::{BirdError, Result};
use crate::rng::StreamRng;
use crate::worldmodel::SequenceBatch;

/// One complete episode. Entry `t` holds `o_t` together with the action
/// `a_{t-1}` that led to it and the reward received for it; entry 0 has a
/// zero action and reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn new(observations: Array2<f64>, actions: Array2<f64>, rewards: Vec<f64>) -> Result<Self> {
        let n = observations.nrows();
        if actions.nrows() != n || rewards.len() != n || n == 0 {
            return Err(BirdError::Buffer(format!(
                "episode arrays disagree: {} observations, {} actions, {} rewards",
                n,
                actions.nrows(),
                rewards.len()
            )));
        }
        Ok(Self {
            observations,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Sum of rewards, excluding the zero placeholder of entry 0.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().skip(1).sum()
    }
}

/// Incrementally records an episode.
#[derive(Clone, Debug)]
pub struct EpisodeBuilder {
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    obs_dim: usize,
    action_dim: usize,
}

impl EpisodeBuilder {
    pub fn new(first_obs: &[f64], action_dim: usize) -> Self {
        Self {
            obs: first_obs.to_vec(),
            actions: vec![0.0; action_dim],
            rewards: vec![0.0],
            obs_dim: first_obs.len(),
            action_dim,
        }
    }

    pub fn push(&mut self, action: &[f64], reward: f64, obs: &[f64]) {
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        self.obs.extend_from_slice(obs);
    }

    pub fn finish(self) -> Result<Episode> {
        let n = self.rewards.len();
        let obs = Array2::from_shape_vec((n, self.obs_dim), self.obs).map_err(|e| BirdError::Buffer(e.to_string()))?;
        let act =
            Array2::from_shape_vec((n, self.action_dim), self.actions).map_err(|e| BirdError::Buffer(e.to_string()))?;
        Episode::new(obs, act, self.rewards)
    }
}

/// FIFO store of whole episodes bounded by a total step count.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
    steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity,
            steps: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Appends an episode, evicting the oldest ones until it fits.
    pub fn add(&mut self, episode: Episode) -> Result<()> {
        if episode.len() > self.capacity {
            return Err(BirdError::Buffer(format!(
                "episode of {} steps exceeds capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        if let Some(first) = self.episodes.front() {
            if first.observations.ncols() != episode.observations.ncols() || first.actions.ncols() != episode.actions.ncols() {
                return Err(BirdError::Buffer("episode dims differ from stored episodes".into()));
            }
        }
        while self.steps + episode.len() > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            self.steps -= old.len();
        }
        self.steps += episode.len();
        self.episodes.push_back(episode);
        Ok(())
    }

    /// Number of distinct `(episode, offset)` segments of length `len`.
    pub fn segment_count(&self, len: usize) -> usize {
        self.episodes.iter().map(|e| (e.len() + 1).saturating_sub(len)).sum()
    }

    /// Uniform draw over all valid segment starts.
    pub fn sample_location(&self, len: usize, rng: &mut StreamRng) -> Result<(usize, usize)> {
        let total = self.segment_count(len);
        if len == 0 || total == 0 {
            return Err(BirdError::Buffer(format!("no stored episode holds a segment of length {len}")));
        }
        let mut u = rng.random_range(0..total);
        for (i, e) in self.episodes.iter().enumerate() {
            let n = (e.len() + 1).saturating_sub(len);
            if u < n {
                return Ok((i, u));
            }
            u -= n;
        }
        unreachable!("draw below total segment count")
    }

    pub fn sample(&self, batch: usize, len: usize, rng: &mut StreamRng) -> Result<SequenceBatch> {
        let first = self.episodes.front().ok_or_else(|| BirdError::Buffer("buffer is empty".into()))?;
        let (d_o, d_a) = (first.observations.ncols(), first.actions.ncols());
        let mut obs = Array3::zeros((batch, len, d_o));
        let mut act = Array3::zeros((batch, len, d_a));
        let mut rew = Array2::zeros((batch, len));
        for b in 0..batch {
            let (i, off) = self.sample_location(len, rng)?;
            let e = &self.episodes[i];
            obs.slice_mut(s![b, .., ..]).assign(&e.observations.slice(s![off..off + len, ..]));
            act.slice_mut(s![b, .., ..]).assign(&e.actions.slice(s![off..off + len, ..]));
            for t in 0..len {
                rew[[b, t]] = e.rewards[off + t];
            }
        }
        Ok(SequenceBatch::new(obs, act, rew)?)
    }
}
