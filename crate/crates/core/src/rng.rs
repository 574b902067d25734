//! Seeded random streams.
//!
//! Each consumer of randomness draws from its own ChaCha8 stream derived from
//! the run seed, so adding draws in one place never shifts another.

use diffcore::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stream {
    Init,
    Env,
    Explore,
    Buffer,
    Model,
    Imagine,
    Act,
    Diagnostics,
    Eval,
}

impl Stream {
    pub const ALL: [Stream; 9] = [
        Stream::Init,
        Stream::Env,
        Stream::Explore,
        Stream::Buffer,
        Stream::Model,
        Stream::Imagine,
        Stream::Act,
        Stream::Diagnostics,
        Stream::Eval,
    ];

    pub fn id(self) -> u64 {
        self as u64 + 1
    }
}

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Serializable position of one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl StreamState {
    pub fn capture(rng: &StreamRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct RngStreams {
    rngs: Vec<StreamRng>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            rngs: Stream::ALL.iter().map(|&s| stream_rng(seed, s)).collect(),
        }
    }

    pub fn get(&mut self, s: Stream) -> &mut StreamRng {
        &mut self.rngs[s as usize]
    }

    pub fn states(&self) -> Vec<StreamState> {
        self.rngs.iter().map(StreamState::capture).collect()
    }

    pub fn from_states(states: &[StreamState]) -> Option<Self> {
        if states.len() != Stream::ALL.len() {
            return None;
        }
        Some(Self {
            rngs: states.iter().map(StreamState::restore).collect(),
        })
    }
}

pub fn normal_array(rng: &mut StreamRng, rows: usize, cols: usize) -> Array {
    Array::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
