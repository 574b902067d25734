//! Versioned binary container for a training run.
//!
//! Layout, all integers little-endian:
//! `BIRDCKPT` | u32 version | u64 len + config TOML |
//! u32 n + n × (name, u64) counters |
//! u32 n + n × (name, u8 dtype = 0, u64 rows, u64 cols, rows·cols f64) arrays |
//! u32 n + n × ([u8; 32] seed, u64 stream, u128 word position) RNG streams |
//! SHA-256 of everything before it. Names are u32 length + UTF-8.

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Result};
use crate::rng::StreamState;

pub const MAGIC: &[u8; 8] = b"BIRDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub counters: Vec<(String, u64)>,
    pub arrays: Vec<(String, Array2<f64>)>,
    pub rng: Vec<StreamState>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, bytes_per_item: usize, count: u64) -> std::result::Result<usize, CheckpointError> {
        let n = usize::try_from(count).map_err(|_| CheckpointError::Truncated)?;
        if n.checked_mul(bytes_per_item).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(CheckpointError::Truncated);
        }
        Ok(n)
    }

    fn string(&mut self, count: u64) -> std::result::Result<String, CheckpointError> {
        let n = self.len(1, count)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
    }

    fn name(&mut self) -> std::result::Result<String, CheckpointError> {
        let n = self.u32()?;
        self.string(n as u64)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (name, v) in &self.counters {
            put_name(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            put_name(&mut out, name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.rng.len() as u32).to_le_bytes());
        for s in &self.rng {
            out.extend_from_slice(&s.seed);
            out.extend_from_slice(&s.stream.to_le_bytes());
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n = r.u64()?;
        let config = r.string(n)?;

        let n = r.u32()?;
        let mut counters = Vec::new();
        for _ in 0..n {
            let name = r.name()?;
            counters.push((name, r.u64()?));
        }

        let n = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..n {
            let name = r.name()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::Malformed(format!("array '{name}' has unknown dtype {dtype}")));
            }
            let rows = r.u64()?;
            let cols = r.u64()?;
            let count = rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?;
            let count = r.len(8, count)?;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(r.array()?));
            }
            let a = Array2::from_shape_vec((rows as usize, cols as usize), data)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            arrays.push((name, a));
        }

        let n = r.u32()?;
        let mut rng = Vec::new();
        for _ in 0..n {
            let seed = r.array::<32>()?;
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.array()?);
            rng.push(StreamState { seed, stream, word_pos });
        }

        let body = r.pos;
        let rest = bytes.len() - body;
        if rest < DIGEST_LEN {
            return Err(CheckpointError::Truncated);
        }
        if rest > DIGEST_LEN {
            return Err(CheckpointError::TrailingBytes(rest - DIGEST_LEN));
        }
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(CheckpointError::ChecksumMismatch);
        }
        Ok(Self {
            config,
            counters,
            arrays,
            rng,
        })
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a half-written checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn counter(&self, name: &str) -> std::result::Result<u64, CheckpointError> {
        self.counters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn array(&self, name: &str) -> std::result::Result<&Array2<f64>, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn shaped(&self, name: &str, expected: (usize, usize)) -> std::result::Result<&Array2<f64>, CheckpointError> {
        let a = self.array(name)?;
        if a.dim() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected,
                found: a.dim(),
            });
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "seed = 3\n".into(),
            counters: vec![("episode".into(), 7)],
            arrays: vec![
                ("a".into(), Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.1 * j as f64)),
                ("empty".into(), Array2::zeros((0, 4))),
            ],
            rng: vec![StreamState::capture(&stream_rng(1, Stream::Act))],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.counter("episode").unwrap(), 7);
        assert!(matches!(back.shaped("a", (3, 2)), Err(CheckpointError::ShapeMismatch { .. })));
        assert!(matches!(back.array("b"), Err(CheckpointError::MissingArray(_))));
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        for cut in [1, 10, 32, 33, bytes.len() - 20] {
            assert_eq!(
                Checkpoint::from_bytes(&bytes[..bytes.len() - cut]),
                Err(CheckpointError::Truncated),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert_eq!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::ChecksumMismatch));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(Checkpoint::from_bytes(&extra), Err(CheckpointError::TrailingBytes(1)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert_eq!(
            Checkpoint::from_bytes(&v),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        );
        assert_eq!(Checkpoint::from_bytes(b"NOTACKPT"), Err(CheckpointError::BadMagic));
    }
}
