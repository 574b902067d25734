use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{BirdError, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "episode",
    "env_steps",
    "return",
    "model_loss",
    "policy_objective",
    "value_loss",
    "entropy",
    "confidence",
    "latent_error_1",
    "latent_error_5",
    "latent_error_15",
];

pub const METRICS_FILE: &str = "metrics.tsv";
pub const TIMING_FILE: &str = "timing.tsv";

/// One line per training episode. Learning statistics are means over the
/// episode's combined updates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub episode: usize,
    pub env_steps: usize,
    pub episode_return: f64,
    pub model_loss: f64,
    pub policy_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub confidence: f64,
    pub latent_error: [f64; 3],
    pub wall_clock: f64,
}

impl MetricsRecord {
    pub fn to_tsv(&self) -> String {
        let mut fields = vec![self.episode.to_string(), self.env_steps.to_string()];
        for v in [
            self.episode_return,
            self.model_loss,
            self.policy_objective,
            self.value_loss,
            self.entropy,
            self.confidence,
        ]
        .into_iter()
        .chain(self.latent_error)
        {
            fields.push(v.to_string());
        }
        fields.join("\t")
    }

    /// Parses a metrics line; wall-clock is not part of it and reads as 0.
    pub fn from_tsv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.trim_end().split('\t').collect();
        if parts.len() != METRICS_HEADER.len() {
            return Err(BirdError::InvalidInput(format!(
                "metrics line has {} fields, expected {}",
                parts.len(),
                METRICS_HEADER.len()
            )));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| BirdError::InvalidInput(format!("'{s}': {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| BirdError::InvalidInput(format!("'{s}': {e}")));
        Ok(Self {
            episode: int(parts[0])?,
            env_steps: int(parts[1])?,
            episode_return: real(parts[2])?,
            model_loss: real(parts[3])?,
            policy_objective: real(parts[4])?,
            value_loss: real(parts[5])?,
            entropy: real(parts[6])?,
            confidence: real(parts[7])?,
            latent_error: [real(parts[8])?, real(parts[9])?, real(parts[10])?],
            wall_clock: 0.0,
        })
    }
}

/// Appends records to `metrics.tsv` and wall-clock times to a separate
/// `timing.tsv`, so the metrics file depends only on config and seed.
pub struct MetricsWriter {
    metrics: File,
    timing: File,
    dir: PathBuf,
}

fn open_with_header(path: &Path, header: &str) -> Result<File> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

impl MetricsWriter {
    /// Opens (or continues) the files in `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: open_with_header(&dir.join(METRICS_FILE), &METRICS_HEADER.join("\t"))?,
            timing: open_with_header(&dir.join(TIMING_FILE), "episode\twall_clock_seconds")?,
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.metrics, "{}", record.to_tsv())?;
        writeln!(self.timing, "{}\t{:.3}", record.episode, record.wall_clock)?;
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.split('\t').collect::<Vec<_>>() != METRICS_HEADER {
                return Err(BirdError::InvalidInput(format!("{} has an unexpected header", path.display())));
            }
            continue;
        }
        if !line.is_empty() {
            out.push(MetricsRecord::from_tsv(&line)?);
        }
    }
    Ok(out)
}
