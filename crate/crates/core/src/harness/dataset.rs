//! Step-level datasets as newline-delimited JSON, with observation statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AdvSequence, ObsNormalizer, MIN_STD};
use crate::env::Trajectory;
use crate::error::{Error, Result};

/// Significant digits kept for every stored float.
pub const STORED_DIGITS: usize = 9;

/// Round to [`STORED_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", STORED_DIGITS - 1, x).parse().expect("formatted float parses")
}

fn round_all(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| round_sig(x)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub traj_id: usize,
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub attacked: bool,
    pub attack: Option<String>,
}

impl StepRecord {
    fn rounded(mut self) -> Self {
        self.obs = round_all(&self.obs);
        self.action = round_all(&self.action);
        self.reward = round_sig(self.reward);
        self
    }
}

/// Running mean and population standard deviation of stored observations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObsStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(skip)]
    m2: Vec<f64>,
}

impl PartialEq for ObsStats {
    fn eq(&self, other: &Self) -> bool {
        self.count == other.count && self.mean == other.mean && self.std == other.std
    }
}

impl ObsStats {
    /// Welford update.
    pub fn push(&mut self, obs: &[f64]) {
        if self.count == 0 {
            self.mean = vec![0.0; obs.len()];
            self.m2 = vec![0.0; obs.len()];
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, &x) in obs.iter().enumerate() {
            let d = x - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x - self.mean[i]);
        }
        self.std = self.m2.iter().map(|m| (m / n).sqrt()).collect();
    }

    pub fn normalizer(&self) -> Result<ObsNormalizer> {
        if self.count == 0 {
            return Err(Error::EmptyDataset("observation statistics"));
        }
        Ok(ObsNormalizer { mean: self.mean.clone(), std: self.std.iter().map(|s| s.max(MIN_STD)).collect() })
    }
}

/// Clean episodes: records plus the statistics of their stored observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<StepRecord>,
    pub stats: ObsStats,
}

impl Dataset {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Self {
        let mut ds = Dataset::default();
        for (id, traj) in trajs.iter().enumerate() {
            for s in &traj.steps {
                ds.push(StepRecord {
                    traj_id: id,
                    t: s.t,
                    obs: s.obs.clone(),
                    action: s.action.clone(),
                    reward: s.reward,
                    done: s.done,
                    attacked: s.attacked,
                    attack: s.attack.clone(),
                });
            }
        }
        ds
    }

    /// Attacked counterparts: `obs` holds the attacked observation and
    /// `traj_id` the source episode, so clean rows join on `(traj_id, t)`.
    pub fn from_adversarial(adv: &[AdvSequence], clean: &Dataset) -> Result<Self> {
        let sequences = clean.sequences();
        let mut ds = Dataset::default();
        let index = clean.trajectory_offsets();
        for a in adv {
            let start = *index.get(a.source).ok_or_else(|| Error::Invalid(format!("adversarial source {} not in dataset", a.source)))?;
            if sequences[a.source].len() != a.attacked.len() {
                return Err(Error::DimMismatch { what: "adversarial sequence", expected: sequences[a.source].len(), got: a.attacked.len() });
            }
            for (t, obs) in a.attacked.iter().enumerate() {
                let base = &clean.records[start + t];
                ds.push(StepRecord {
                    obs: obs.clone(),
                    attacked: a.flags[t],
                    attack: a.flags[t].then(|| a.attack.as_str().to_string()),
                    ..base.clone()
                });
            }
        }
        Ok(ds)
    }

    /// Stored values are rounded before they enter the statistics, so the
    /// statistics describe exactly what is on disk.
    pub fn push(&mut self, rec: StepRecord) {
        let rec = rec.rounded();
        self.stats.push(&rec.obs);
        self.records.push(rec);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn trajectory_offsets(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.t == 0 {
                out.push(i);
            }
        }
        out
    }

    /// Observation sequences grouped by `traj_id`, in file order.
    pub fn sequences(&self) -> Vec<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut last = None;
        for r in &self.records {
            if last != Some(r.traj_id) || r.t == 0 {
                out.push(Vec::new());
                last = Some(r.traj_id);
            }
            out.last_mut().expect("pushed above").push(r.obs.clone());
        }
        out
    }

    /// Writes `path` and its statistics to `path` with a `.stats.json` suffix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let stats = serde_json::to_string_pretty(&self.stats)?;
        std::fs::write(stats_path(path), stats)?;
        Ok(())
    }

    /// Reads records and recomputes their statistics from the file.
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| missing(path, e))?;
        let mut ds = Dataset::default();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StepRecord = serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("{} line {}: {e}", path.display(), i + 1)))?;
            ds.push(rec);
        }
        Ok(ds)
    }

    /// Statistics as stored alongside `path`.
    pub fn load_stats(path: &Path) -> Result<ObsStats> {
        let p = stats_path(path);
        let text = std::fs::read_to_string(&p).map_err(|e| missing(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn stats_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("stats.json")
}

pub(crate) fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}
