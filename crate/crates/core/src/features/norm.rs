use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::FeatureSeq;

/// Lower bound applied to every per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension mean and population standard deviation of a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

impl NormStats {
    /// Identity transform (mean 0, std 1).
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Dimension(format!(
                "stats have {} means but {} deviations",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("stats contain a non-finite mean or a non-positive deviation".into()));
        }
        Ok(())
    }

    /// Writes the stats as TOML.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let stats: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn normalize(&self, frame: &[f64]) -> Vec<f64> {
        frame
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, frame: &[f64]) -> Vec<f64> {
        frame
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    pub fn normalize_seq(&self, seq: &FeatureSeq) -> Result<FeatureSeq> {
        if seq.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "stats cover {} dims, features have {}",
                self.dim(),
                seq.dim()
            )));
        }
        let mut out = seq.clone();
        for t in 0..out.len() {
            let f = out.frame_mut(t);
            for ((x, m), s) in f.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }
}

/// Streaming (Welford) accumulator; partial accumulators merge exactly as
/// in Chan et al.'s parallel update.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl NormAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, frame: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(frame) {
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
    }

    pub fn merge(&mut self, other: &NormAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<NormStats> {
        if self.count == 0 {
            return Err(Error::Empty("no frames to compute normalization statistics".into()));
        }
        let n = self.count as f64;
        Ok(NormStats {
            mean: self.mean.clone(),
            std: self
                .m2
                .iter()
                .map(|m2| (m2 / n).max(0.0).sqrt().max(STD_FLOOR))
                .collect(),
            count: self.count,
        })
    }
}

/// Mean and population std over every frame of the given (training) sequences.
pub fn compute_norm_stats<'a, I>(corpus: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a FeatureSeq>,
{
    let mut acc: Option<NormAccumulator> = None;
    for seq in corpus {
        let a = acc.get_or_insert_with(|| NormAccumulator::new(seq.dim()));
        if a.mean.len() != seq.dim() {
            return Err(Error::Dimension(format!(
                "mixed feature widths {} and {}",
                a.mean.len(),
                seq.dim()
            )));
        }
        for f in seq.frames() {
            a.push(f);
        }
    }
    acc.ok_or_else(|| Error::Empty("empty corpus".into()))?.finish()
}
