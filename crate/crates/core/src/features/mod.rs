//! Acoustic frontend: framing, cepstra with deltas, pitch/voicing/loudness,
//! corpus-level z-normalization and the binary feature-file format.
//!
//! The default layout is 10 cepstra, 10 deltas, 10 delta-deltas, then pitch
//! (Hz, 0 when unvoiced), voicing probability and loudness: 33 values per
//! 10 ms hop. `cepstra` in [`FrameConfig`] changes the width to `3 * n + 3`.

mod dsp;
mod io;
mod norm;

pub use dsp::{frame_mel_energies, hz_to_mel, mel_to_hz, MelFilterbank};
pub use io::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use norm::{compute_norm_stats, NormAccumulator, NormStats, STD_FLOOR};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the default feature layout.
pub const FEATURE_DIM: usize = 33;

/// Framing and analysis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub mel_filters: usize,
    pub fft_size: usize,
    pub cepstra: usize,
    pub delta_half_window: usize,
    /// Moving-average length applied to pitch, voicing and loudness.
    pub smoothing: usize,
    pub pre_emphasis: f64,
    pub min_pitch_hz: f64,
    pub max_pitch_hz: f64,
    /// Autocorrelation clarity below which a frame counts as unvoiced.
    pub voicing_threshold: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            mel_filters: 26,
            fft_size: 512,
            cepstra: 10,
            delta_half_window: 2,
            smoothing: 15,
            pre_emphasis: 0.97,
            min_pitch_hz: 50.0,
            max_pitch_hz: 500.0,
            voicing_threshold: 0.5,
        }
    }
}

impl FrameConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn dim(&self) -> usize {
        3 * self.cepstra + 3
    }

    /// Number of frames produced for `samples` input samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        let w = self.window_samples();
        if samples < w {
            0
        } else {
            (samples - w) / self.hop_samples() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(Error::Config(format!(
                "need window > hop > 0, got window {} ms, hop {} ms",
                self.window_ms, self.hop_ms
            )));
        }
        if self.hop_samples() == 0 {
            return Err(Error::Config("hop is shorter than one sample".into()));
        }
        if self.fft_size < self.window_samples() {
            return Err(Error::Config(format!(
                "fft size {} smaller than window of {} samples",
                self.fft_size,
                self.window_samples()
            )));
        }
        if self.cepstra == 0 || self.cepstra >= self.mel_filters {
            return Err(Error::Config(format!(
                "need 0 < cepstra < mel filters, got {} and {}",
                self.cepstra, self.mel_filters
            )));
        }
        if self.smoothing == 0 {
            return Err(Error::Config("smoothing window must be at least 1".into()));
        }
        if !(self.min_pitch_hz > 0.0 && self.max_pitch_hz > self.min_pitch_hz) {
            return Err(Error::Config("invalid pitch search band".into()));
        }
        Ok(())
    }
}

/// A sequence of equally sized feature frames stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSeq {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not split into frames of {}",
                data.len(),
                dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_frames(dim: usize, frames: &[Vec<f64>]) -> Result<Self> {
        let mut seq = Self::new(dim);
        for f in frames {
            seq.push(f)?;
        }
        Ok(seq)
    }

    pub fn push(&mut self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.dim {
            return Err(Error::Dimension(format!(
                "frame has {} values, sequence expects {}",
                frame.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(frame);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// The first `n` frames (all of them when `n >= len`).
    pub fn prefix(&self, n: usize) -> FeatureSeq {
        let n = n.min(self.len());
        Self {
            dim: self.dim,
            data: self.data[..n * self.dim].to_vec(),
        }
    }
}

/// Interleaved PCM converted to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub channels: u16,
    pub samples: Vec<f64>,
}

impl AudioBuffer {
    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            channels: 1,
            samples,
        }
    }
}

/// Reads a WAV file into an [`AudioBuffer`], scaling integer PCM to [-1, 1].
pub fn read_wav(path: &std::path::Path) -> Result<AudioBuffer> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::AudioFormat(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| Error::AudioFormat(format!("{}: {e}", path.display())))?;
    Ok(AudioBuffer {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        samples,
    })
}

/// Unnormalized per-frame features for a mono signal.
///
/// Audio shorter than one window yields an empty sequence (and a warning).
pub fn extract_features(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FeatureSeq> {
    cfg.validate()?;
    if audio.channels != 1 {
        return Err(Error::AudioFormat(format!(
            "expected mono audio, got {} channels",
            audio.channels
        )));
    }
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::AudioFormat(format!(
            "audio sampled at {} Hz, frontend configured for {} Hz",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let n_frames = cfg.frame_count(audio.samples.len());
    let mut out = FeatureSeq::new(cfg.dim());
    if n_frames == 0 {
        log::warn!(
            "audio of {} samples is shorter than one {}-sample window",
            audio.samples.len(),
            cfg.window_samples()
        );
        return Ok(out);
    }

    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let emphasized = dsp::pre_emphasis(&audio.samples, cfg.pre_emphasis);
    let analyzer = dsp::CepstralAnalyzer::new(cfg);

    let mut cepstra = Vec::with_capacity(n_frames);
    let mut pitch = Vec::with_capacity(n_frames);
    let mut voicing = Vec::with_capacity(n_frames);
    let mut loudness = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * hop;
        cepstra.push(analyzer.cepstra(&emphasized[start..start + win]));
        let raw = &audio.samples[start..start + win];
        let (f0, clarity) = dsp::autocorrelation_pitch(raw, cfg);
        pitch.push(f0);
        voicing.push(clarity);
        loudness.push(dsp::log_energy(raw));
    }

    let deltas = dsp::deltas(&cepstra, cfg.delta_half_window);
    let delta2 = dsp::deltas(&deltas, cfg.delta_half_window);
    let pitch = dsp::moving_average(&pitch, cfg.smoothing);
    let voicing = dsp::moving_average(&voicing, cfg.smoothing);
    let loudness = dsp::moving_average(&loudness, cfg.smoothing);

    let mut frame = Vec::with_capacity(cfg.dim());
    for t in 0..n_frames {
        frame.clear();
        frame.extend_from_slice(&cepstra[t]);
        frame.extend_from_slice(&deltas[t]);
        frame.extend_from_slice(&delta2[t]);
        frame.push(pitch[t]);
        frame.push(voicing[t]);
        frame.push(loudness[t]);
        out.push(&frame)?;
    }
    Ok(out)
}
