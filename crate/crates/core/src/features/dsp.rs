use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::FrameConfig;

const LOG_FLOOR: f64 = 1e-10;
const SILENCE_ENERGY: f64 = 1e-12;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `y[n] = x[n] - a * x[n - 1]`, with `y[0] = x[0]`.
pub(crate) fn pre_emphasis(x: &[f64], a: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    let mut prev = None;
    for &v in x {
        y.push(match prev {
            Some(p) => v - a * p,
            None => v,
        });
        prev = Some(v);
    }
    y
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Triangular filters equally spaced on the mel scale between 20 Hz and
/// Nyquist, unit peak height, evaluated at FFT bin centre frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_filters: usize, fft_size: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(20.0), hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
            .collect();
        let n_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let weights = (0..n_filters)
            .map(|k| {
                let (l, c, r) = (edges[k], edges[k + 1], edges[k + 2]);
                (0..n_bins)
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: edges[1..=n_filters].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn center_hz(&self, k: usize) -> f64 {
        self.centers_hz[k]
    }

    /// Filter outputs for a magnitude spectrum of `fft_size / 2 + 1` bins.
    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(magnitude).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Windowed magnitude spectrum, mel filterbank, log and DCT-II, with the
/// FFT plan and window cached.
pub(crate) struct CepstralAnalyzer {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    fft_size: usize,
    bank: MelFilterbank,
    /// `cepstra x mel_filters` orthonormal DCT-II rows for coefficients 1..=n.
    dct: Vec<Vec<f64>>,
}

impl CepstralAnalyzer {
    pub fn new(cfg: &FrameConfig) -> Self {
        let m = cfg.mel_filters;
        let dct = (1..=cfg.cepstra)
            .map(|k| {
                (0..m)
                    .map(|j| {
                        (2.0 / m as f64).sqrt() * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos()
                    })
                    .collect()
            })
            .collect();
        Self {
            window: hann(cfg.window_samples()),
            fft: FftPlanner::new().plan_fft_forward(cfg.fft_size),
            fft_size: cfg.fft_size,
            bank: MelFilterbank::new(m, cfg.fft_size, cfg.sample_rate),
            dct,
        }
    }

    pub fn magnitude(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.fft_size];
        for ((b, x), w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..self.fft_size / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    pub fn mel_energies(&self, frame: &[f64]) -> Vec<f64> {
        self.bank.apply(&self.magnitude(frame))
    }

    pub fn cepstra(&self, frame: &[f64]) -> Vec<f64> {
        let log_mel: Vec<f64> = self
            .mel_energies(frame)
            .into_iter()
            .map(|e| e.max(LOG_FLOOR).ln())
            .collect();
        self.dct
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Filterbank energies of one already pre-emphasized frame; exposed for
/// frontend diagnostics.
pub fn frame_mel_energies(frame: &[f64], cfg: &FrameConfig) -> Vec<f64> {
    CepstralAnalyzer::new(cfg).mel_energies(frame)
}

pub(crate) fn log_energy(frame: &[f64]) -> f64 {
    let e = frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64;
    (e + LOG_FLOOR).ln()
}

/// Pitch (Hz) and clarity from the normalized autocorrelation of the
/// mean-removed frame. Unvoiced frames report pitch 0.
pub(crate) fn autocorrelation_pitch(frame: &[f64], cfg: &FrameConfig) -> (f64, f64) {
    let n = frame.len();
    let mean = frame.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy / (n as f64) < SILENCE_ENERGY {
        return (0.0, 0.0);
    }
    let sr = cfg.sample_rate as f64;
    let min_lag = (sr / cfg.max_pitch_hz).floor().max(1.0) as usize;
    let max_lag = ((sr / cfg.min_pitch_hz).ceil() as usize).min(n - 2);
    if min_lag >= max_lag {
        return (0.0, 0.0);
    }
    // r[k] holds the correlation at lag min_lag - 1 + k so that the search
    // range has a neighbour on each side for peak picking.
    let lags: Vec<usize> = (min_lag - 1..=max_lag + 1).collect();
    let r: Vec<f64> = lags
        .iter()
        .map(|&lag| {
            let (a, b) = (&x[..n - lag], &x[lag..]);
            let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let ea: f64 = a.iter().map(|v| v * v).sum();
            let eb: f64 = b.iter().map(|v| v * v).sum();
            let den = (ea * eb).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    let best = r[1..r.len() - 1]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if best < cfg.voicing_threshold {
        return (0.0, best.max(0.0));
    }
    // Earliest local maximum close to the global one avoids octave errors.
    let k = (1..r.len() - 1)
        .find(|&k| r[k] >= 0.9 * best && r[k] >= r[k - 1] && r[k] >= r[k + 1])
        .unwrap_or(1);
    let (a, b, c) = (r[k - 1], r[k], r[k + 1]);
    let denom = a - 2.0 * b + c;
    let offset = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = lags[k] as f64 + offset;
    (sr / lag, best.clamp(0.0, 1.0))
}

/// Regression deltas over `±half` frames with edge replication.
pub(crate) fn deltas(x: &[Vec<f64>], half: usize) -> Vec<Vec<f64>> {
    let t_max = x.len() as isize - 1;
    let denom: f64 = 2.0 * (1..=half).map(|n| (n * n) as f64).sum::<f64>();
    (0..x.len())
        .map(|t| {
            let mut d = vec![0.0; x[t].len()];
            for n in 1..=half {
                let fwd = &x[(t as isize + n as isize).min(t_max) as usize];
                let back = &x[(t as isize - n as isize).max(0) as usize];
                for ((di, f), b) in d.iter_mut().zip(fwd).zip(back) {
                    *di += n as f64 * (f - b);
                }
            }
            if denom > 0.0 {
                d.iter_mut().for_each(|v| *v /= denom);
            }
            d
        })
        .collect()
}

/// Centred moving average of length `len`; the window shrinks at the edges.
pub(crate) fn moving_average(x: &[f64], len: usize) -> Vec<f64> {
    let before = (len - 1) / 2;
    let after = len - 1 - before;
    (0..x.len())
        .map(|t| {
            let lo = t.saturating_sub(before);
            let hi = (t + after).min(x.len() - 1);
            let w = &x[lo..=hi];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}
