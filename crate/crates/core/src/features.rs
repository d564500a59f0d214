//! STFT magnitude and log-Mel spectrogram frontend.
//!
//! Framing is fully interior (no center padding): frame `i` covers samples
//! `[i * hop, i * hop + window)`, and the number of frames is
//! `(len - window) / hop + 1`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const WINDOW: usize = 4096;
pub const HOP: usize = 1024;
pub const DEFAULT_N_MELS: usize = 128;
/// Added to mel power before taking the log.
pub const LOG_FLOOR: f64 = 1e-6;

/// Frontend parameters. Defaults are the model input settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: SAMPLE_RATE,
            window: WINDOW,
            hop: HOP,
            n_mels: DEFAULT_N_MELS,
        }
    }
}

/// Row-major `[frames x bins]` STFT magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitudes {
    pub frames: Vec<Vec<f64>>,
    pub n_fft: usize,
    pub hop: usize,
}

impl Magnitudes {
    pub fn num_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Short-time Fourier transform magnitudes with a Hann window and FFT size
/// equal to the window length.
pub fn stft_mag(audio: &[f32], window: usize, hop: usize) -> Result<Magnitudes> {
    if window == 0 || hop == 0 {
        return Err(Error::Parameter("window and hop must be positive".into()));
    }
    if audio.len() < window {
        return Err(Error::Parameter(format!(
            "audio of {} samples is shorter than one {}-sample window",
            audio.len(),
            window
        )));
    }
    let num_frames = (audio.len() - window) / hop + 1;
    let win = hann(window);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(window);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let bins = window / 2 + 1;
    let mut frames = Vec::with_capacity(num_frames);
    for i in 0..num_frames {
        let start = i * hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(f64::from(audio[start + k]) * win[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        frames.push(buf[..bins].iter().map(|c| c.norm()).collect());
    }
    Ok(Magnitudes {
        frames,
        n_fft: window,
        hop,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank over `[0, sample_rate / 2]`. Each filter is
/// normalized so its weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `[n_mels x bins]`
    pub weights: Vec<Vec<f64>>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Result<Self> {
        if n_mels < 1 {
            return Err(Error::Parameter("n_mels must be at least 1".into()));
        }
        if n_fft < 2 {
            return Err(Error::Parameter("FFT size must be at least 2".into()));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let mut weights = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut row: Vec<f64> = (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - lo) / (center - lo);
                    let down = (hi - f) / (hi - center);
                    up.min(down).max(0.0)
                })
                .collect();
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|w| *w /= sum);
            }
            weights.push(row);
        }
        Ok(MelFilterbank {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    /// Mel-band power (magnitude squared, then pooled) for one frame.
    pub fn apply_power(&self, magnitudes: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| {
                row.iter()
                    .zip(magnitudes)
                    .filter(|(w, _)| **w != 0.0)
                    .map(|(w, m)| w * m * m)
                    .sum()
            })
            .collect()
    }
}

/// Log-Mel spectrogram, row-major `[num_frames x n_mels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub data: Vec<f64>,
    pub num_frames: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
}

impl MelSpectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_mels..(i + 1) * self.n_mels]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_mels.max(1))
    }

    /// Build from raw rows, used by tests and dataset loading.
    pub fn from_rows(rows: &[Vec<f64>], config: FrontendConfig) -> Result<Self> {
        let n_mels = rows.first().map_or(config.n_mels, Vec::len);
        if rows.iter().any(|r| r.len() != n_mels) {
            return Err(Error::Parameter("ragged spectrogram rows".into()));
        }
        Ok(MelSpectrogram {
            data: rows.iter().flatten().copied().collect(),
            num_frames: rows.len(),
            n_mels,
            sample_rate: config.sample_rate,
            window: config.window,
            hop: config.hop,
        })
    }
}

/// Mel power per frame (before the log), exposed for energy checks.
pub fn mel_power(mag: &Magnitudes, sample_rate: u32, n_mels: usize) -> Result<Vec<Vec<f64>>> {
    let fb = MelFilterbank::new(sample_rate, mag.n_fft, n_mels)?;
    Ok(mag.frames.iter().map(|f| fb.apply_power(f)).collect())
}

/// `log(mel_power + 1e-6)` for each frame.
pub fn log_mel(mag: &Magnitudes, sample_rate: u32, n_mels: usize) -> Result<MelSpectrogram> {
    let power = mel_power(mag, sample_rate, n_mels)?;
    let data = power
        .iter()
        .flat_map(|row| row.iter().map(|p| (p + LOG_FLOOR).ln()))
        .collect();
    Ok(MelSpectrogram {
        data,
        num_frames: power.len(),
        n_mels,
        sample_rate,
        window: mag.n_fft,
        hop: mag.hop,
    })
}

/// Full frontend: samples already at `config.sample_rate` to log-Mel frames.
pub fn spectrogram(samples: &[f32], config: &FrontendConfig) -> Result<MelSpectrogram> {
    let mag = stft_mag(samples, config.window, config.hop)?;
    log_mel(&mag, config.sample_rate, config.n_mels)
}
