//! Chroma-feature DTW alignment of piano MIDI to audio.

use crate::audio::Audio;
use crate::error::{Error, Result};
use crate::features::stft_mag;
use crate::midi::{Note, NoteSequence, SecondsSequence};

/// Default alignment frame rate (frames per second).
pub const DEFAULT_FRAME_RATE: f64 = 10.0;
/// Minimum spacing enforced between consecutive anchors of the time map.
pub const STRICT_EPSILON: f64 = 0.001;

const CHROMA_WINDOW: usize = 2048;
/// Finest output frame spacing accepted by [`audio_chroma`].
const CHROMA_HOP: usize = 512;
/// Output frames with less energy than this fraction of the loudest frame
/// count as silent.
const SILENCE_FLOOR: f64 = 1e-3;
/// Pitches outside this range do not contribute to audio chroma.
const CHROMA_MIN_PITCH: f64 = 24.0;
const CHROMA_MAX_PITCH: f64 = 108.0;

/// 12-dimensional pitch-class frames, each scaled to unit max (all-zero frames
/// stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Chromagram {
    pub frames: Vec<[f64; 12]>,
    pub frame_rate: f64,
}

impl Chromagram {
    pub fn new(mut frames: Vec<[f64; 12]>, frame_rate: f64) -> Self {
        for f in &mut frames {
            normalize_max(f);
        }
        Chromagram { frames, frame_rate }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn normalize_max(f: &mut [f64; 12]) {
    let max = f.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        f.iter_mut().for_each(|v| *v /= max);
    }
}

/// Pitch class of a frequency (A440 reference; C = 0).
pub fn pitch_class_of_hz(hz: f64) -> Option<usize> {
    if hz <= 0.0 {
        return None;
    }
    let midi = 69.0 + 12.0 * (hz / 440.0).log2();
    if !(CHROMA_MIN_PITCH - 0.5..CHROMA_MAX_PITCH + 0.5).contains(&midi) {
        return None;
    }
    Some((midi.round() as i64).rem_euclid(12) as usize)
}

/// Audio chromagram: for each output frame, the power spectrum of one Hann
/// window centered on the frame's center time `(j + 0.5) / frame_rate`
/// (zero-padded at the edges), folded into pitch classes. This samples the
/// same instants as [`midi_chroma`].
pub fn audio_chroma(audio: &Audio, frame_rate: f64) -> Result<Chromagram> {
    if audio.samples.is_empty() {
        return Err(Error::Parameter("audio is empty".into()));
    }
    let rate = f64::from(audio.sample_rate);
    let stft_rate = rate / CHROMA_HOP as f64;
    if !(frame_rate > 0.0 && frame_rate <= stft_rate) {
        return Err(Error::Parameter(format!(
            "chroma frame rate {} must be in (0, {:.3}]",
            frame_rate, stft_rate
        )));
    }
    let num_out = (audio.duration() * frame_rate).ceil() as usize;
    let classes: Vec<Option<usize>> = (0..=CHROMA_WINDOW / 2)
        .map(|k| pitch_class_of_hz(k as f64 * rate / CHROMA_WINDOW as f64))
        .collect();
    let half = (CHROMA_WINDOW / 2) as i64;
    let mut buf = vec![0.0f32; CHROMA_WINDOW];
    let mut frames = Vec::with_capacity(num_out);
    for j in 0..num_out {
        let center = ((j as f64 + 0.5) / frame_rate * rate).round() as i64;
        for (k, slot) in buf.iter_mut().enumerate() {
            let i = center - half + k as i64;
            *slot = if i >= 0 && (i as usize) < audio.samples.len() {
                audio.samples[i as usize]
            } else {
                0.0
            };
        }
        let mag = stft_mag(&buf, CHROMA_WINDOW, CHROMA_WINDOW)?;
        let mut f = [0.0f64; 12];
        for (m, class) in mag.frames[0].iter().zip(&classes) {
            if let Some(c) = class {
                f[*c] += m * m;
            }
        }
        frames.push(f);
    }
    let energy = |f: &[f64; 12]| f.iter().sum::<f64>();
    let loudest = frames.iter().map(energy).fold(0.0, f64::max);
    for f in &mut frames {
        if energy(f) < SILENCE_FLOOR * loudest {
            *f = [0.0; 12];
        }
    }
    Ok(Chromagram::new(frames, frame_rate))
}

/// Symbolic chromagram: each note adds to its pitch class the fraction of
/// frame `j`'s span `[j, j + 1) / frame_rate` during which it sounds.
pub fn midi_chroma(seq: &SecondsSequence, frame_rate: f64) -> Result<Chromagram> {
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(Error::Parameter(format!(
            "invalid frame rate {}",
            frame_rate
        )));
    }
    let num = (seq.duration() * frame_rate).ceil() as usize;
    let mut frames = vec![[0.0f64; 12]; num];
    for n in seq.notes() {
        let (on, off) = (n.onset * frame_rate, n.offset * frame_rate);
        let first = on.floor().max(0.0) as usize;
        let last = (off.ceil().max(0.0) as usize).min(num);
        for (j, frame) in frames.iter_mut().enumerate().take(last).skip(first) {
            let overlap = off.min(j as f64 + 1.0) - on.max(j as f64);
            if overlap > 0.0 {
                frame[usize::from(n.pitch % 12)] += overlap;
            }
        }
    }
    Ok(Chromagram::new(frames, frame_rate))
}

/// Monotone frame correspondence produced by [`dtw`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarpPath {
    pub pairs: Vec<(usize, usize)>,
    /// Accumulated local cost along the path.
    pub cost: f64,
}

/// `1 - cosine similarity`, evaluated as half the squared distance between the
/// unit-normalized frames so identical frames cost exactly 0. A zero frame
/// costs 0 against another zero frame and 1 against anything else.
pub fn local_cost(a: &[f64; 12], b: &[f64; 12]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => {
            0.5 * a
                .iter()
                .zip(b)
                .map(|(x, y)| (x / na - y / nb).powi(2))
                .sum::<f64>()
        }
    }
}

/// Dynamic time warping with steps (1,1), (1,0), (0,1) and uniform weights.
/// Ties prefer the diagonal, then (1,0).
pub fn dtw(source: &Chromagram, target: &Chromagram) -> Result<WarpPath> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Parameter("DTW input is empty".into()));
    }
    if (source.frame_rate - target.frame_rate).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "frame rates differ: {} vs {}",
            source.frame_rate, target.frame_rate
        )));
    }
    let (n, m) = (source.len(), target.len());
    // 0 = diagonal, 1 = from (i-1, j), 2 = from (i, j-1)
    let mut steps = vec![0u8; n * m];
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            let c = local_cost(&source.frames[i], &target.frames[j]);
            let (best, step) = match (i, j) {
                (0, 0) => (0.0, 0),
                (0, _) => (cur[j - 1], 2),
                (_, 0) => (prev[j], 1),
                _ => {
                    let mut best = (prev[j - 1], 0u8);
                    if prev[j] < best.0 {
                        best = (prev[j], 1);
                    }
                    if cur[j - 1] < best.0 {
                        best = (cur[j - 1], 2);
                    }
                    best
                }
            };
            cur[j] = best + c;
            steps[i * m + j] = step;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let cost = prev[m - 1];
    let mut pairs = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n - 1, m - 1);
    pairs.push((i, j));
    while (i, j) != (0, 0) {
        match steps[i * m + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(WarpPath { pairs, cost })
}

/// Piecewise-linear, strictly increasing map from source to target seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMap {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl TimeMap {
    /// Each source frame maps to the mean of its matched target frames, both
    /// taken at frame centers; the target side is then made strictly increasing.
    pub fn from_path(path: &WarpPath, frame_rate: f64) -> Result<Self> {
        if path.pairs.len() < 2 {
            return Err(Error::Alignment("warping path has a single pair".into()));
        }
        let mut source = Vec::new();
        let mut target: Vec<f64> = Vec::new();
        let mut k = 0;
        let pairs = &path.pairs;
        while k < pairs.len() {
            let i = pairs[k].0;
            let mut sum = 0.0;
            let mut count = 0usize;
            while k < pairs.len() && pairs[k].0 == i {
                sum += pairs[k].1 as f64;
                count += 1;
                k += 1;
            }
            source.push((i as f64 + 0.5) / frame_rate);
            target.push((sum / count as f64 + 0.5) / frame_rate);
        }
        if source.len() < 2 {
            return Err(Error::Alignment(
                "warping path covers a single source frame".into(),
            ));
        }
        for idx in 1..target.len() {
            if target[idx] < target[idx - 1] + STRICT_EPSILON {
                target[idx] = target[idx - 1] + STRICT_EPSILON;
            }
        }
        Ok(TimeMap { source, target })
    }

    /// Linear interpolation between anchors; outside them the nearest segment
    /// is extended.
    pub fn map(&self, t: f64) -> f64 {
        let s = &self.source;
        let idx = s.partition_point(|&x| x <= t).clamp(1, s.len() - 1);
        let (s0, s1) = (s[idx - 1], s[idx]);
        let (t0, t1) = (self.target[idx - 1], self.target[idx]);
        t0 + (t - s0) * (t1 - t0) / (s1 - s0)
    }
}

/// Warps note timings of `seq` (the DTW source) onto the target time axis.
/// Mapped times are clamped at zero.
pub fn apply_warp(
    seq: &SecondsSequence,
    path: &WarpPath,
    frame_rate: f64,
) -> Result<SecondsSequence> {
    let map = TimeMap::from_path(path, frame_rate)?;
    let warp = |t: f64| map.map(t).max(0.0);
    let mut notes = Vec::with_capacity(seq.len());
    for n in seq.notes() {
        let on = warp(n.onset);
        let off = warp(n.offset);
        if off > on {
            notes.push(Note::new(n.pitch, on, off, n.velocity));
        } else {
            log::warn!(
                "apply_warp: dropped note collapsed to zero length at {:.3}s",
                on
            );
        }
    }
    NoteSequence::new(notes, warp(seq.duration()))
}
