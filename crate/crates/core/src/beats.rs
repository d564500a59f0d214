//! Beat grids: tracking, half-beat quantization and conversion back to seconds.

use std::path::Path;

use crate::audio::{resample, Audio};
use crate::error::{Error, Result};
use crate::features::{log_mel, stft_mag};
use crate::midi::{HalfBeatSequence, Note, NoteSequence, SecondsSequence};

/// Beat times in seconds and the half-beat (8th-note) positions derived from
/// them. Half-beat `2k` is beat `k`, half-beat `2k + 1` is the midpoint of
/// beats `k` and `k + 1`; the midpoint after the last beat is extrapolated
/// from the last inter-beat interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatGrid {
    beats: Vec<f64>,
    half_beats: Vec<f64>,
}

impl BeatGrid {
    pub fn new(beats: Vec<f64>) -> Result<Self> {
        if beats.len() < 2 {
            return Err(Error::Validation(format!(
                "a beat grid needs at least 2 beats, got {}",
                beats.len()
            )));
        }
        if beats.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation("beat times must be finite".into()));
        }
        if let Some(w) = beats.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "beat times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        let n = beats.len();
        let mut half_beats = Vec::with_capacity(2 * n);
        for k in 0..n {
            half_beats.push(beats[k]);
            let next = if k + 1 < n {
                beats[k + 1]
            } else {
                beats[k] + (beats[k] - beats[k - 1])
            };
            half_beats.push(0.5 * (beats[k] + next));
        }
        Ok(BeatGrid { beats, half_beats })
    }

    /// `count` beats at a constant tempo starting at `start`.
    pub fn constant(bpm: f64, start: f64, count: usize) -> Result<Self> {
        if !(bpm.is_finite() && bpm > 0.0) {
            return Err(Error::Validation(format!("invalid tempo {}", bpm)));
        }
        let period = 60.0 / bpm;
        BeatGrid::new((0..count).map(|k| start + k as f64 * period).collect())
    }

    pub fn beats(&self) -> &[f64] {
        &self.beats
    }

    pub fn half_beats(&self) -> &[f64] {
        &self.half_beats
    }

    /// Time of half-beat `index`, extrapolating past the end at the final
    /// half-beat spacing.
    pub fn time_of(&self, index: u32) -> f64 {
        let i = index as usize;
        let len = self.half_beats.len();
        if i < len {
            self.half_beats[i]
        } else {
            let last = self.half_beats[len - 1];
            let step = last - self.half_beats[len - 2];
            last + (i - (len - 1)) as f64 * step
        }
    }

    /// Index of the nearest half-beat (ties to the earlier one) and whether the
    /// time fell outside the grid.
    pub fn nearest_index(&self, t: f64) -> (u32, bool) {
        let h = &self.half_beats;
        let idx = h.partition_point(|&x| x < t);
        if idx == 0 {
            return (0, t < h[0]);
        }
        if idx == h.len() {
            return ((h.len() - 1) as u32, true);
        }
        if t - h[idx - 1] <= h[idx] - t {
            ((idx - 1) as u32, false)
        } else {
            (idx as u32, false)
        }
    }

    /// End time of the span of `count` beats starting at beat `first`, using an
    /// extrapolated beat when `first + count` lies past the end.
    pub fn beat_span_end(&self, first: usize, count: usize) -> f64 {
        let k = first + count;
        let n = self.beats.len();
        if k < n {
            self.beats[k]
        } else {
            let step = self.beats[n - 1] - self.beats[n - 2];
            self.beats[n - 1] + (k - (n - 1)) as f64 * step
        }
    }
}

/// Reads a beat file: one decimal time in seconds per line. Blank lines and
/// lines starting with `#` are ignored.
pub fn read_beats(path: impl AsRef<Path>) -> Result<BeatGrid> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_beats(&text)
}

pub fn parse_beats(text: &str) -> Result<BeatGrid> {
    let mut beats = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: f64 = line.parse().map_err(|_| {
            Error::Validation(format!(
                "beat file line {}: not a number: {:?}",
                lineno + 1,
                line
            ))
        })?;
        beats.push(t);
    }
    BeatGrid::new(beats)
}

pub fn format_beats(grid: &BeatGrid) -> String {
    grid.beats().iter().map(|b| format!("{}\n", b)).collect()
}

/// Output of [`quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub sequence: HalfBeatSequence,
    /// Number of note times that fell outside the grid and were clamped.
    pub clamped: usize,
}

/// Snaps every onset and offset to the nearest half-beat. A note whose offset
/// lands on its onset is extended to the next half-beat. Same-pitch overlaps
/// created by snapping are resolved and duplicates merged.
pub fn quantize(seq: &SecondsSequence, grid: &BeatGrid) -> Quantized {
    let mut clamped = 0;
    let mut snap = |t: f64| {
        let (i, out) = grid.nearest_index(t);
        clamped += usize::from(out);
        i
    };
    let mut notes = Vec::with_capacity(seq.len());
    for n in seq.notes() {
        let onset = snap(n.onset);
        let mut offset = snap(n.offset);
        if offset <= onset {
            offset = onset + 1;
        }
        notes.push(Note::new(n.pitch, onset, offset, n.velocity));
    }
    let duration = grid.nearest_index(seq.duration()).0;
    let mut sequence =
        NoteSequence::new(notes, duration).expect("snapped notes satisfy sequence invariants");
    sequence.resolve_same_pitch_overlaps();
    if clamped > 0 {
        log::warn!("quantize: {} note times clamped to the beat grid", clamped);
    }
    Quantized { sequence, clamped }
}

/// Maps half-beat indices to absolute seconds through the grid.
pub fn halfbeats_to_seconds(seq: &HalfBeatSequence, grid: &BeatGrid) -> SecondsSequence {
    let last = grid.half_beats().len() as u32;
    if seq.notes().iter().any(|n| n.offset >= last) {
        log::debug!("halfbeats_to_seconds: extrapolating past the end of the grid");
    }
    let notes = seq
        .notes()
        .iter()
        .map(|n| {
            Note::new(
                n.pitch,
                grid.time_of(n.onset),
                grid.time_of(n.offset),
                n.velocity,
            )
        })
        .collect();
    NoteSequence::new(notes, grid.time_of(seq.duration()))
        .expect("strictly monotone grid preserves note invariants")
}

/// Settings for the built-in beat tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub min_bpm: f64,
    pub max_bpm: f64,
    /// Center of the log-normal tempo prior.
    pub prior_bpm: f64,
    /// Penalty weight on deviations from the tempo period.
    pub tightness: f64,
    pub min_duration: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            sample_rate: 22050,
            window: 1024,
            hop: 256,
            n_mels: 64,
            min_bpm: 60.0,
            max_bpm: 180.0,
            prior_bpm: 120.0,
            tightness: 100.0,
            min_duration: 5.0,
        }
    }
}

/// Half-wave rectified spectral flux of the log-Mel spectrogram, one value per
/// frame, and the frame times (window centers, offset back by half a hop).
pub fn onset_envelope(audio: &Audio, cfg: &TrackerConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let samples = resample(&audio.samples, audio.sample_rate, cfg.sample_rate)?;
    let mag = stft_mag(&samples, cfg.window, cfg.hop)?;
    let mel = log_mel(&mag, cfg.sample_rate, cfg.n_mels)?;
    let n = mel.num_frames;
    let mut env = vec![0.0; n];
    for (i, e) in env.iter_mut().enumerate().skip(1) {
        *e = mel
            .frame(i)
            .iter()
            .zip(mel.frame(i - 1))
            .map(|(a, b)| (a - b).max(0.0))
            .sum::<f64>()
            / cfg.n_mels as f64;
    }
    let rate = f64::from(cfg.sample_rate);
    let times = (0..n)
        .map(|i| ((i * cfg.hop) as f64 + cfg.window as f64 / 2.0 - cfg.hop as f64 / 2.0) / rate)
        .collect();
    Ok((env, times))
}

/// Global tempo period (in frames) from the autocorrelation of the onset
/// envelope, weighted by a log-normal prior over BPM.
fn estimate_period(env: &[f64], frame_rate: f64, cfg: &TrackerConfig) -> Option<f64> {
    let min_lag = (60.0 * frame_rate / cfg.max_bpm).floor().max(1.0) as usize;
    let max_lag = (60.0 * frame_rate / cfg.min_bpm).ceil() as usize;
    if max_lag + 1 >= env.len() {
        return None;
    }
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    let centered: Vec<f64> = env.iter().map(|v| v - mean).collect();
    let acf = |lag: usize| -> f64 {
        centered[lag..]
            .iter()
            .zip(&centered)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (centered.len() - lag) as f64
    };
    let values: Vec<f64> = (0..=max_lag + 1)
        .map(|l| if l == 0 { 0.0 } else { acf(l) })
        .collect();
    let weight = |lag: f64| {
        let bpm = 60.0 * frame_rate / lag;
        let z = (bpm / cfg.prior_bpm).log2();
        (-0.5 * z * z).exp()
    };
    let best = (min_lag..=max_lag)
        .filter(|&l| values[l] > 0.0)
        .max_by(|&a, &b| {
            (values[a] * weight(a as f64)).total_cmp(&(values[b] * weight(b as f64)))
        })?;
    // Parabolic refinement around the discrete peak.
    let (y0, y1, y2) = (values[best - 1], values[best], values[best + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    let shift = if denom < 0.0 {
        (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Some(best as f64 + shift)
}

/// Dynamic-programming beat selection: each beat maximizes local onset
/// strength plus the best predecessor score, penalized by the squared log
/// ratio between the gap and the tempo period.
fn dp_beats(env: &[f64], period: f64, tightness: f64) -> Vec<usize> {
    let n = env.len();
    // Smooth with a Gaussian of width period / 32, as onset strength.
    let sigma = (period / 32.0).max(0.5);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let local: Vec<f64> = (0..n as isize)
        .map(|i| {
            (-radius..=radius)
                .filter_map(|k| {
                    let j = i + k;
                    (0..n as isize)
                        .contains(&j)
                        .then(|| env[j as usize] * kernel[(k + radius) as usize])
                })
                .sum()
        })
        .collect();

    let mut score = vec![0.0; n];
    let mut back: Vec<Option<usize>> = vec![None; n];
    let lo_off = (2.0 * period).round() as usize;
    let hi_off = (period / 2.0).round().max(1.0) as usize;
    for t in 0..n {
        let mut best: Option<(f64, usize)> = None;
        if t >= hi_off {
            let start = t.saturating_sub(lo_off);
            for (tau, s) in score.iter().enumerate().take(t - hi_off + 1).skip(start) {
                let gap = (t - tau) as f64;
                let penalty = tightness * (gap / period).ln().powi(2);
                let cand = s - penalty;
                if best.is_none_or(|(b, _)| cand > b) {
                    best = Some((cand, tau));
                }
            }
        }
        match best {
            Some((b, tau)) if b > 0.0 => {
                score[t] = local[t] + b;
                back[t] = Some(tau);
            }
            _ => score[t] = local[t],
        }
    }

    // Last beat: the final local maximum of the cumulative score that is
    // reasonably strong.
    let maxima: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&i| score[i] > score[i - 1] && score[i] >= score[i + 1])
        .collect();
    if maxima.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = maxima.iter().map(|&i| score[i]).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let last = *maxima
        .iter()
        .rev()
        .find(|&&i| score[i] >= 0.5 * median)
        .expect("median maximum satisfies the threshold");
    let mut beats = vec![last];
    let mut cur = last;
    while let Some(prev) = back[cur] {
        beats.push(prev);
        cur = prev;
    }
    beats.reverse();

    // Trim weak beats at both ends.
    let rms = (local.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let strong = |&b: &usize| local[b] >= 0.5 * rms;
    let first = beats.iter().position(strong).unwrap_or(beats.len());
    let end = beats.iter().rposition(strong).map_or(first, |p| p + 1);
    beats[first..end.max(first)].to_vec()
}

/// Estimates beat times from audio with the built-in tracker.
pub fn track_beats(audio: &Audio, cfg: &TrackerConfig) -> Result<BeatGrid> {
    if audio.duration() < cfg.min_duration {
        return Err(Error::NoBeats(format!(
            "audio of {:.2} s is shorter than {} s",
            audio.duration(),
            cfg.min_duration
        )));
    }
    let (env, times) = onset_envelope(audio, cfg)?;
    if env.iter().all(|&v| v == 0.0) {
        return Err(Error::NoBeats("onset envelope is silent".into()));
    }
    let frame_rate = f64::from(cfg.sample_rate) / cfg.hop as f64;
    let period = estimate_period(&env, frame_rate, cfg)
        .ok_or_else(|| Error::NoBeats("no periodicity in the onset envelope".into()))?;
    let frames = dp_beats(&env, period, cfg.tightness);
    if frames.len() < 2 {
        return Err(Error::NoBeats("fewer than two beats selected".into()));
    }
    BeatGrid::new(frames.into_iter().map(|f| times[f]).collect())
}
