//! Additive sine rendering of note sequences.

use std::f64::consts::PI;

use crate::audio::Audio;
use crate::error::{Error, Result};
use crate::midi::SecondsSequence;

const FADE_SECONDS: f64 = 0.010;
const PEAK: f64 = 0.9;

pub fn midi_to_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

/// One unit-amplitude sine per note with 10 ms linear fades, summed and
/// peak-normalized to 0.9. The output spans the sequence duration.
pub fn render_sine_audio(seq: &SecondsSequence, sample_rate: u32) -> Result<Audio> {
    if sample_rate == 0 {
        return Err(Error::Parameter("sample rate must be positive".into()));
    }
    if seq.is_empty() {
        return Err(Error::Validation("cannot render an empty sequence".into()));
    }
    let sr = f64::from(sample_rate);
    let len = (seq.duration() * sr).ceil() as usize;
    let mut buf = vec![0.0f64; len];
    for n in seq.notes() {
        let start = (n.onset * sr).round() as usize;
        let end = ((n.offset * sr).round() as usize).min(len);
        if end <= start {
            continue;
        }
        let count = end - start;
        let fade = ((FADE_SECONDS * sr).round() as usize).min(count / 2).max(1);
        let w = 2.0 * PI * midi_to_hz(n.pitch) / sr;
        for (i, slot) in buf[start..end].iter_mut().enumerate() {
            let gain = if i < fade {
                i as f64 / fade as f64
            } else if count - i <= fade {
                (count - i) as f64 / fade as f64
            } else {
                1.0
            };
            *slot += gain * (w * (start + i) as f64).sin();
        }
    }
    let peak = buf.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
    Ok(Audio::new(
        buf.into_iter().map(|x| (x * scale) as f32).collect(),
        sample_rate,
    ))
}
