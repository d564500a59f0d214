//! Deterministic inputs for the benchmarks.

use pianocover::beats::{halfbeats_to_seconds, BeatGrid};
use pianocover::features::FrontendConfig;
use pianocover::midi::{HalfBeatSequence, Note, NoteSequence, SecondsSequence};
use pianocover::model::Example;
use pianocover::pipeline::{render_sine_audio, window_spectrogram};
use pianocover::sync::Chromagram;
use pianocover::tokenizer::{encode_segment, SEGMENT_HALFBEATS};
use pianocover::Audio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Melody with a harmony note half the time, `halfbeats` long.
pub fn piece(seed: u64, halfbeats: u32) -> HalfBeatSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut notes = Vec::new();
    let mut t = 0;
    while t < halfbeats {
        let len = rng.gen_range(1..=3).min(halfbeats - t);
        let p = rng.gen_range(55..=84);
        notes.push(Note::new(p, t, t + len, 80));
        if rng.gen_bool(0.5) {
            notes.push(Note::new(p - rng.gen_range(3..=12), t, t + len, 80));
        }
        t += len;
    }
    NoteSequence::new(notes, halfbeats).unwrap()
}

/// `piece` on a 120 BPM grid, in seconds.
pub fn piece_seconds(seed: u64, beats: usize) -> SecondsSequence {
    let grid = BeatGrid::constant(120.0, 0.0, beats + 1).unwrap();
    halfbeats_to_seconds(&piece(seed, 2 * beats as u32), &grid)
}

pub fn audio(seed: u64, beats: usize) -> Audio {
    render_sine_audio(&piece_seconds(seed, beats), 22050).unwrap()
}

pub fn chroma(seed: u64, len: usize) -> Chromagram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..len)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
        .collect();
    Chromagram::new(frames, 10.0)
}

/// One rendered 4-beat training example.
pub fn example(seed: u64, arranger: usize, n_mels: usize) -> Example {
    let notes = piece(seed, SEGMENT_HALFBEATS);
    let seq = halfbeats_to_seconds(&notes, &BeatGrid::constant(120.0, 0.0, 5).unwrap());
    let frontend = FrontendConfig {
        n_mels,
        ..FrontendConfig::default()
    };
    let audio = render_sine_audio(&seq, frontend.sample_rate).unwrap();
    Example {
        spectrogram: window_spectrogram(&audio.samples, 0.0, 2.0, &frontend).unwrap(),
        arranger,
        target: encode_segment(&notes, SEGMENT_HALFBEATS).unwrap(),
    }
}
