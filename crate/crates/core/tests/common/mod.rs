//! Synthetic data shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use pianocover::audio::write_wav;
use pianocover::beats::{format_beats, halfbeats_to_seconds, BeatGrid};
use pianocover::features::{FrontendConfig, MelSpectrogram};
use pianocover::filtering::{contour_from_topline, write_f0_csv, F0Contour, F0_HOP};
use pianocover::midi::{write_smf, HalfBeatSequence, Note, NoteSequence, SecondsSequence};
use pianocover::model::{loss_with_grads, teacher_forced_loss, Example, ModelConfig, ModelParams};
use pianocover::pipeline::{render_sine_audio, window_spectrogram, PairRecord};
use pianocover::sync::{apply_warp, audio_chroma, dtw, local_cost, midi_chroma, Chromagram};
use pianocover::tokenizer::{encode_segment, TokenSeq, EOS_ID, SEGMENT_HALFBEATS, VOCAB_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random quantized piece: up to `max_halfbeats` long, chords of up to
/// `max_chord` distinct pitches, notes free to cross segment boundaries.
pub fn random_piece(rng: &mut impl Rng, max_halfbeats: u32, max_chord: usize) -> HalfBeatSequence {
    let duration = rng.gen_range(1..=max_halfbeats);
    let mut notes = Vec::new();
    let mut t = 0;
    while t < duration {
        let chord = rng.gen_range(0..=max_chord);
        let mut pitches: Vec<u8> = (0..chord).map(|_| rng.gen_range(21..=108)).collect();
        pitches.sort_unstable();
        pitches.dedup();
        for p in pitches {
            let len = rng.gen_range(1..=12);
            notes.push(Note::new(p, t, (t + len).min(duration.max(t + 1)), 77));
        }
        t += rng.gen_range(1..=3);
    }
    let mut seq = NoteSequence::new(notes, duration).unwrap();
    seq.resolve_same_pitch_overlaps();
    seq
}

/// Model config small enough for finite-difference gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        n_mels: 16,
        num_arrangers: 4,
        relative_bias_buckets: 8,
        relative_bias_max_distance: 16,
        max_decode_len: 64,
        ..ModelConfig::default()
    }
}

pub const BPM: f64 = 120.0;

/// Renders one 4-beat segment (notes in half-beats relative to the segment
/// start) at 120 BPM and pairs its spectrogram with the segment tokens.
pub fn segment_example(notes: &HalfBeatSequence, arranger: usize, n_mels: usize) -> Example {
    let grid = BeatGrid::constant(BPM, 0.0, 5).unwrap();
    let secs: Vec<Note<f64>> = notes
        .notes()
        .iter()
        .map(|n| {
            Note::new(
                n.pitch,
                grid.time_of(n.onset),
                grid.time_of(n.offset.min(SEGMENT_HALFBEATS)),
                80,
            )
        })
        .collect();
    let seq = SecondsSequence::new(secs, grid.beats()[4]).unwrap();
    let frontend = FrontendConfig {
        n_mels,
        ..FrontendConfig::default()
    };
    let audio = render_sine_audio(&seq, frontend.sample_rate).unwrap();
    let spectrogram = window_spectrogram(&audio.samples, 0.0, grid.beats()[4], &frontend).unwrap();
    Example {
        spectrogram,
        arranger,
        target: encode_segment(notes, SEGMENT_HALFBEATS).unwrap(),
    }
}

/// A random single-segment melody with occasional two-note chords.
pub fn random_segment(rng: &mut impl Rng) -> HalfBeatSequence {
    let mut notes = Vec::new();
    let mut t = 0;
    while t < SEGMENT_HALFBEATS {
        let len = rng.gen_range(1..=2).min(SEGMENT_HALFBEATS - t);
        let p = rng.gen_range(48..=84);
        notes.push(Note::new(p, t, t + len, 77));
        if rng.gen_bool(0.3) {
            notes.push(Note::new(p - 5, t, t + len, 77));
        }
        t += len;
    }
    NoteSequence::new(notes, SEGMENT_HALFBEATS).unwrap()
}

pub fn random_mel(rng: &mut impl Rng, frames: usize, n_mels: usize) -> MelSpectrogram {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| (0..n_mels).map(|_| rng.gen_range(-3.0..1.0)).collect())
        .collect();
    let frontend = FrontendConfig {
        n_mels,
        ..FrontendConfig::default()
    };
    MelSpectrogram::from_rows(&rows, frontend).unwrap()
}

/// Uniformly random non-special tokens followed by EOS.
pub fn random_target(rng: &mut impl Rng, len: usize) -> TokenSeq {
    let mut ids: Vec<u32> = (0..len)
        .map(|_| rng.gen_range(2..VOCAB_SIZE as u32))
        .collect();
    ids.push(EOS_ID);
    TokenSeq {
        ids,
        segment_halfbeats: SEGMENT_HALFBEATS,
    }
}

pub fn random_example(
    rng: &mut impl Rng,
    config: &ModelConfig,
    frames: usize,
    len: usize,
) -> Example {
    Example {
        spectrogram: random_mel(rng, frames, config.n_mels),
        arranger: rng.gen_range(0..config.num_arrangers),
        target: random_target(rng, len),
    }
}

/// Coarse grouping of parameter tensors by role.
pub fn param_group(name: &str) -> &'static str {
    if name.ends_with("norm") {
        "norm"
    } else if name.contains("cross_attn") {
        "cross_attention"
    } else if name.contains("attn") {
        "self_attention"
    } else if name.contains("ffn") {
        "feed_forward"
    } else if name.contains("relative_bias") {
        "relative_bias"
    } else if name.contains("token_embedding") {
        "token_embedding"
    } else if name.contains("arranger_embedding") {
        "arranger_embedding"
    } else if name.contains("input_proj") {
        "input_projection"
    } else {
        panic!("unclassified parameter {}", name)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Fewest entries checked in any group.
    pub min_entries: usize,
    pub groups: usize,
}

/// Central finite differences against analytic gradients on `entries`
/// sampled scalars per parameter group. Gradients whose magnitude is below
/// 1e-7 on both sides are compared with that floor as the denominator.
pub fn gradient_check(config: &ModelConfig, seed: u64, h: f64, entries: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(config, seed).unwrap();
    let batch: Vec<Example> = (0..2)
        .map(|_| random_example(&mut rng, config, 6, 7))
        .collect();
    let refs: Vec<&Example> = batch.iter().collect();
    let (_, grads) = loss_with_grads(&params, &refs).unwrap();

    let mut groups: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (t, spec) in params.specs().iter().enumerate() {
        let g = groups.entry(param_group(&spec.name)).or_default();
        g.extend((0..params.tensors[t].data.len()).map(|i| (t, i)));
    }
    let mut max_rel: f64 = 0.0;
    let mut min_entries = usize::MAX;
    for all in groups.values() {
        let picks: Vec<(usize, usize)> = if all.len() <= entries {
            all.clone()
        } else {
            rand::seq::index::sample(&mut rng, all.len(), entries)
                .into_iter()
                .map(|k| all[k])
                .collect()
        };
        min_entries = min_entries.min(picks.len());
        for (t, i) in picks {
            let mut p = params.clone();
            let x = p.tensors[t].data[i];
            p.tensors[t].data[i] = x + h;
            let up = teacher_forced_loss(&p, &refs).unwrap();
            p.tensors[t].data[i] = x - h;
            let down = teacher_forced_loss(&p, &refs).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[t].data[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-7);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    GradCheck {
        max_rel_error: max_rel,
        min_entries,
        groups: groups.len(),
    }
}

/// A quantized melody-plus-harmony piece on a constant 120 BPM grid that
/// starts at 0.5 s, already converted to seconds.
pub fn grid_piece(rng: &mut impl Rng, beats: usize) -> (SecondsSequence, BeatGrid) {
    piece_on_grid(rng, beats, &(60..=79).collect::<Vec<u8>>())
}

/// Like [`grid_piece`] with melody and harmony drawn from C major.
pub fn diatonic_piece(rng: &mut impl Rng, beats: usize) -> (SecondsSequence, BeatGrid) {
    let scale: Vec<u8> = (48..=84)
        .filter(|p| [0, 2, 4, 5, 7, 9, 11].contains(&(p % 12)))
        .collect();
    let grid = BeatGrid::constant(BPM, 0.5, beats).unwrap();
    let last = 2 * (beats as u32 - 1);
    let mut notes = Vec::new();
    let mut t = 0;
    while t < last {
        let len = rng.gen_range(1..=3).min(last - t);
        let k = rng.gen_range(7..scale.len());
        notes.push(Note::new(
            scale[k],
            grid.time_of(t),
            grid.time_of(t + len),
            80,
        ));
        if rng.gen_bool(0.5) {
            let below = scale[k - rng.gen_range(2..=7)];
            notes.push(Note::new(below, grid.time_of(t), grid.time_of(t + len), 80));
        }
        t += len;
    }
    let end = grid.time_of(last) + 0.5;
    (SecondsSequence::new(notes, end).unwrap(), grid)
}

fn piece_on_grid(rng: &mut impl Rng, beats: usize, pitches: &[u8]) -> (SecondsSequence, BeatGrid) {
    let grid = BeatGrid::constant(BPM, 0.5, beats).unwrap();
    let last = 2 * (beats as u32 - 1);
    let mut notes = Vec::new();
    let mut t = 0;
    while t < last {
        let len = rng.gen_range(1..=3).min(last - t);
        let p = pitches[rng.gen_range(0..pitches.len())];
        notes.push(Note::new(p, grid.time_of(t), grid.time_of(t + len), 80));
        if rng.gen_bool(0.5) {
            notes.push(Note::new(
                p - rng.gen_range(5..=12),
                grid.time_of(t),
                grid.time_of(t + len),
                80,
            ));
        }
        t += len;
    }
    let end = grid.time_of(last) + 0.5;
    (SecondsSequence::new(notes, end).unwrap(), grid)
}

/// Writes pop audio rendered from `audio_seq`, the cover MIDI, a beats file
/// and optionally the f0 contour of `audio_seq`'s top line into `dir`.
pub fn write_pair(
    dir: &Path,
    name: &str,
    audio_seq: &SecondsSequence,
    cover: &SecondsSequence,
    grid: &BeatGrid,
    arranger: usize,
    with_f0: bool,
) -> PairRecord {
    let audio = render_sine_audio(audio_seq, 22050).unwrap();
    let pop = dir.join(format!("{}.wav", name));
    write_wav(&pop, &audio).unwrap();
    let mid = dir.join(format!("{}.mid", name));
    std::fs::write(&mid, write_smf(cover, 480, BPM).unwrap()).unwrap();
    let beats = dir.join(format!("{}.beats.txt", name));
    std::fs::write(&beats, format_beats(grid)).unwrap();
    let f0 = with_f0.then(|| {
        let frames = (audio.duration() / F0_HOP).ceil() as usize;
        let path = dir.join(format!("{}.f0.csv", name));
        std::fs::write(
            &path,
            write_f0_csv(&contour_from_topline(audio_seq, frames)),
        )
        .unwrap();
        path
    });
    PairRecord {
        pop_audio: pop,
        cover_midi: mid,
        arranger_id: arranger,
        beats: Some(beats),
        f0,
    }
}

/// Top-down memoized DTW recursion, independent of the iterative table fill.
pub fn dtw_oracle(a: &Chromagram, b: &Chromagram) -> f64 {
    fn go(
        i: usize,
        j: usize,
        a: &Chromagram,
        b: &Chromagram,
        memo: &mut HashMap<(usize, usize), f64>,
    ) -> f64 {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let c = local_cost(&a.frames[i], &b.frames[j]);
        let v = match (i, j) {
            (0, 0) => c,
            (0, _) => go(0, j - 1, a, b, memo) + c,
            (_, 0) => go(i - 1, 0, a, b, memo) + c,
            _ => {
                let d = go(i - 1, j - 1, a, b, memo);
                let u = go(i - 1, j, a, b, memo);
                let l = go(i, j - 1, a, b, memo);
                d.min(u).min(l) + c
            }
        };
        memo.insert((i, j), v);
        v
    }
    let mut memo = HashMap::new();
    // Fill row by row so the recursion depth stays small.
    for i in 0..a.len() {
        for j in 0..b.len() {
            go(i, j, a, b, &mut memo);
        }
    }
    memo[&(a.len() - 1, b.len() - 1)]
}

pub fn random_chroma(rng: &mut impl Rng, len: usize) -> Chromagram {
    let frames = (0..len)
        .map(|_| {
            let mut f = [0.0; 12];
            if rng.gen_bool(0.9) {
                for v in f.iter_mut() {
                    if rng.gen_bool(0.4) {
                        *v = rng.gen_range(0.0..1.0);
                    }
                }
            }
            f
        })
        .collect();
    Chromagram::new(frames, 10.0)
}

/// A random quantized piece of about `beats` beats at 120 BPM.
pub fn synthetic_piece(rng: &mut impl Rng, beats: usize) -> (HalfBeatSequence, BeatGrid) {
    let grid = BeatGrid::constant(120.0, 0.5, beats + 1).unwrap();
    let total = 2 * beats as u32;
    let mut notes = Vec::new();
    let mut t = 0;
    while t < total {
        let len = rng.gen_range(1..=3).min(total - t);
        let p = rng.gen_range(55..=79);
        notes.push(Note::new(p, t, t + len, 80));
        if rng.gen_bool(0.4) {
            notes.push(Note::new(p - rng.gen_range(3..=12), t, t + len, 80));
        }
        t += len;
    }
    (NoteSequence::new(notes, total).unwrap(), grid)
}

/// Piecewise-linear time distortion with local tempo changes within ±15%.
pub struct Distortion {
    knots: Vec<(f64, f64)>,
}

impl Distortion {
    pub fn random(rng: &mut impl Rng, span: f64) -> Self {
        let mut knots = vec![(0.0, 0.0)];
        let (mut s, mut t) = (0.0, 0.0);
        while s < span + 10.0 {
            let len = rng.gen_range(2.0..4.0);
            let slope = rng.gen_range(0.85..1.15);
            s += len;
            t += len * slope;
            knots.push((s, t));
        }
        Distortion { knots }
    }

    pub fn apply(&self, x: f64) -> f64 {
        let k = &self.knots;
        let i = k.partition_point(|p| p.0 <= x).clamp(1, k.len() - 1);
        let (a, b) = (k[i - 1], k[i]);
        a.1 + (x - a.0) * (b.1 - a.1) / (b.0 - a.0)
    }
}

/// Onsets recovered within 100 ms, and the total, for one distorted piece.
pub fn recovery_rate(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (piece, grid) = synthetic_piece(&mut rng, 40);
    let truth = halfbeats_to_seconds(&piece, &grid);
    let audio = render_sine_audio(&truth, 22050).unwrap();
    let d = Distortion::random(&mut rng, truth.duration());
    let distorted: Vec<Note<f64>> = truth
        .notes()
        .iter()
        .map(|n| Note::new(n.pitch, d.apply(n.onset), d.apply(n.offset), n.velocity))
        .collect();
    let distorted = SecondsSequence::new(distorted, d.apply(truth.duration())).unwrap();
    let source = midi_chroma(&distorted, 10.0).unwrap();
    let target = audio_chroma(&audio, 10.0).unwrap();
    let path = dtw(&source, &target).unwrap();
    let warped = apply_warp(&distorted, &path, 10.0).unwrap();
    // Warping is monotone and keeps every note here, so notes correspond by
    // canonical order of the undistorted onsets.
    let mut expected: Vec<(f64, u8)> = truth.notes().iter().map(|n| (n.onset, n.pitch)).collect();
    let mut got: Vec<(f64, u8)> = warped.notes().iter().map(|n| (n.onset, n.pitch)).collect();
    expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    got.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    assert_eq!(expected.len(), got.len());
    let hits = expected
        .iter()
        .zip(&got)
        .filter(|(e, g)| (e.0 - g.0).abs() <= 0.100)
        .count();
    (hits, expected.len())
}

/// Per-frame recount: pitch-class distance in semitones, folded by repeated
/// subtraction rather than a modulo.
pub fn mca_oracle(f0: &[f64], est: &[Option<u8>]) -> f64 {
    let mut voiced = 0.0;
    let mut hit = 0.0;
    for (k, &f) in f0.iter().enumerate() {
        if f <= 0.0 {
            continue;
        }
        voiced += 1.0;
        let Some(Some(p)) = est.get(k).copied() else {
            continue;
        };
        let ref_semis = 69.0 + 12.0 * (f / 440.0).log2();
        let mut d = (ref_semis - f64::from(p)).abs();
        while d > 12.0 {
            d -= 12.0;
        }
        if d.min(12.0 - d) <= 0.5 {
            hit += 1.0;
        }
    }
    hit / voiced
}

pub fn random_mca_instance(rng: &mut impl Rng) -> (F0Contour, Vec<Option<u8>>) {
    let n = rng.gen_range(1..400);
    let mut f0: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                // Mostly near a semitone, sometimes anywhere.
                let semis = f64::from(rng.gen_range(36u8..90)) + rng.gen_range(-0.7..0.7);
                440.0 * 2f64.powf((semis - 69.0) / 12.0)
            }
        })
        .collect();
    f0[0] = 220.0;
    let m = rng.gen_range(0..n + 20);
    let est = (0..m)
        .map(|_| rng.gen_bool(0.85).then(|| rng.gen_range(24u8..100)))
        .collect();
    (F0Contour::on_standard_grid(f0).unwrap(), est)
}
