mod common;

use std::path::Path;

use common::{diatonic_piece, grid_piece, tiny_config, write_pair};
use pianocover::audio::read_wav;
use pianocover::beats::{BeatGrid, TrackerConfig};
use pianocover::features::{stft_mag, FrontendConfig};
use pianocover::filtering::{contour_from_topline, Verdict, F0_HOP};
use pianocover::midi::{parse_smf, Note, SecondsSequence};
use pianocover::model::{
    read_checkpoint, train, write_checkpoint, FloatWidth, ModelParams, OptimizerKind, TrainConfig,
};
use pianocover::pipeline::{
    build_dataset, eval_stats, generate_cover, read_dataset, render_sine_audio, write_dataset,
    BuildConfig, CoverEval, CoverJob, PairRecord, RecordStatus,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn peak_hz(samples: &[f32], sr: f64) -> Vec<(f64, f64)> {
    let mag = stft_mag(samples, 8192, 8192).unwrap();
    let frame = &mag.frames[0];
    let mut peaks: Vec<(f64, f64)> = (1..frame.len() - 1)
        .filter(|&k| frame[k] > frame[k - 1] && frame[k] >= frame[k + 1])
        .map(|k| (k as f64 * sr / 8192.0, frame[k]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks
}

#[test]
fn rendered_notes_have_their_spectral_peaks() {
    let sr = 22050.0;
    let a4 = SecondsSequence::from_notes(vec![Note::new(69, 0.0, 1.0, 80)]).unwrap();
    let audio = render_sine_audio(&a4, 22050).unwrap();
    let peaks = peak_hz(&audio.samples[2000..2000 + 8192], sr);
    assert!((peaks[0].0 - 440.0).abs() <= sr / 8192.0);

    let dyad = SecondsSequence::from_notes(vec![
        Note::new(72, 0.0, 1.0, 80),
        Note::new(76, 0.0, 1.0, 80),
    ])
    .unwrap();
    let audio = render_sine_audio(&dyad, 22050).unwrap();
    let peaks = peak_hz(&audio.samples[2000..2000 + 8192], sr);
    let mut top: Vec<f64> = peaks[..2].iter().map(|p| p.0).collect();
    top.sort_by(f64::total_cmp);
    assert!((top[0] - 523.25).abs() <= sr / 8192.0);
    assert!((top[1] - 659.26).abs() <= sr / 8192.0);
}

#[test]
fn rendered_gaps_are_silent() {
    let seq = SecondsSequence::from_notes(vec![
        Note::new(60, 0.0, 0.5, 80),
        Note::new(67, 1.0, 1.5, 80),
    ])
    .unwrap();
    let audio = render_sine_audio(&seq, 22050).unwrap();
    assert_eq!(audio.samples.len(), (1.5f64 * 22050.0).ceil() as usize);
    assert!(audio.samples[11025..22050].iter().all(|s| s.abs() <= 1e-3));
    let peak = audio.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    assert!((peak - 0.9).abs() < 1e-6);
}

fn small_build() -> BuildConfig {
    BuildConfig {
        frontend: FrontendConfig {
            n_mels: 16,
            ..FrontendConfig::default()
        },
        max_decode_len: 64,
        ..BuildConfig::default()
    }
}

#[test]
fn self_rendered_pair_is_kept_with_perfect_mca() {
    let dir = tempfile::tempdir().unwrap();
    let (seq, grid) = grid_piece(&mut ChaCha8Rng::seed_from_u64(0), 33);
    let rec = write_pair(dir.path(), "self", &seq, &seq, &grid, 2, true);
    let (ds, report) = build_dataset(&[rec], &BuildConfig::default());
    let r = &report.records[0];
    assert_eq!(r.status, RecordStatus::Kept);
    assert_eq!(r.filter.as_ref().unwrap().mca, Some(1.0));
    // 33 beats: eight full windows and one leftover beat.
    assert_eq!((r.examples, r.leftover_beats), (8, 1));
    assert_eq!(ds.examples.len(), 8);
    assert!(ds.examples.iter().all(|e| e.example.arranger == 2));
}

#[test]
fn self_rendered_pairs_align_closely() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<PairRecord> = (1..9)
        .map(|s| {
            let (seq, grid) = grid_piece(&mut ChaCha8Rng::seed_from_u64(s), 33);
            write_pair(dir.path(), &format!("p{}", s), &seq, &seq, &grid, 0, true)
        })
        .collect();
    let (_, report) = build_dataset(&records, &small_build());
    assert_eq!(report.kept, 8);
    for r in &report.records {
        let mca = r.filter.as_ref().unwrap().mca.unwrap();
        assert!(mca >= 0.99, "record {}: {}", r.index, mca);
    }
}

#[test]
fn transposed_cover_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let (seq, grid) = diatonic_piece(&mut ChaCha8Rng::seed_from_u64(3), 33);
    let moved: Vec<Note<f64>> = seq
        .notes()
        .iter()
        .map(|n| Note::new(n.pitch + 6, n.onset, n.offset, n.velocity))
        .collect();
    let moved = SecondsSequence::new(moved, seq.duration()).unwrap();
    let rec = write_pair(dir.path(), "tritone", &seq, &moved, &grid, 0, true);
    let (ds, report) = build_dataset(&[rec], &small_build());
    let f = report.records[0].filter.as_ref().unwrap();
    assert_eq!(f.verdict, Verdict::Discard);
    assert!(f.mca.unwrap() <= 0.15, "{:?}", f.mca);
    assert!(ds.examples.is_empty());
    assert_eq!((report.kept, report.discarded), (0, 1));
}

#[test]
fn empty_and_broken_records() {
    let (ds, report) = build_dataset(&[], &BuildConfig::default());
    assert!(ds.examples.is_empty());
    assert_eq!((report.total, report.kept, report.examples), (0, 0, 0));

    let dir = tempfile::tempdir().unwrap();
    let (seq, grid) = grid_piece(&mut ChaCha8Rng::seed_from_u64(4), 9);
    let good = write_pair(dir.path(), "good", &seq, &seq, &grid, 1, false);
    let missing = PairRecord {
        pop_audio: dir.path().join("absent.wav"),
        ..good.clone()
    };
    let (ds, report) = build_dataset(&[missing, good], &small_build());
    assert_eq!(report.records[0].status, RecordStatus::Failed);
    assert!(report.records[0].error.is_some());
    assert_eq!(report.records[1].status, RecordStatus::Kept);
    assert_eq!(report.records[1].filter.as_ref().unwrap().mca, None);
    assert_eq!(ds.examples.len(), 2);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn rebuild_is_byte_identical_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<PairRecord> = (0..3)
        .map(|s| {
            let (seq, grid) = grid_piece(&mut ChaCha8Rng::seed_from_u64(10 + s), 17);
            write_pair(
                dir.path(),
                &format!("r{}", s),
                &seq,
                &seq,
                &grid,
                s as usize,
                s != 1,
            )
        })
        .collect();
    let cfg = small_build();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (ds, report) = build_dataset(&records, &cfg);
    write_dataset(&a, &ds, &report).unwrap();
    let (ds2, report2) = build_dataset(&records, &cfg);
    write_dataset(&b, &ds2, &report2).unwrap();
    assert_eq!(report, report2);
    assert_eq!(files(&a), files(&b));
    assert_eq!(files(&a).len(), 4);
    assert_eq!(
        read_dataset(&a, &cfg.frontend).unwrap(),
        ds.training_examples()
    );
}

/// A tiny model trained for a few steps on self-rendered pairs.
fn toy_checkpoint(dir: &Path) -> ModelParams {
    let records: Vec<PairRecord> = (0..2)
        .map(|s| {
            let (seq, grid) = grid_piece(&mut ChaCha8Rng::seed_from_u64(20 + s), 17);
            write_pair(
                dir,
                &format!("t{}", s),
                &seq,
                &seq,
                &grid,
                s as usize,
                false,
            )
        })
        .collect();
    let (ds, _) = build_dataset(&records, &small_build());
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let trained = train(&ds.training_examples(), &tc, &tiny_config()).unwrap();
    let path = dir.join("toy.ckpt");
    write_checkpoint(&path, &trained.params, FloatWidth::F32).unwrap();
    read_checkpoint(&path).unwrap()
}

#[test]
fn cover_is_valid_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let params = toy_checkpoint(dir.path());
    let (seq, grid) = grid_piece(&mut ChaCha8Rng::seed_from_u64(30), 61);
    let audio = render_sine_audio(&seq, 22050).unwrap();
    assert!(audio.duration() >= 30.0);
    let job = CoverJob {
        audio: &audio,
        arranger_id: 1,
        params: &params,
        beats: Some(grid.clone()),
        tracker: TrackerConfig::default(),
    };
    let out = generate_cover(&job).unwrap();
    assert_eq!((out.windows, out.leftover_beats), (15, 1));
    let parsed = parse_smf(&out.midi).unwrap().sequence;
    assert_eq!(parsed.len(), out.sequence.len());
    for n in parsed.notes() {
        assert!((21..=108).contains(&n.pitch));
    }
    assert!(parsed.notes().windows(2).all(|w| w[0].onset <= w[1].onset));
    let end = *grid.half_beats().last().unwrap();
    assert!(out.sequence.duration() <= end + 1e-9);
    assert!(out.sequence.notes().iter().all(|n| n.offset <= end + 1e-9));

    let again = generate_cover(&job).unwrap();
    assert_eq!(out.midi, again.midi);
}

#[test]
fn four_beats_make_one_window() {
    let dir = tempfile::tempdir().unwrap();
    let params = toy_checkpoint(dir.path());
    let grid = BeatGrid::constant(120.0, 0.0, 4).unwrap();
    let seq = SecondsSequence::from_notes(vec![Note::new(60, 0.0, 2.0, 80)]).unwrap();
    let audio = render_sine_audio(&seq, 22050).unwrap();
    let mut job = CoverJob {
        audio: &audio,
        arranger_id: 0,
        params: &params,
        beats: Some(grid),
        tracker: TrackerConfig::default(),
    };
    assert_eq!(generate_cover(&job).unwrap().windows, 1);
    job.beats = Some(BeatGrid::constant(120.0, 0.0, 3).unwrap());
    assert!(generate_cover(&job).is_err());
}

#[test]
fn wav_written_for_a_pair_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let (seq, grid) = grid_piece(&mut ChaCha8Rng::seed_from_u64(5), 9);
    let rec = write_pair(dir.path(), "w", &seq, &seq, &grid, 0, false);
    let audio = read_wav(&rec.pop_audio).unwrap();
    assert_eq!(audio.sample_rate, 22050);
    assert!((audio.duration() - seq.duration()).abs() < 1e-3);
}

/// Independent AMCA: per cover, walk the reference frames and scan all notes
/// for the highest one sounding.
fn amca_oracle(covers: &[CoverEval]) -> f64 {
    let mut total = 0.0;
    for c in covers {
        let r = c.reference.as_ref().unwrap();
        let (mut voiced, mut hit) = (0.0, 0.0);
        for (t, f) in r.times.iter().zip(&r.f0_hz) {
            if *f <= 0.0 {
                continue;
            }
            voiced += 1.0;
            let top = c
                .sequence
                .notes()
                .iter()
                .filter(|n| n.onset <= *t && *t < n.offset)
                .map(|n| n.pitch)
                .max();
            if let Some(p) = top {
                let d = (69.0 + 12.0 * (f / 440.0).log2() - f64::from(p)).rem_euclid(12.0);
                if d.min(12.0 - d) <= 0.5 {
                    hit += 1.0;
                }
            }
        }
        total += hit / voiced;
    }
    total / covers.len() as f64
}

#[test]
fn eval_stats_amca_matches_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let covers: Vec<CoverEval> = (0..6)
        .map(|i| {
            let (seq, _) = grid_piece(&mut rng, 17);
            let (other, _) = grid_piece(&mut rng, 17);
            let frames = (seq.duration() / F0_HOP).ceil() as usize;
            let mut reference = contour_from_topline(&other, frames);
            for f in reference.f0_hz.iter_mut() {
                if *f > 0.0 {
                    *f *= 2f64.powf(rng.gen_range(-0.6..0.6) / 12.0);
                }
            }
            CoverEval {
                sequence: seq,
                arranger_id: i % 2,
                reference: Some(reference),
            }
        })
        .collect();
    let stats = eval_stats(&covers).unwrap();
    assert!((stats.amca.unwrap() - amca_oracle(&covers)).abs() <= 1e-9);
    assert_eq!(stats.arrangers.len(), 2);
}

#[test]
fn eval_stats_self_reference_and_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let covers: Vec<CoverEval> = (0..4)
        .map(|i| {
            let (seq, _) = grid_piece(&mut rng, 17);
            let frames = (seq.duration() / F0_HOP).ceil() as usize;
            let reference = Some(contour_from_topline(&seq, frames));
            CoverEval {
                sequence: seq,
                arranger_id: i,
                reference,
            }
        })
        .collect();
    let stats = eval_stats(&covers).unwrap();
    assert_eq!(stats.amca, Some(1.0));
    assert!(stats.arrangers.iter().all(|a| a.amca == Some(1.0)));

    let two = SecondsSequence::new(
        vec![Note::new(60, 0.0, 0.5, 80), Note::new(62, 0.5, 1.0, 80)],
        1.0,
    )
    .unwrap();
    let four = SecondsSequence::new(
        (0..4)
            .map(|k| Note::new(60 + k, 0.25 * f64::from(k), 0.25 * f64::from(k + 1), 80))
            .collect(),
        1.0,
    )
    .unwrap();
    let stats = eval_stats(&[
        CoverEval {
            sequence: two,
            arranger_id: 7,
            reference: None,
        },
        CoverEval {
            sequence: four,
            arranger_id: 7,
            reference: None,
        },
    ])
    .unwrap();
    assert_eq!(stats.arrangers[0].mean_density, 3.0);
    assert_eq!(stats.arrangers[0].std_density, 1.0);
    assert_eq!(stats.amca, None);
    assert!(eval_stats(&[]).is_err());
}
