//! Dataset construction from (pop audio, cover MIDI) pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Audio};
use crate::beats::{quantize, read_beats, track_beats, BeatGrid, TrackerConfig};
use crate::error::{Error, Result};
use crate::features::{spectrogram, FrontendConfig, MelSpectrogram};
use crate::filtering::{
    filter_with, melody_chroma_accuracy, midi_topline, read_f0_csv, FilterReport, Verdict,
};
use crate::midi::{parse_smf, SecondsSequence};
use crate::model::Example;
use crate::sync::{apply_warp, audio_chroma, dtw, midi_chroma, DEFAULT_FRAME_RATE};
use crate::tokenizer::{
    encode_piece, format_token_file, parse_token_file, TokenSeq, SEGMENT_HALFBEATS,
};

/// Beats per training/inference window.
pub const WINDOW_BEATS: usize = 4;

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pop_audio: PathBuf,
    pub cover_midi: PathBuf,
    pub arranger_id: usize,
    pub beats: Option<PathBuf>,
    pub f0: Option<PathBuf>,
}

/// Reads a manifest CSV with columns
/// `pop_path,cover_path,arranger_id[,beats_path][,f0_path]`. A header row is
/// recognized by its first field `pop_path`. Relative paths are resolved
/// against the manifest's directory; empty optional fields mean "absent".
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<PairRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let resolve = |s: &str| {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let optional =
        |row: &csv::StringRecord, i: usize| row.get(i).filter(|s| !s.is_empty()).map(resolve);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if i == 0 && row.get(0) == Some("pop_path") {
            continue;
        }
        if !(3..=5).contains(&row.len()) {
            return Err(Error::Validation(format!(
                "manifest row {}: expected 3 to 5 columns, found {}",
                i + 1,
                row.len()
            )));
        }
        let arranger_id = row[2].parse().map_err(|_| {
            Error::Validation(format!(
                "manifest row {}: bad arranger id {:?}",
                i + 1,
                &row[2]
            ))
        })?;
        out.push(PairRecord {
            pop_audio: resolve(&row[0]),
            cover_midi: resolve(&row[1]),
            arranger_id,
            beats: optional(&row, 3),
            f0: optional(&row, 4),
        });
    }
    Ok(out)
}

/// Frontend settings shared by dataset builds.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub frontend: FrontendConfig,
    pub tracker: TrackerConfig,
    pub chroma_frame_rate: f64,
    /// Windows whose token sequence is longer than this are dropped.
    pub max_decode_len: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            frontend: FrontendConfig::default(),
            tracker: TrackerConfig::default(),
            chroma_frame_rate: DEFAULT_FRAME_RATE,
            max_decode_len: crate::tokenizer::MAX_DECODE_LEN,
        }
    }
}

/// A training example together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetExample {
    pub record: usize,
    pub window: usize,
    pub example: Example,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Kept,
    Discarded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub index: usize,
    pub pop_path: String,
    pub cover_path: String,
    pub arranger_id: usize,
    pub status: RecordStatus,
    pub filter: Option<FilterReport>,
    pub beats_from_file: bool,
    pub num_beats: usize,
    pub examples: usize,
    /// Windows dropped because their tokens exceed `max_decode_len`.
    pub dropped_long_windows: usize,
    /// Beats after the last complete window.
    pub leftover_beats: usize,
    pub clamped_note_times: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub total: usize,
    pub kept: usize,
    pub discarded: usize,
    pub failed: usize,
    pub examples: usize,
    pub records: Vec<RecordReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<DatasetExample>,
}

impl Dataset {
    pub fn training_examples(&self) -> Vec<Example> {
        self.examples.iter().map(|e| e.example.clone()).collect()
    }
}

/// Log-Mel frames of `[start, end)` seconds of `samples` (already at the
/// frontend rate). Audio past the end is taken as silence and the slice is
/// padded to at least one analysis window.
pub fn window_spectrogram(
    samples: &[f32],
    start: f64,
    end: f64,
    frontend: &FrontendConfig,
) -> Result<MelSpectrogram> {
    let sr = f64::from(frontend.sample_rate);
    let a = (start.max(0.0) * sr).round() as usize;
    let b = (end.max(0.0) * sr).round() as usize;
    let len = b.saturating_sub(a).max(frontend.window);
    let mut slice = vec![0.0f32; len];
    if a < samples.len() {
        let avail = &samples[a..samples.len().min(a + len)];
        slice[..avail.len()].copy_from_slice(avail);
    }
    spectrogram(&slice, frontend)
}

/// Number of complete windows on a grid and the leftover beats.
pub fn window_count(grid: &BeatGrid) -> (usize, usize) {
    let n = grid.beats().len();
    (n / WINDOW_BEATS, n % WINDOW_BEATS)
}

/// Per-window spectrograms for every complete window of `grid`.
pub fn window_spectrograms(
    audio: &Audio,
    grid: &BeatGrid,
    frontend: &FrontendConfig,
) -> Result<Vec<MelSpectrogram>> {
    let samples = audio.resampled(frontend.sample_rate)?.samples;
    let (windows, _) = window_count(grid);
    (0..windows)
        .map(|w| {
            let first = w * WINDOW_BEATS;
            let start = grid.beats()[first];
            let end = grid.beat_span_end(first, WINDOW_BEATS);
            window_spectrogram(&samples, start, end, frontend)
        })
        .collect()
}

fn load_grid(record: &PairRecord, audio: &Audio, cfg: &BuildConfig) -> Result<BeatGrid> {
    match &record.beats {
        Some(p) => read_beats(p),
        None => track_beats(audio, &cfg.tracker),
    }
}

fn read_cover(path: &Path) -> Result<SecondsSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = parse_smf(&bytes)?;
    for w in &parsed.warnings {
        log::warn!("{}: {}", path.display(), w);
    }
    Ok(parsed.sequence)
}

/// Aligns a cover performance to pop audio: chroma DTW with the cover as
/// source, then note times warped onto the audio's time axis.
pub fn align_cover(
    cover: &SecondsSequence,
    audio: &Audio,
    frame_rate: f64,
) -> Result<SecondsSequence> {
    let source = midi_chroma(cover, frame_rate)?;
    let target = audio_chroma(audio, frame_rate)?;
    let path = dtw(&source, &target)?;
    apply_warp(cover, &path, frame_rate)
}

fn empty_report(index: usize, record: &PairRecord) -> RecordReport {
    RecordReport {
        index,
        pop_path: record.pop_audio.display().to_string(),
        cover_path: record.cover_midi.display().to_string(),
        arranger_id: record.arranger_id,
        status: RecordStatus::Failed,
        filter: None,
        beats_from_file: record.beats.is_some(),
        num_beats: 0,
        examples: 0,
        dropped_long_windows: 0,
        leftover_beats: 0,
        clamped_note_times: 0,
        error: None,
    }
}

fn process_record(
    index: usize,
    record: &PairRecord,
    cfg: &BuildConfig,
    report: &mut RecordReport,
) -> Result<Vec<DatasetExample>> {
    let audio = read_wav(&record.pop_audio)?;
    let cover = read_cover(&record.cover_midi)?;
    let grid = load_grid(record, &audio, cfg)?;
    report.num_beats = grid.beats().len();

    let aligned = align_cover(&cover, &audio, cfg.chroma_frame_rate)?;
    let mca = match &record.f0 {
        Some(p) => {
            let contour = read_f0_csv(p)?;
            Some(melody_chroma_accuracy(
                &contour,
                &midi_topline(&aligned, &contour.times),
            ))
        }
        None => None,
    };
    let filter = filter_with(mca, audio.duration(), cover.duration())?;
    let verdict = filter.verdict;
    report.filter = Some(filter);
    if verdict == Verdict::Discard {
        report.status = RecordStatus::Discarded;
        return Ok(Vec::new());
    }

    let quantized = quantize(&aligned, &grid);
    report.clamped_note_times = quantized.clamped;
    let (windows, leftover) = window_count(&grid);
    report.leftover_beats = leftover;
    if leftover > 0 {
        log::warn!(
            "{}: dropping {} beats after the last full window",
            record.pop_audio.display(),
            leftover
        );
    }
    if windows == 0 {
        return Err(Error::NoBeats(format!(
            "{} beats, need at least {}",
            grid.beats().len(),
            WINDOW_BEATS
        )));
    }
    let segments = encode_piece(&quantized.sequence, SEGMENT_HALFBEATS, Some(windows))?;
    let spectrograms = window_spectrograms(&audio, &grid, &cfg.frontend)?;
    let mut out = Vec::new();
    for (w, (tokens, spectrogram)) in segments.into_iter().zip(spectrograms).enumerate() {
        if tokens.ids.len() > cfg.max_decode_len {
            report.dropped_long_windows += 1;
            continue;
        }
        out.push(DatasetExample {
            record: index,
            window: w,
            example: Example {
                spectrogram,
                arranger: record.arranger_id,
                target: tokens,
            },
        });
    }
    if out.is_empty() {
        return Err(Error::Validation("no usable windows".into()));
    }
    report.status = RecordStatus::Kept;
    report.examples = out.len();
    Ok(out)
}

/// Runs beats, alignment, quantization, filtering and windowing for every
/// record. A failing record is reported and skipped.
pub fn build_dataset(records: &[PairRecord], cfg: &BuildConfig) -> (Dataset, BuildReport) {
    let mut examples = Vec::new();
    let mut reports = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let mut report = empty_report(i, record);
        match process_record(i, record, cfg, &mut report) {
            Ok(ex) => examples.extend(ex),
            Err(e) => {
                log::warn!("record {} quarantined: {}", i, e);
                report.status = RecordStatus::Failed;
                report.examples = 0;
                report.error = Some(e.to_string());
            }
        }
        reports.push(report);
    }
    let count = |s| reports.iter().filter(|r| r.status == s).count();
    let report = BuildReport {
        total: records.len(),
        kept: count(RecordStatus::Kept),
        discarded: count(RecordStatus::Discarded),
        failed: count(RecordStatus::Failed),
        examples: examples.len(),
        records: reports,
    };
    (Dataset { examples }, report)
}

const TOKENS_FILE: &str = "tokens.txt";
const INDEX_FILE: &str = "examples.csv";
const SPECTROGRAM_FILE: &str = "spectrograms.bin";
const REPORT_FILE: &str = "report.json";
const SPEC_MAGIC: &[u8; 8] = b"PCOVSPEC";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    example: usize,
    record: usize,
    window: usize,
    arranger_id: usize,
    num_frames: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `tokens.txt`, `examples.csv`, `spectrograms.bin` and `report.json`
/// into `dir`, creating it if needed. Output depends only on the inputs.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset, report: &BuildReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tokens: Vec<TokenSeq> = dataset
        .examples
        .iter()
        .map(|e| e.example.target.clone())
        .collect();
    write_file(
        &dir.join(TOKENS_FILE),
        format_token_file(&tokens).as_bytes(),
    )?;

    let mut index = csv::Writer::from_writer(Vec::new());
    let mut spec = Vec::new();
    spec.extend_from_slice(SPEC_MAGIC);
    spec.extend_from_slice(&(dataset.examples.len() as u32).to_le_bytes());
    for (i, e) in dataset.examples.iter().enumerate() {
        let s = &e.example.spectrogram;
        index.serialize(IndexRow {
            example: i,
            record: e.record,
            window: e.window,
            arranger_id: e.example.arranger,
            num_frames: s.num_frames,
        })?;
        spec.extend_from_slice(&(s.num_frames as u32).to_le_bytes());
        spec.extend_from_slice(&(s.n_mels as u32).to_le_bytes());
        for v in &s.data {
            spec.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = index
        .into_inner()
        .map_err(|e| Error::Validation(format!("index serialization: {}", e)))?;
    write_file(&dir.join(INDEX_FILE), &index)?;
    write_file(&dir.join(SPECTROGRAM_FILE), &spec)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&dir.join(REPORT_FILE), format!("{}\n", json).as_bytes())
}

/// Loads the examples of a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: impl AsRef<Path>, frontend: &FrontendConfig) -> Result<Vec<Example>> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let tokens_text = String::from_utf8(read(TOKENS_FILE)?)
        .map_err(|_| Error::Validation("token file is not UTF-8".into()))?;
    let tokens = parse_token_file(&tokens_text, SEGMENT_HALFBEATS)?;
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(read(INDEX_FILE)?.as_slice()).deserialize() {
        let row: IndexRow = row?;
        rows.push(row);
    }
    let spec = read(SPECTROGRAM_FILE)?;
    let bad = |m: &str| Error::Validation(format!("{}: {}", SPECTROGRAM_FILE, m));
    if spec.len() < 12 || &spec[..8] != SPEC_MAGIC {
        return Err(bad("bad header"));
    }
    let count = u32::from_le_bytes(spec[8..12].try_into().expect("4 bytes")) as usize;
    if count != tokens.len() || count != rows.len() {
        return Err(bad("example counts disagree between dataset files"));
    }
    let mut pos = 12;
    let mut out = Vec::with_capacity(count);
    for (row, target) in rows.into_iter().zip(tokens) {
        let header = spec.get(pos..pos + 8).ok_or_else(|| bad("truncated"))?;
        let frames = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
        let n_mels = u32::from_le_bytes(header[4..].try_into().expect("4 bytes")) as usize;
        pos += 8;
        let n = frames * n_mels * 8;
        let body = spec.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        if frames != row.num_frames {
            return Err(bad("frame count disagrees with index"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Example {
            spectrogram: MelSpectrogram {
                data,
                num_frames: frames,
                n_mels,
                sample_rate: frontend.sample_rate,
                window: frontend.window,
                hop: frontend.hop,
            },
            arranger: row.arranger_id,
            target,
        });
    }
    if pos != spec.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}
