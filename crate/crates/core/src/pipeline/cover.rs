//! Full-piece cover generation.

use crate::audio::Audio;
use crate::beats::{halfbeats_to_seconds, track_beats, BeatGrid, TrackerConfig};
use crate::error::{Error, Result};
use crate::features::FrontendConfig;
use crate::midi::{write_smf, Note, NoteSequence, SecondsSequence};
use crate::model::{greedy_generate, ModelParams};
use crate::tokenizer::{stitch, TokenSeq, SEGMENT_HALFBEATS};

use super::dataset::{window_count, window_spectrograms, WINDOW_BEATS};

pub const COVER_TICKS_PER_QUARTER: u16 = 480;
pub const COVER_TEMPO_BPM: f64 = 120.0;

pub struct CoverJob<'a> {
    pub audio: &'a Audio,
    pub arranger_id: usize,
    pub params: &'a ModelParams,
    /// Beat grid to use; tracked from the audio when absent.
    pub beats: Option<BeatGrid>,
    pub tracker: TrackerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverOutput {
    pub sequence: SecondsSequence,
    pub midi: Vec<u8>,
    pub grid: BeatGrid,
    pub windows: usize,
    pub leftover_beats: usize,
    /// Windows whose generation hit `max_decode_len` without EOS.
    pub truncated_windows: usize,
    pub decode_warnings: usize,
    pub tokens: Vec<TokenSeq>,
}

/// Generates tokens for each 4-beat window, stitches them, and maps the
/// result back to seconds on the same grid. Output never extends past the
/// grid's last half-beat.
pub fn generate_cover(job: &CoverJob) -> Result<CoverOutput> {
    let grid = match &job.beats {
        Some(g) => g.clone(),
        None => track_beats(job.audio, &job.tracker)?,
    };
    let (windows, leftover) = window_count(&grid);
    if windows == 0 {
        return Err(Error::NoBeats(format!(
            "{} beats on the grid, need at least {}",
            grid.beats().len(),
            WINDOW_BEATS
        )));
    }
    if leftover > 0 {
        log::warn!(
            "cover: dropping {} beats after the last full window",
            leftover
        );
    }
    let frontend = FrontendConfig {
        n_mels: job.params.config.n_mels,
        ..FrontendConfig::default()
    };
    let spectrograms = window_spectrograms(job.audio, &grid, &frontend)?;
    let mut tokens = Vec::with_capacity(windows);
    let mut truncated_windows = 0;
    for (w, mel) in spectrograms.iter().enumerate() {
        let out = greedy_generate(mel, job.arranger_id, job.params)?;
        if out.truncated {
            log::warn!("cover: window {} hit the decode length limit", w);
            truncated_windows += 1;
        }
        tokens.push(out.tokens);
    }
    let stitched = stitch(&tokens, SEGMENT_HALFBEATS);
    let last = grid.half_beats().len() as u32 - 1;
    let limit = stitched.sequence.duration().min(last);
    let clipped: Vec<Note<u32>> = stitched
        .sequence
        .notes()
        .iter()
        .filter(|n| n.onset < limit)
        .map(|n| Note::new(n.pitch, n.onset, n.offset.min(limit), n.velocity))
        .collect();
    let halfbeats = NoteSequence::new(clipped, limit)?;
    let sequence = halfbeats_to_seconds(&halfbeats, &grid);
    let midi = write_smf(&sequence, COVER_TICKS_PER_QUARTER, COVER_TEMPO_BPM)?;
    Ok(CoverOutput {
        sequence,
        midi,
        grid,
        windows,
        leftover_beats: leftover,
        truncated_windows,
        decode_warnings: stitched.warnings,
        tokens,
    })
}
