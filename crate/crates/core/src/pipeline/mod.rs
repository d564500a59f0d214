//! Dataset construction, cover generation and evaluation.

mod cover;
mod dataset;
mod render;
mod stats;

pub use cover::{generate_cover, CoverJob, CoverOutput, COVER_TEMPO_BPM, COVER_TICKS_PER_QUARTER};
pub use dataset::{
    align_cover, build_dataset, parse_manifest, read_dataset, read_manifest, window_count,
    window_spectrogram, window_spectrograms, write_dataset, BuildConfig, BuildReport, Dataset,
    DatasetExample, PairRecord, RecordReport, RecordStatus, WINDOW_BEATS,
};
pub use render::{midi_to_hz, render_sine_audio};
pub use stats::{cover_mca, eval_stats, ArrangerStats, CoverEval, EvalStats};
