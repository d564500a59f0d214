//! Piano cover generation from audio.
//!
//! The crate covers the whole data path: Standard MIDI File I/O, beat grids
//! and half-beat quantization, chroma DTW alignment of cover MIDI to audio,
//! melody-chroma filtering, the log-Mel frontend, a beat-quantized token
//! vocabulary, an arranger-conditioned encoder-decoder transformer with
//! training and greedy decoding, and the pipeline that ties them together.

pub mod audio;
pub mod beats;
pub mod error;
pub mod features;
pub mod filtering;
pub mod midi;
pub mod model;
pub mod pipeline;
pub mod sync;
pub mod tokenizer;

pub use audio::Audio;
pub use beats::BeatGrid;
pub use error::{Error, ErrorKind, Result};
pub use features::MelSpectrogram;
pub use midi::{HalfBeatSequence, Note, NoteSequence, SecondsSequence, TimeUnit};
pub use model::{ModelConfig, ModelParams};
pub use sync::{Chromagram, WarpPath};
pub use tokenizer::{Token, TokenSeq};
