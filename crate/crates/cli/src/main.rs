use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use pianocover::audio::{read_wav, write_wav};
use pianocover::beats::{halfbeats_to_seconds, quantize, read_beats, TrackerConfig};
use pianocover::features::FrontendConfig;
use pianocover::filtering::{filter_with, melody_chroma_accuracy, midi_topline, read_f0_csv};
use pianocover::midi::{parse_smf, write_smf, SecondsSequence};
use pianocover::model::{parse_config_file, read_checkpoint, train, write_checkpoint, FloatWidth};
use pianocover::pipeline::{
    align_cover, build_dataset, eval_stats, generate_cover, read_dataset, read_manifest,
    render_sine_audio, write_dataset, BuildConfig, CoverEval, CoverJob, COVER_TEMPO_BPM,
    COVER_TICKS_PER_QUARTER,
};
use pianocover::sync::DEFAULT_FRAME_RATE;
use pianocover::tokenizer::{
    encode_piece, format_token_file, read_token_file, stitch, SEGMENT_HALFBEATS,
};
use pianocover::ErrorKind;

#[derive(Parser)]
#[command(
    name = "pianocover",
    version,
    about = "Beat-quantized piano covers from pop audio"
)]
struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align a cover MIDI to pop audio with chroma DTW.
    Sync {
        pop: PathBuf,
        cover: PathBuf,
        /// Snap the aligned notes to the half-beats of this beat file.
        #[arg(long)]
        beats: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FRAME_RATE)]
        frame_rate: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Apply the melody-chroma and length rules to an aligned cover; prints a JSON report.
    Filter {
        aligned: PathBuf,
        /// Reference melody contour (time,frequency CSV). Without it the MCA rule is skipped.
        #[arg(long)]
        f0: Option<PathBuf>,
        /// Pop audio length in seconds.
        #[arg(long)]
        pop_length: f64,
        /// Raw cover length in seconds; defaults to the aligned MIDI's duration.
        #[arg(long)]
        cover_length: Option<f64>,
    },
    /// Quantize a MIDI file to a beat grid and write segment tokens.
    Tokenize {
        midi: PathBuf,
        #[arg(long)]
        beats: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Stitch segment tokens back into a MIDI file on a beat grid.
    Detokenize {
        tokens: PathBuf,
        #[arg(long)]
        beats: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Build a training dataset directory from a manifest CSV.
    BuildDataset {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = pianocover::features::DEFAULT_N_MELS)]
        n_mels: usize,
        #[arg(long, default_value_t = pianocover::tokenizer::MAX_DECODE_LEN)]
        max_decode_len: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        dataset: PathBuf,
        /// Flat key=value file with model and training keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Store checkpoint tensors as f64 instead of f32.
        #[arg(long)]
        f64: bool,
    },
    /// Generate a piano cover for an audio file.
    Cover {
        audio: PathBuf,
        #[arg(long)]
        arranger: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use this beat file instead of tracking beats.
        #[arg(long)]
        beats: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Per-arranger note density and AMCA as JSON.
    ///
    /// Each entry is PATH[,ARRANGER[,F0_CSV]]; the arranger defaults to 0.
    Stats {
        #[arg(required = true)]
        entries: Vec<String>,
    },
    /// Render a MIDI file to a sine-tone WAV.
    Render {
        midi: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 22050)]
        sample_rate: u32,
    },
}

fn read_midi(path: &Path) -> Result<SecondsSequence> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = parse_smf(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    for w in &parsed.warnings {
        log::warn!("{}: {}", path.display(), w);
    }
    Ok(parsed.sequence)
}

fn write_midi(path: &Path, seq: &SecondsSequence) -> Result<()> {
    let bytes = write_smf(seq, COVER_TICKS_PER_QUARTER, COVER_TEMPO_BPM)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Sync {
            pop,
            cover,
            beats,
            frame_rate,
            out,
        } => {
            let audio = read_wav(&pop)?;
            let mut aligned = align_cover(&read_midi(&cover)?, &audio, frame_rate)?;
            if let Some(b) = beats {
                let grid = read_beats(&b)?;
                aligned = halfbeats_to_seconds(&quantize(&aligned, &grid).sequence, &grid);
            }
            info!("aligned {} notes", aligned.len());
            write_midi(&out, &aligned)
        }
        Command::Filter {
            aligned,
            f0,
            pop_length,
            cover_length,
        } => {
            let seq = read_midi(&aligned)?;
            let mca = match f0 {
                Some(p) => {
                    let contour = read_f0_csv(&p)?;
                    Some(melody_chroma_accuracy(
                        &contour,
                        &midi_topline(&seq, &contour.times),
                    ))
                }
                None => None,
            };
            let report = filter_with(mca, pop_length, cover_length.unwrap_or(seq.duration()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Tokenize { midi, beats, out } => {
            let grid = read_beats(&beats)?;
            let q = quantize(&read_midi(&midi)?, &grid);
            if q.clamped > 0 {
                log::warn!("{} note times clamped to the grid", q.clamped);
            }
            let segments = encode_piece(&q.sequence, SEGMENT_HALFBEATS, None)?;
            info!("{} segments", segments.len());
            write_text(&out, &format_token_file(&segments))
        }
        Command::Detokenize { tokens, beats, out } => {
            let grid = read_beats(&beats)?;
            let stitched = stitch(
                &read_token_file(&tokens, SEGMENT_HALFBEATS)?,
                SEGMENT_HALFBEATS,
            );
            if stitched.warnings > 0 {
                log::warn!("{} malformed token events skipped", stitched.warnings);
            }
            write_midi(&out, &halfbeats_to_seconds(&stitched.sequence, &grid))
        }
        Command::BuildDataset {
            manifest,
            out,
            n_mels,
            max_decode_len,
        } => {
            let records = read_manifest(&manifest)?;
            let cfg = BuildConfig {
                frontend: FrontendConfig {
                    n_mels,
                    ..FrontendConfig::default()
                },
                max_decode_len,
                ..BuildConfig::default()
            };
            let (dataset, report) = build_dataset(&records, &cfg);
            write_dataset(&out, &dataset, &report)?;
            println!(
                "{} records: {} kept, {} discarded, {} failed; {} examples",
                report.total, report.kept, report.discarded, report.failed, report.examples
            );
            Ok(())
        }
        Command::Train {
            dataset,
            config,
            out,
            f64,
        } => {
            let text = match &config {
                Some(p) => std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            let (model_cfg, train_cfg) = parse_config_file(&text)?;
            let frontend = FrontendConfig {
                n_mels: model_cfg.n_mels,
                ..FrontendConfig::default()
            };
            let examples = read_dataset(&dataset, &frontend)?;
            info!(
                "training on {} examples, {} parameters",
                examples.len(),
                model_cfg.count_params()
            );
            let trained = train(&examples, &train_cfg, &model_cfg)?;
            let width = if f64 {
                FloatWidth::F64
            } else {
                FloatWidth::F32
            };
            write_checkpoint(&out, &trained.params, width)?;
            println!(
                "{} steps, final batch loss {:.6}",
                trained.losses.len(),
                trained.losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Cover {
            audio,
            arranger,
            checkpoint,
            beats,
            out,
        } => {
            let params = read_checkpoint(&checkpoint)?;
            let audio = read_wav(&audio)?;
            let beats = beats.map(read_beats).transpose()?;
            let job = CoverJob {
                audio: &audio,
                arranger_id: arranger,
                params: &params,
                beats,
                tracker: TrackerConfig::default(),
            };
            let cover = generate_cover(&job)?;
            info!(
                "{} windows, {} notes, {} truncated windows",
                cover.windows,
                cover.sequence.len(),
                cover.truncated_windows
            );
            std::fs::write(&out, &cover.midi).with_context(|| format!("writing {}", out.display()))
        }
        Command::Stats { entries } => {
            let mut covers = Vec::with_capacity(entries.len());
            for entry in &entries {
                let mut parts = entry.split(',');
                let path = parts
                    .next()
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| anyhow!("empty entry"))?;
                let arranger_id = match parts.next() {
                    Some(a) => a
                        .parse()
                        .with_context(|| format!("arranger id in '{}'", entry))?,
                    None => 0,
                };
                let reference = parts.next().map(read_f0_csv).transpose()?;
                if parts.next().is_some() {
                    bail!(pianocover::Error::Validation(format!(
                        "too many fields in '{}'",
                        entry
                    )));
                }
                covers.push(CoverEval {
                    sequence: read_midi(Path::new(path))?,
                    arranger_id,
                    reference,
                });
            }
            println!("{}", serde_json::to_string_pretty(&eval_stats(&covers)?)?);
            Ok(())
        }
        Command::Render {
            midi,
            out,
            sample_rate,
        } => {
            let audio = render_sine_audio(&read_midi(&midi)?, sample_rate)?;
            write_wav(&out, &audio)?;
            Ok(())
        }
    }
}

/// 1 validation, 2 I/O, 3 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pianocover::Error>() {
            return match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Io => 2,
                ErrorKind::Numeric => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
