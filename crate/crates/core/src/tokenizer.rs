//! Beat-quantized piano token vocabulary, per-segment encoding and decoding,
//! and stitching of consecutive segments into a full piece.
//!
//! Grammar of one segment: for every occupied half-beat `t` in ascending order,
//! `BeatShift(t - cursor)` (omitted when `t == cursor`), then the pitches that
//! end at `t` followed by `NoteOff`, then the pitches that start at `t` followed
//! by `NoteOn`. The segment ends with `EOS`. Notes crossing a segment boundary
//! are carried: their `NoteOff` appears in the segment where they end.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::midi::{HalfBeatSequence, Note, NoteSequence, DEFAULT_VELOCITY, PIANO_HIGH, PIANO_LOW};

pub const VOCAB_SIZE: usize = 232;
pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const NOTE_OFF_ID: u32 = 102;
pub const NOTE_ON_ID: u32 = 103;
const SHIFT_BASE: u32 = 1;
const PITCH_BASE: u32 = 104;
pub const MAX_BEAT_SHIFT: u32 = 100;
/// Half-beats in a 4-beat segment.
pub const SEGMENT_HALFBEATS: u32 = 8;
/// Longest token sequence accepted for one segment.
pub const MAX_DECODE_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Eos,
    /// Advance the time cursor by 1..=100 half-beats.
    BeatShift(u32),
    NoteOff,
    NoteOn,
    Pitch(u8),
}

impl Token {
    pub fn id(self) -> u32 {
        match self {
            Token::Pad => PAD_ID,
            Token::Eos => EOS_ID,
            Token::BeatShift(k) => {
                debug_assert!((1..=MAX_BEAT_SHIFT).contains(&k));
                SHIFT_BASE + k
            }
            Token::NoteOff => NOTE_OFF_ID,
            Token::NoteOn => NOTE_ON_ID,
            Token::Pitch(p) => {
                debug_assert!(p < 128);
                PITCH_BASE + u32::from(p)
            }
        }
    }

    pub fn from_id(id: u32) -> Option<Token> {
        Some(match id {
            PAD_ID => Token::Pad,
            EOS_ID => Token::Eos,
            2..=101 => Token::BeatShift(id - SHIFT_BASE),
            NOTE_OFF_ID => Token::NoteOff,
            NOTE_ON_ID => Token::NoteOn,
            104..=231 => Token::Pitch((id - PITCH_BASE) as u8),
            _ => return None,
        })
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => write!(f, "PAD"),
            Token::Eos => write!(f, "EOS"),
            Token::BeatShift(k) => write!(f, "SHIFT({k})"),
            Token::NoteOff => write!(f, "OFF"),
            Token::NoteOn => write!(f, "ON"),
            Token::Pitch(p) => write!(f, "PITCH({p})"),
        }
    }
}

/// Token ids of one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub segment_halfbeats: u32,
}

impl TokenSeq {
    /// Checks the structural invariants: known ids, at most one EOS and only in
    /// final position, no PAD before EOS, total shift within the vocabulary range.
    pub fn validate(&self) -> Result<()> {
        let mut shift = 0u32;
        for (i, &id) in self.ids.iter().enumerate() {
            match Token::from_id(id) {
                None => return Err(Error::Validation(format!("unknown token id {}", id))),
                Some(Token::Eos) if i + 1 != self.ids.len() => {
                    return Err(Error::Validation("EOS before end of segment".into()))
                }
                Some(Token::Pad) if self.ids[i..].contains(&EOS_ID) => {
                    return Err(Error::Validation("PAD before EOS".into()))
                }
                Some(Token::BeatShift(k)) => shift += k,
                _ => {}
            }
        }
        if shift > MAX_BEAT_SHIFT {
            return Err(Error::Validation(format!(
                "cumulative beat shift {} exceeds {}",
                shift, MAX_BEAT_SHIFT
            )));
        }
        Ok(())
    }

    /// Ids with any trailing EOS removed.
    pub fn without_eos(&self) -> &[u32] {
        match self.ids.last() {
            Some(&EOS_ID) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = Option<Token>> + '_ {
        self.ids.iter().map(|&id| Token::from_id(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Off,
    On,
}

/// One note boundary inside a segment, relative to the segment start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SegmentEvent {
    time: u32,
    kind: EventKind,
    pitch: u8,
}

fn check_pitch(pitch: u8) -> Result<()> {
    if !(PIANO_LOW..=PIANO_HIGH).contains(&pitch) {
        return Err(Error::Validation(format!(
            "pitch {} is not a piano key [{}, {}]",
            pitch, PIANO_LOW, PIANO_HIGH
        )));
    }
    Ok(())
}

fn check_segment_len(segment_halfbeats: u32) -> Result<()> {
    if !(1..=MAX_BEAT_SHIFT).contains(&segment_halfbeats) {
        return Err(Error::Validation(format!(
            "segment length {} outside [1, {}]",
            segment_halfbeats, MAX_BEAT_SHIFT
        )));
    }
    Ok(())
}

fn encode_events(mut events: Vec<SegmentEvent>, segment_halfbeats: u32) -> TokenSeq {
    events.sort_unstable();
    events.dedup();
    let mut ids = Vec::with_capacity(events.len() * 2 + 1);
    let mut cursor = 0u32;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].time;
        if t > cursor {
            ids.push(Token::BeatShift(t - cursor).id());
            cursor = t;
        }
        for kind in [EventKind::Off, EventKind::On] {
            let start = i;
            while i < events.len() && events[i].time == t && events[i].kind == kind {
                ids.push(Token::Pitch(events[i].pitch).id());
                i += 1;
            }
            if i > start {
                ids.push(match kind {
                    EventKind::Off => NOTE_OFF_ID,
                    EventKind::On => NOTE_ON_ID,
                });
            }
        }
    }
    ids.push(EOS_ID);
    TokenSeq {
        ids,
        segment_halfbeats,
    }
}

/// Encodes notes whose times are relative to the segment start. Onsets must lie
/// inside the segment; offsets at or past its end are left to a later segment.
pub fn encode_segment(notes: &HalfBeatSequence, segment_halfbeats: u32) -> Result<TokenSeq> {
    check_segment_len(segment_halfbeats)?;
    let mut events = Vec::with_capacity(notes.len() * 2);
    for n in notes.notes() {
        check_pitch(n.pitch)?;
        if n.onset >= segment_halfbeats {
            return Err(Error::Validation(format!(
                "onset {} outside segment of {} half-beats",
                n.onset, segment_halfbeats
            )));
        }
        events.push(SegmentEvent {
            time: n.onset,
            kind: EventKind::On,
            pitch: n.pitch,
        });
        if n.offset < segment_halfbeats {
            events.push(SegmentEvent {
                time: n.offset,
                kind: EventKind::Off,
                pitch: n.pitch,
            });
        }
    }
    Ok(encode_events(events, segment_halfbeats))
}

/// Number of segments needed to cover a piece.
pub fn segment_count(piece: &HalfBeatSequence, segment_halfbeats: u32) -> usize {
    piece.duration().div_ceil(segment_halfbeats) as usize
}

/// Encodes a whole piece into consecutive segments, emitting each boundary
/// event in the segment that contains it. `num_segments` defaults to enough
/// segments to cover the piece duration.
pub fn encode_piece(
    piece: &HalfBeatSequence,
    segment_halfbeats: u32,
    num_segments: Option<usize>,
) -> Result<Vec<TokenSeq>> {
    check_segment_len(segment_halfbeats)?;
    let count = num_segments.unwrap_or_else(|| segment_count(piece, segment_halfbeats));
    let mut buckets: Vec<Vec<SegmentEvent>> = vec![Vec::new(); count];
    let mut place = |abs: u32, kind: EventKind, pitch: u8| {
        let seg = (abs / segment_halfbeats) as usize;
        if let Some(bucket) = buckets.get_mut(seg) {
            bucket.push(SegmentEvent {
                time: abs % segment_halfbeats,
                kind,
                pitch,
            });
        }
    };
    for n in piece.notes() {
        check_pitch(n.pitch)?;
        place(n.onset, EventKind::On, n.pitch);
        place(n.offset, EventKind::Off, n.pitch);
    }
    Ok(buckets
        .into_iter()
        .map(|events| encode_events(events, segment_halfbeats))
        .collect())
}

/// Tolerant token-stream decoder carrying open notes across segments.
#[derive(Debug, Clone)]
pub struct Decoder {
    open: [Option<u32>; 128],
    notes: Vec<Note<u32>>,
    warnings: usize,
}

impl Default for Decoder {
    fn default() -> Self {
        Decoder {
            open: [None; 128],
            notes: Vec::new(),
            warnings: 0,
        }
    }
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    fn close(&mut self, pitch: u8, at: u32) {
        if let Some(onset) = self.open[pitch as usize].take() {
            if at > onset {
                self.notes
                    .push(Note::new(pitch, onset, at, DEFAULT_VELOCITY));
            } else {
                self.warnings += 1;
            }
        }
    }

    /// Decodes one segment whose time origin is `origin` half-beats.
    pub fn feed(&mut self, ids: &[u32], origin: u32) {
        let mut cursor = origin;
        let mut pending: Vec<u8> = Vec::new();
        for &id in ids {
            match Token::from_id(id) {
                Some(Token::BeatShift(k)) => cursor += k,
                Some(Token::Pitch(p)) => pending.push(p),
                Some(Token::NoteOn) => {
                    for p in pending.drain(..) {
                        if self.open[p as usize].is_some() {
                            self.close(p, cursor);
                        }
                        self.open[p as usize] = Some(cursor);
                    }
                }
                Some(Token::NoteOff) => {
                    for p in std::mem::take(&mut pending) {
                        if self.open[p as usize].is_some() {
                            self.close(p, cursor);
                        } else {
                            self.warnings += 1;
                        }
                    }
                }
                Some(Token::Eos) | Some(Token::Pad) => break,
                None => self.warnings += 1,
            }
        }
        if !pending.is_empty() {
            self.warnings += pending.len();
        }
    }

    /// Pitches still sounding, with their onsets.
    pub fn open_notes(&self) -> Vec<(u8, u32)> {
        self.open
            .iter()
            .enumerate()
            .filter_map(|(p, o)| o.map(|on| (p as u8, on)))
            .collect()
    }

    pub fn warnings(&self) -> usize {
        self.warnings
    }

    /// Closes every open note at `end` and returns the decoded piece.
    pub fn finish(mut self, end: u32) -> (HalfBeatSequence, usize) {
        for p in 0..128u8 {
            self.close(p, end);
        }
        let seq = NoteSequence::new(self.notes, end).expect("decoded notes have positive length");
        (seq, self.warnings)
    }

    fn closed(&self) -> HalfBeatSequence {
        NoteSequence::from_notes(self.notes.clone()).expect("decoded notes have positive length")
    }
}

/// Result of decoding a single segment.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSegment {
    /// Notes that both start and end inside the segment.
    pub notes: HalfBeatSequence,
    /// Pitches whose note was opened and not closed.
    pub open_notes: Vec<u8>,
    pub warnings: usize,
}

pub fn decode_segment(tokens: &TokenSeq) -> DecodedSegment {
    let mut dec = Decoder::new();
    dec.feed(&tokens.ids, 0);
    DecodedSegment {
        notes: dec.closed(),
        open_notes: dec.open_notes().into_iter().map(|(p, _)| p).collect(),
        warnings: dec.warnings(),
    }
}

/// Decoded full piece.
#[derive(Debug, Clone, PartialEq)]
pub struct Stitched {
    pub sequence: HalfBeatSequence,
    pub warnings: usize,
}

/// Decodes consecutive segments into absolute half-beat times. Notes left open
/// at the end are closed at the end of the final segment.
pub fn stitch(segments: &[TokenSeq], segment_halfbeats: u32) -> Stitched {
    let mut dec = Decoder::new();
    for (i, seg) in segments.iter().enumerate() {
        dec.feed(&seg.ids, i as u32 * segment_halfbeats);
    }
    let (sequence, warnings) = dec.finish(segments.len() as u32 * segment_halfbeats);
    Stitched { sequence, warnings }
}

/// Token file: one segment per line, space-separated decimal ids.
pub fn format_token_file(segments: &[TokenSeq]) -> String {
    let mut out = String::new();
    for seg in segments {
        let line: Vec<String> = seg.ids.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_token_file(text: &str, segment_halfbeats: u32) -> Result<Vec<TokenSeq>> {
    text.lines()
        .enumerate()
        .map(|(lineno, line)| {
            let ids = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>()
                        .ok()
                        .filter(|&id| (id as usize) < VOCAB_SIZE)
                        .ok_or_else(|| {
                            Error::Validation(format!(
                                "token file line {}: bad id {:?}",
                                lineno + 1,
                                tok
                            ))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenSeq {
                ids,
                segment_halfbeats,
            })
        })
        .collect()
}

pub fn read_token_file(path: impl AsRef<Path>, segment_halfbeats: u32) -> Result<Vec<TokenSeq>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_token_file(&text, segment_halfbeats)
}
