//! Note sequences and Standard MIDI File reading/writing.
//!
//! A [`NoteSequence`] is generic over its time representation: `f64` seconds
//! for performances, `u32` half-beat indices for quantized data. Both share
//! the same canonical ordering `(onset, pitch, offset)`.

use std::cmp::Ordering;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Velocity written for notes that carry no velocity information upstream
/// (detokenized model output).
pub const DEFAULT_VELOCITY: u8 = 77;

/// Lowest and highest piano key.
pub const PIANO_LOW: u8 = 21;
pub const PIANO_HIGH: u8 = 108;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeUnit {
    Seconds,
    HalfBeats,
}

/// A time coordinate usable inside a [`NoteSequence`].
pub trait TimeValue: Copy + PartialOrd + Debug + Default {
    const UNIT: TimeUnit;
    fn is_valid(self) -> bool;
    fn total_cmp(&self, other: &Self) -> Ordering;
}

impl TimeValue for f64 {
    const UNIT: TimeUnit = TimeUnit::Seconds;
    fn is_valid(self) -> bool {
        self.is_finite() && self >= 0.0
    }
    fn total_cmp(&self, other: &Self) -> Ordering {
        f64::total_cmp(self, other)
    }
}

impl TimeValue for u32 {
    const UNIT: TimeUnit = TimeUnit::HalfBeats;
    fn is_valid(self) -> bool {
        true
    }
    fn total_cmp(&self, other: &Self) -> Ordering {
        self.cmp(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note<T> {
    pub pitch: u8,
    pub onset: T,
    pub offset: T,
    pub velocity: u8,
}

impl<T: TimeValue> Note<T> {
    pub fn new(pitch: u8, onset: T, offset: T, velocity: u8) -> Self {
        Note {
            pitch,
            onset,
            offset,
            velocity,
        }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.onset
            .total_cmp(&other.onset)
            .then(self.pitch.cmp(&other.pitch))
            .then(self.offset.total_cmp(&other.offset))
            .then(self.velocity.cmp(&other.velocity))
    }

    fn validate(&self) -> Result<()> {
        if self.pitch > 127 {
            return Err(Error::Validation(format!(
                "pitch {} outside [0,127]",
                self.pitch
            )));
        }
        if self.velocity == 0 || self.velocity > 127 {
            return Err(Error::Validation(format!(
                "velocity {} outside [1,127]",
                self.velocity
            )));
        }
        if !self.onset.is_valid() || !self.offset.is_valid() {
            return Err(Error::Validation(format!(
                "note times must be finite and nonnegative: {:?}",
                self
            )));
        }
        if self.offset.total_cmp(&self.onset) != Ordering::Greater {
            return Err(Error::Validation(format!(
                "note offset must be after onset: {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Notes in canonical order plus the total length of the piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteSequence<T> {
    notes: Vec<Note<T>>,
    duration: T,
}

pub type SecondsSequence = NoteSequence<f64>;
pub type HalfBeatSequence = NoteSequence<u32>;

impl<T: TimeValue> Default for NoteSequence<T> {
    fn default() -> Self {
        NoteSequence {
            notes: Vec::new(),
            duration: T::default(),
        }
    }
}

fn max_time<T: TimeValue>(a: T, b: T) -> T {
    if b.total_cmp(&a) == Ordering::Greater {
        b
    } else {
        a
    }
}

impl<T: TimeValue> NoteSequence<T> {
    /// Builds a validated, canonically sorted sequence. `duration` is raised to
    /// the latest offset when shorter.
    pub fn new(notes: Vec<Note<T>>, duration: T) -> Result<Self> {
        for n in &notes {
            n.validate()?;
        }
        if !duration.is_valid() {
            return Err(Error::Validation(format!(
                "invalid duration {:?}",
                duration
            )));
        }
        let duration = notes.iter().fold(duration, |d, n| max_time(d, n.offset));
        let mut seq = NoteSequence { notes, duration };
        seq.canonicalize();
        Ok(seq)
    }

    /// Sequence whose duration is the latest note offset.
    pub fn from_notes(notes: Vec<Note<T>>) -> Result<Self> {
        Self::new(notes, T::default())
    }

    pub fn notes(&self) -> &[Note<T>] {
        &self.notes
    }

    pub fn into_notes(self) -> Vec<Note<T>> {
        self.notes
    }

    pub fn duration(&self) -> T {
        self.duration
    }

    pub fn time_unit(&self) -> TimeUnit {
        T::UNIT
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Sorts by `(onset, pitch, offset)` and removes exact duplicates.
    pub fn canonicalize(&mut self) {
        self.notes.sort_by(|a, b| a.canonical_cmp(b));
        self.notes.dedup_by(|b, a| {
            a.onset.total_cmp(&b.onset) == Ordering::Equal
                && a.pitch == b.pitch
                && a.offset.total_cmp(&b.offset) == Ordering::Equal
        });
    }

    /// Removes overlaps between notes of the same pitch: an earlier note is cut
    /// at the onset of the next one; notes sharing an onset merge into the
    /// longest.
    pub fn resolve_same_pitch_overlaps(&mut self) {
        self.canonicalize();
        let mut out: Vec<Note<T>> = Vec::with_capacity(self.notes.len());
        let mut last_by_pitch: [Option<usize>; 128] = [None; 128];
        for note in self.notes.drain(..) {
            let slot = &mut last_by_pitch[note.pitch as usize];
            if let Some(prev_idx) = *slot {
                let prev = &mut out[prev_idx];
                if prev.onset.total_cmp(&note.onset) == Ordering::Equal {
                    prev.offset = max_time(prev.offset, note.offset);
                    continue;
                }
                if prev.offset.total_cmp(&note.onset) == Ordering::Greater {
                    prev.offset = note.onset;
                }
            }
            *slot = Some(out.len());
            out.push(note);
        }
        self.notes = out;
        self.canonicalize();
    }
}

/// Note onsets per second.
pub fn note_density(seq: &SecondsSequence) -> Result<f64> {
    if seq.duration() <= 0.0 {
        return Err(Error::Undefined(
            "note density of a zero-length sequence".into(),
        ));
    }
    Ok(seq.len() as f64 / seq.duration())
}

/// Result of [`parse_smf`]: the merged performance and any recoverable anomalies.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub sequence: SecondsSequence,
    pub warnings: Vec<String>,
}

const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Clone, Copy)]
enum Timing {
    TicksPerQuarter(u16),
    /// Ticks per second for SMPTE division.
    Smpte(f64),
}

#[derive(Debug, Clone, Copy)]
enum RawKind {
    On(u8),
    Off,
}

#[derive(Debug, Clone, Copy)]
struct RawEvent {
    tick: u64,
    track: usize,
    seq: usize,
    pitch: u8,
    kind: RawKind,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::MidiFormat {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err(format!("need {} bytes, data truncated", n)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::MidiFormat {
            offset: start,
            message: "variable-length quantity longer than 4 bytes".into(),
        })
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

struct TrackData {
    events: Vec<RawEvent>,
    tempos: Vec<(u64, usize, usize, u32)>,
    end_tick: u64,
}

fn parse_track(r: &mut Reader<'_>, end: usize, track: usize) -> Result<TrackData> {
    let mut data = TrackData {
        events: Vec::new(),
        tempos: Vec::new(),
        end_tick: 0,
    };
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut seq = 0usize;
    while r.pos < end {
        let delta = r.vlq()?;
        tick = tick.saturating_add(u64::from(delta));
        data.end_tick = tick;
        let status_pos = r.pos;
        let first = r.u8()?;
        match first {
            0xFF => {
                let meta_type = r.u8()?;
                let len = r.vlq()? as usize;
                let payload = r.take(len)?;
                match meta_type {
                    0x2F => {
                        r.pos = end;
                        break;
                    }
                    0x51 => {
                        if payload.len() != 3 {
                            return Err(Error::MidiFormat {
                                offset: status_pos,
                                message: "tempo meta event must carry 3 bytes".into(),
                            });
                        }
                        let us = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if us == 0 {
                            return Err(Error::MidiFormat {
                                offset: status_pos,
                                message: "zero tempo".into(),
                            });
                        }
                        data.tempos.push((tick, track, seq, us));
                        seq += 1;
                    }
                    _ => {}
                }
                running = None;
            }
            0xF0 | 0xF7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
                running = None;
            }
            0xF1..=0xFE => {
                return Err(Error::MidiFormat {
                    offset: status_pos,
                    message: format!("system message 0x{:02X} not allowed in a track", first),
                });
            }
            _ => {
                let (status, data1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, r.u8()?)
                } else {
                    let status = running.ok_or(Error::MidiFormat {
                        offset: status_pos,
                        message: "data byte without running status".into(),
                    })?;
                    (status, first)
                };
                let kind = status & 0xF0;
                let data2 = match kind {
                    0xC0 | 0xD0 => None,
                    _ => Some(r.u8()?),
                };
                if data1 & 0x80 != 0 || data2.is_some_and(|d| d & 0x80 != 0) {
                    return Err(Error::MidiFormat {
                        offset: status_pos,
                        message: "channel message data byte has high bit set".into(),
                    });
                }
                let ev = match (kind, data2) {
                    (0x90, Some(v)) if v > 0 => Some(RawKind::On(v)),
                    (0x90, Some(_)) | (0x80, Some(_)) => Some(RawKind::Off),
                    _ => None,
                };
                if let Some(kind) = ev {
                    data.events.push(RawEvent {
                        tick,
                        track,
                        seq,
                        pitch: data1,
                        kind,
                    });
                    seq += 1;
                }
            }
        }
    }
    if r.pos > end {
        return Err(Error::MidiFormat {
            offset: end,
            message: "event runs past end of track chunk".into(),
        });
    }
    r.pos = end;
    Ok(data)
}

/// Piecewise tempo map converting ticks to seconds.
struct TempoMap {
    timing: Timing,
    /// (start tick, start seconds, microseconds per quarter)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(timing: Timing, mut tempos: Vec<(u64, usize, usize, u32)>) -> Self {
        tempos.sort_by_key(|&(tick, track, seq, _)| (tick, track, seq));
        let tpq = match timing {
            Timing::TicksPerQuarter(t) => f64::from(t),
            Timing::Smpte(_) => 1.0,
        };
        let mut segments: Vec<(u64, f64, u32)> = vec![(0, 0.0, DEFAULT_TEMPO_US)];
        for (tick, _, _, us) in tempos {
            let (t0, s0, us0) = *segments.last().unwrap();
            let seconds = s0 + (tick - t0) as f64 * f64::from(us0) / (tpq * 1e6);
            if tick == t0 {
                segments.pop();
            }
            segments.push((tick, seconds, us));
        }
        TempoMap { timing, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        match self.timing {
            Timing::Smpte(ticks_per_second) => tick as f64 / ticks_per_second,
            Timing::TicksPerQuarter(tpq) => {
                let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
                let (t0, s0, us) = self.segments[idx];
                s0 + (tick - t0) as f64 * f64::from(us) / (f64::from(tpq) * 1e6)
            }
        }
    }
}

/// Parses a format 0 or 1 Standard MIDI File into a seconds-based sequence,
/// merging every track and channel.
pub fn parse_smf(bytes: &[u8]) -> Result<ParsedMidi> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| r.err("missing MThd header"))? != b"MThd" {
        return Err(Error::MidiFormat {
            offset: 0,
            message: "missing MThd header".into(),
        });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err("header chunk shorter than 6 bytes"));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let _ntracks = r.u16()?;
    let division_pos = r.pos;
    let division = r.u16()?;
    r.take(header_len - 6)?;
    debug_assert!(r.pos >= header_start);
    if format > 1 {
        return Err(Error::MidiFormat {
            offset: header_start,
            message: format!("SMF format {} is not supported", format),
        });
    }
    let timing = if division & 0x8000 != 0 {
        let fps = -i32::from((division >> 8) as u8 as i8);
        let ticks_per_frame = i32::from(division & 0xFF);
        if fps <= 0 || ticks_per_frame == 0 {
            return Err(Error::MidiFormat {
                offset: division_pos,
                message: "invalid SMPTE division".into(),
            });
        }
        let fps = if fps == 29 { 29.97 } else { f64::from(fps) };
        Timing::Smpte(fps * f64::from(ticks_per_frame))
    } else {
        if division == 0 {
            return Err(Error::MidiFormat {
                offset: division_pos,
                message: "zero ticks per quarter note".into(),
            });
        }
        Timing::TicksPerQuarter(division)
    };

    let mut events = Vec::new();
    let mut tempos = Vec::new();
    let mut end_tick = 0u64;
    let mut track = 0usize;
    while !r.at_end() {
        let chunk_pos = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let body_end =
            r.pos
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or(Error::MidiFormat {
                    offset: chunk_pos,
                    message: format!("chunk length {} exceeds file size", len),
                })?;
        if id == b"MTrk" {
            let data = parse_track(&mut r, body_end, track)?;
            events.extend(data.events);
            tempos.extend(data.tempos);
            end_tick = end_tick.max(data.end_tick);
            track += 1;
        } else {
            r.pos = body_end;
        }
    }

    let tempo_map = TempoMap::new(timing, tempos);
    events.sort_by_key(|e| (e.tick, e.track, e.seq));

    let mut warnings = Vec::new();
    let mut open: [Option<(u64, u8)>; 128] = [None; 128];
    let mut notes = Vec::new();
    let mut push_note = |pitch: u8, start: u64, end: u64, vel: u8, warnings: &mut Vec<String>| {
        if end > start {
            notes.push(Note::new(
                pitch,
                tempo_map.seconds(start),
                tempo_map.seconds(end),
                vel,
            ));
        } else {
            warnings.push(format!(
                "dropped zero-length note pitch {} at tick {}",
                pitch, start
            ));
        }
    };
    for ev in &events {
        let slot = &mut open[ev.pitch as usize];
        match ev.kind {
            RawKind::On(vel) => {
                if let Some((start, v)) = slot.take() {
                    push_note(ev.pitch, start, ev.tick, v, &mut warnings);
                }
                *slot = Some((ev.tick, vel));
            }
            RawKind::Off => match slot.take() {
                Some((start, v)) => push_note(ev.pitch, start, ev.tick, v, &mut warnings),
                None => warnings.push(format!(
                    "note-off without note-on, pitch {} at tick {}",
                    ev.pitch, ev.tick
                )),
            },
        }
    }
    for (pitch, slot) in open.iter().enumerate() {
        if let Some((start, v)) = *slot {
            warnings.push(format!(
                "unterminated note pitch {} from tick {} closed at end of file",
                pitch, start
            ));
            push_note(pitch as u8, start, end_tick, v, &mut warnings);
        }
    }
    let duration = tempo_map.seconds(end_tick);
    let sequence = NoteSequence::new(notes, duration)?;
    Ok(ParsedMidi { sequence, warnings })
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7F) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let cont = if i > 0 { 0x80 } else { 0 };
        out.push(buf[i] | cont);
    }
}

/// Microseconds per quarter note for a tempo in BPM, as written to the file.
pub fn tempo_microseconds(tempo_bpm: f64) -> Result<u32> {
    if !(tempo_bpm.is_finite() && tempo_bpm > 0.0) {
        return Err(Error::Validation(format!("invalid tempo {}", tempo_bpm)));
    }
    let us = (60e6 / tempo_bpm).round();
    if !(1.0..=f64::from(0xFF_FFFFu32)).contains(&us) {
        return Err(Error::Validation(format!(
            "tempo {} BPM not representable",
            tempo_bpm
        )));
    }
    Ok(us as u32)
}

/// Writes a format-0 SMF with one tempo event and all notes on channel 0.
///
/// Times are rounded to the nearest tick. A note that would collapse to zero
/// ticks is lengthened to one tick. At equal ticks note-offs precede
/// note-ons, each group in ascending pitch order. Running status is not used.
pub fn write_smf(seq: &SecondsSequence, ticks_per_quarter: u16, tempo_bpm: f64) -> Result<Vec<u8>> {
    if ticks_per_quarter == 0 || ticks_per_quarter > 0x7FFF {
        return Err(Error::Validation(format!(
            "ticks per quarter {} outside [1, 32767]",
            ticks_per_quarter
        )));
    }
    let us = tempo_microseconds(tempo_bpm)?;
    let ticks_per_second = f64::from(ticks_per_quarter) * 1e6 / f64::from(us);
    let to_tick = |t: f64| -> Result<u32> {
        let tick = (t * ticks_per_second).round();
        if !(0.0..=f64::from(u32::MAX / 2)).contains(&tick) {
            return Err(Error::Validation(format!("time {} s out of range", t)));
        }
        Ok(tick as u32)
    };

    // (tick, 0 = off / 1 = on, pitch, velocity)
    let mut events: Vec<(u32, u8, u8, u8)> = Vec::with_capacity(seq.len() * 2);
    let mut last_tick = 0u32;
    for n in seq.notes() {
        if n.pitch > 127 {
            return Err(Error::Validation(format!(
                "pitch {} outside [0,127]",
                n.pitch
            )));
        }
        let on = to_tick(n.onset)?;
        let off = to_tick(n.offset)?.max(on + 1);
        events.push((on, 1, n.pitch, n.velocity));
        events.push((off, 0, n.pitch, 64));
        last_tick = last_tick.max(off);
    }
    events.sort_unstable();
    let end_tick = last_tick.max(to_tick(seq.duration())?);

    let mut track = Vec::with_capacity(events.len() * 4 + 16);
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&us.to_be_bytes()[1..]);
    let mut cursor = 0u32;
    for (tick, kind, pitch, vel) in events {
        push_vlq(&mut track, tick - cursor);
        cursor = tick;
        let status = if kind == 1 { 0x90 } else { 0x80 };
        track.extend_from_slice(&[status, pitch, vel]);
    }
    push_vlq(&mut track, end_tick - cursor);
    track.extend_from_slice(&[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

/// Seconds of tick `tick` under a single tempo, computed exactly as the parser does.
pub fn tick_seconds(tick: u64, ticks_per_quarter: u16, tempo_us: u32) -> f64 {
    0.0 + tick as f64 * f64::from(tempo_us) / (f64::from(ticks_per_quarter) * 1e6)
}
