//! Melody chroma accuracy and the pair-quality filter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::midi::SecondsSequence;

/// f0 hop in seconds (1024 samples at 44.1 kHz).
pub const F0_HOP: f64 = 1024.0 / 44100.0;
/// Pairs with melody chroma accuracy at or below this are discarded.
pub const MCA_THRESHOLD: f64 = 0.15;
/// Pairs whose relative length difference reaches this are discarded.
pub const LENGTH_DIFF_THRESHOLD: f64 = 0.20;
/// Tolerance of a correct chroma frame, in cents.
pub const CENT_TOLERANCE: f64 = 50.0;

/// Uniformly sampled fundamental-frequency contour; 0 Hz means unvoiced.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    pub times: Vec<f64>,
    pub f0_hz: Vec<f64>,
}

impl F0Contour {
    pub fn new(times: Vec<f64>, f0_hz: Vec<f64>) -> Result<Self> {
        if times.len() != f0_hz.len() {
            return Err(Error::Validation(
                "f0 times and values differ in length".into(),
            ));
        }
        if f0_hz.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Validation(
                "f0 values must be finite and nonnegative".into(),
            ));
        }
        if times.len() >= 2 {
            let hop = times[1] - times[0];
            if hop <= 0.0 {
                return Err(Error::Validation("f0 times must increase".into()));
            }
            for (k, t) in times.iter().enumerate() {
                if (t - (times[0] + k as f64 * hop)).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "f0 times are not uniform at row {}",
                        k
                    )));
                }
            }
        }
        Ok(F0Contour { times, f0_hz })
    }

    /// Contour on the standard grid `k * 1024 / 44100`.
    pub fn on_standard_grid(f0_hz: Vec<f64>) -> Result<Self> {
        let times = (0..f0_hz.len()).map(|k| k as f64 * F0_HOP).collect();
        F0Contour::new(times, f0_hz)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Reads an f0 CSV with header `time,frequency`.
pub fn read_f0_csv(path: impl AsRef<Path>) -> Result<F0Contour> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_f0_csv(file)
}

pub fn parse_f0_csv(reader: impl std::io::Read) -> Result<F0Contour> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "time" || &headers[1] != "frequency" {
        return Err(Error::Validation(format!(
            "f0 CSV header must be `time,frequency`, got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut times = Vec::new();
    let mut f0 = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let parse = |i: usize| -> Result<f64> {
            record.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                Error::Validation(format!("f0 CSV row {}: bad field {}", row + 1, i))
            })
        };
        times.push(parse(0)?);
        f0.push(parse(1)?);
    }
    F0Contour::new(times, f0)
}

pub fn write_f0_csv(contour: &F0Contour) -> String {
    let mut out = String::from("time,frequency\n");
    for (t, f) in contour.times.iter().zip(&contour.f0_hz) {
        out.push_str(&format!("{},{}\n", t, f));
    }
    out
}

/// Highest sounding pitch at each time (`onset <= t < offset`), `None` where
/// nothing sounds.
pub fn midi_topline(seq: &SecondsSequence, grid_times: &[f64]) -> Vec<Option<u8>> {
    let mut out = vec![None; grid_times.len()];
    let uniform = grid_times.len() >= 2;
    let (t0, hop) = if uniform {
        (grid_times[0], grid_times[1] - grid_times[0])
    } else {
        (0.0, 0.0)
    };
    for n in seq.notes() {
        let range = if uniform && hop > 0.0 {
            let lo = (((n.onset - t0) / hop).floor().max(0.0) as usize).saturating_sub(1);
            let hi = ((((n.offset - t0) / hop).ceil().max(0.0)) as usize + 1).min(grid_times.len());
            lo.min(hi)..hi
        } else {
            0..grid_times.len()
        };
        for k in range {
            let t = grid_times[k];
            if n.onset <= t && t < n.offset && out[k].is_none_or(|p| p < n.pitch) {
                out[k] = Some(n.pitch);
            }
        }
    }
    out
}

/// Cents relative to 10 Hz.
fn hz_to_cents(hz: f64) -> f64 {
    1200.0 * (hz / 10.0).log2()
}

fn midi_to_cents(pitch: u8) -> f64 {
    hz_to_cents(440.0) + 100.0 * (f64::from(pitch) - 69.0)
}

/// Whether two cent values agree within the chroma tolerance, ignoring octaves.
pub fn chroma_match(ref_cents: f64, est_cents: f64) -> bool {
    let diff = (ref_cents - est_cents).rem_euclid(1200.0);
    diff.min(1200.0 - diff) <= CENT_TOLERANCE
}

/// Fraction of reference-voiced frames whose estimated pitch is voiced and
/// within 50 cents of the reference modulo octaves. The shorter input is
/// padded with unvoiced frames.
pub fn melody_chroma_accuracy(reference: &F0Contour, est_topline: &[Option<u8>]) -> Result<f64> {
    let mut voiced = 0usize;
    let mut correct = 0usize;
    for (k, &f) in reference.f0_hz.iter().enumerate() {
        if f <= 0.0 {
            continue;
        }
        voiced += 1;
        if let Some(Some(p)) = est_topline.get(k) {
            if chroma_match(hz_to_cents(f), midi_to_cents(*p)) {
                correct += 1;
            }
        }
    }
    if voiced == 0 {
        return Err(Error::Undefined(
            "reference contour has no voiced frames".into(),
        ));
    }
    Ok(correct as f64 / voiced as f64)
}

/// Contour that follows the top line of `seq` exactly, on the standard f0 grid.
pub fn contour_from_topline(seq: &SecondsSequence, frames: usize) -> F0Contour {
    let times: Vec<f64> = (0..frames).map(|k| k as f64 * F0_HOP).collect();
    let f0 = midi_topline(seq, &times)
        .into_iter()
        .map(|p| p.map_or(0.0, |p| 440.0 * 2f64.powf((f64::from(p) - 69.0) / 12.0)))
        .collect();
    F0Contour { times, f0_hz: f0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Keep,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    LowMelodyChromaAccuracy,
    LengthMismatch,
    UndefinedMelodyChromaAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// `None` when no reference contour was available.
    pub mca: Option<f64>,
    pub length_ratio_diff: f64,
    pub verdict: Verdict,
    pub reasons: Vec<FilterRule>,
}

/// Discards a pair when `mca <= 0.15` or the relative length difference is at
/// least 20%.
pub fn filter_pair(mca: f64, pop_len: f64, cover_len: f64) -> Result<FilterReport> {
    filter_with(Some(Ok(mca)), pop_len, cover_len)
}

/// Filter variant used by dataset builds: the MCA may be missing (no f0
/// reference, rule skipped) or undefined (no voiced frames, discarded).
pub fn filter_with(mca: Option<Result<f64>>, pop_len: f64, cover_len: f64) -> Result<FilterReport> {
    if !(pop_len.is_finite() && pop_len > 0.0) {
        return Err(Error::Parameter(format!(
            "pop length must be positive, got {}",
            pop_len
        )));
    }
    let length_ratio_diff = (pop_len - cover_len).abs() / pop_len;
    let mut reasons = Vec::new();
    let mca = match mca {
        None => None,
        Some(Ok(v)) => {
            if v <= MCA_THRESHOLD {
                reasons.push(FilterRule::LowMelodyChromaAccuracy);
            }
            Some(v)
        }
        Some(Err(Error::Undefined(_))) => {
            reasons.push(FilterRule::UndefinedMelodyChromaAccuracy);
            None
        }
        Some(Err(e)) => return Err(e),
    };
    if length_ratio_diff >= LENGTH_DIFF_THRESHOLD {
        reasons.push(FilterRule::LengthMismatch);
    }
    let verdict = if reasons.is_empty() {
        Verdict::Keep
    } else {
        Verdict::Discard
    };
    Ok(FilterReport {
        mca,
        length_ratio_diff,
        verdict,
        reasons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::Note;

    #[test]
    fn topline_examples() {
        let seq = SecondsSequence::from_notes(vec![Note::new(60, 0.0, 1.0, 64)]).unwrap();
        assert_eq!(midi_topline(&seq, &[0.25, 0.5]), vec![Some(60), Some(60)]);
        let seq = SecondsSequence::from_notes(vec![
            Note::new(60, 0.0, 1.0, 64),
            Note::new(64, 0.2, 0.8, 64),
        ])
        .unwrap();
        assert_eq!(
            midi_topline(&seq, &[0.0, 0.25, 0.5, 0.75, 1.0]),
            vec![Some(60), Some(64), Some(64), Some(64), None]
        );
    }

    #[test]
    fn mca_examples() {
        let reference = F0Contour::on_standard_grid(vec![440.0; 50]).unwrap();
        assert_eq!(
            melody_chroma_accuracy(&reference, &[Some(69); 50]).unwrap(),
            1.0
        );
        assert_eq!(
            melody_chroma_accuracy(&reference, &[Some(57); 50]).unwrap(),
            1.0
        );
        assert_eq!(
            melody_chroma_accuracy(&reference, &[Some(70); 50]).unwrap(),
            0.0
        );
        // Padding: a shorter estimate counts as unvoiced.
        assert_eq!(
            melody_chroma_accuracy(&reference, &[Some(69); 25]).unwrap(),
            0.5
        );
        let silent = F0Contour::on_standard_grid(vec![0.0; 10]).unwrap();
        assert!(matches!(
            melody_chroma_accuracy(&silent, &[Some(60); 10]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn cent_band_edges() {
        assert!(chroma_match(1000.0, 1050.0));
        assert!(chroma_match(1000.0, 2150.0));
        assert!(!chroma_match(1000.0, 1051.0));
        assert!(chroma_match(0.0, 1190.0));
    }

    #[test]
    fn filter_boundaries() {
        let r = filter_pair(0.15, 100.0, 100.0).unwrap();
        assert_eq!(r.verdict, Verdict::Discard);
        assert_eq!(r.reasons, vec![FilterRule::LowMelodyChromaAccuracy]);
        assert_eq!(
            filter_pair(0.16, 100.0, 110.0).unwrap().verdict,
            Verdict::Keep
        );
        let r = filter_pair(0.90, 100.0, 120.0).unwrap();
        assert_eq!(r.verdict, Verdict::Discard);
        assert_eq!(r.reasons, vec![FilterRule::LengthMismatch]);
        assert!(matches!(
            filter_pair(0.5, 0.0, 1.0),
            Err(Error::Parameter(_))
        ));
        let r = filter_with(None, 100.0, 100.0).unwrap();
        assert_eq!((r.mca, r.verdict), (None, Verdict::Keep));
        let r = filter_with(Some(Err(Error::Undefined("x".into()))), 100.0, 100.0).unwrap();
        assert_eq!(r.reasons, vec![FilterRule::UndefinedMelodyChromaAccuracy]);
    }

    #[test]
    fn f0_csv_round_trip() {
        let c = F0Contour::on_standard_grid(vec![0.0, 220.0, 221.5]).unwrap();
        let text = write_f0_csv(&c);
        assert!(text.starts_with("time,frequency\n"));
        assert_eq!(parse_f0_csv(text.as_bytes()).unwrap(), c);
        assert!(parse_f0_csv("t,f\n0,1\n".as_bytes()).is_err());
        assert!(parse_f0_csv("time,frequency\n0,1\n0.5,1\n0.6,1\n".as_bytes()).is_err());
        assert!(parse_f0_csv("time,frequency\n0,-1\n".as_bytes()).is_err());
    }
}
