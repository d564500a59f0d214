//! WAV input/output and sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Audio {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Returns a copy at `target_rate`, or a clone when the rate already matches.
    pub fn resampled(&self, target_rate: u32) -> Result<Audio> {
        Ok(Audio::new(
            resample(&self.samples, self.sample_rate, target_rate)?,
            target_rate,
        ))
    }
}

/// Reads a WAV file, downmixing multi-channel audio by averaging.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
        .collect();
    Ok(Audio::new(samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, audio: &Audio) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Half-width of the resampling kernel, in zero crossings.
const SINC_ZEROS: usize = 32;

/// Band-limited resampling with a Hann-windowed sinc kernel of
/// 32 zero crossings per side. The cutoff sits at the lower of the two
/// Nyquist frequencies, so downsampling is anti-aliased.
pub fn resample(samples: &[f32], from_rate: u32, to_rate: u32) -> Result<Vec<f32>> {
    if from_rate == 0 || to_rate == 0 {
        return Err(Error::Parameter("sample rate must be positive".into()));
    }
    if from_rate == to_rate {
        return Ok(samples.to_vec());
    }
    let ratio = f64::from(to_rate) / f64::from(from_rate);
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZEROS as f64 / cutoff;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    let n_in = samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let x = n as f64 / ratio;
        let lo = (x - half_width).ceil().max(0.0) as isize;
        let hi = ((x + half_width).floor() as isize).min(n_in - 1);
        let mut acc = 0.0f64;
        for k in lo..=hi {
            let d = x - k as f64;
            let arg = d * cutoff;
            let sinc = if arg.abs() < 1e-12 {
                1.0
            } else {
                (PI * arg).sin() / (PI * arg)
            };
            let w = 0.5 + 0.5 * (PI * d / half_width).cos();
            acc += f64::from(samples[k as usize]) * sinc * w * cutoff;
        }
        out.push(acc as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64) -> Vec<f32> {
        (0..(secs * f64::from(rate)) as usize)
            .map(|i| (2.0 * PI * freq * i as f64 / f64::from(rate)).sin() as f32)
            .collect()
    }

    #[test]
    fn resample_preserves_low_sine() {
        let x = sine(440.0, 44100, 0.5);
        let y = resample(&x, 44100, 22050).unwrap();
        assert_eq!(y.len(), 11025);
        let expected = sine(440.0, 22050, 0.5);
        // Ignore kernel edges.
        let err = y[200..10800]
            .iter()
            .zip(&expected[200..10800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-2, "max error {err}");
    }

    #[test]
    fn resample_rejects_zero_rate() {
        assert!(resample(&[0.0], 0, 22050).is_err());
        assert_eq!(resample(&[0.5, 0.25], 8000, 8000).unwrap(), vec![0.5, 0.25]);
    }

    #[test]
    fn wav_round_trip_and_downmix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let audio = Audio::new(vec![0.0, 0.5, -0.5, 0.25], 22050);
        write_wav(&path, &audio).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 22050);
        for (a, b) in back.samples.iter().zip(&audio.samples) {
            assert!((a - b).abs() < 1e-4);
        }

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for s in [16384i16, 0, -16384, -16384] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let back = read_wav(&stereo).unwrap();
        assert_eq!(back.samples, vec![0.25, -0.5]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_wav("/nonexistent/x.wav").unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Io);
    }
}
