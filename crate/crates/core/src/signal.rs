//! Raw recordings: multichannel EMG and mono audio.

use std::path::Path;

use crate::container::{read_container, write_container, ContainerHeader, Mode};
use crate::error::{ensure_finite, invalid, Error, Result};

pub const EMG_SAMPLE_RATE: f64 = 2000.0;
pub const EMG_CHANNELS: usize = 5;
pub const AUDIO_SAMPLE_RATE: f64 = 16000.0;
/// Shortest EMG recording that still yields one analysis frame.
pub const EMG_MIN_SAMPLES: usize = 128;

/// Five-channel surface EMG sampled at 2 kHz. Channels are stored as
/// separate sample streams of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgRecording {
    channels: Vec<Vec<f64>>,
    sample_rate: f64,
}

impl EmgRecording {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        if sample_rate != EMG_SAMPLE_RATE {
            return Err(invalid(format!(
                "EMG sample rate must be {EMG_SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        if channels.len() != EMG_CHANNELS {
            return Err(invalid(format!(
                "expected {EMG_CHANNELS} EMG channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(invalid("EMG channels have unequal lengths"));
        }
        if len < EMG_MIN_SAMPLES {
            return Err(Error::TooShort {
                needed: EMG_MIN_SAMPLES,
                got: len,
            });
        }
        for c in &channels {
            ensure_finite(c, "EMG samples")?;
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Apply `f` to every channel, keeping the recording invariants.
    pub fn map_channels<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let channels = self
            .channels
            .iter()
            .map(|c| f(c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels, self.sample_rate)
    }

    /// Writes `<base>.f32` (interleaved little-endian f32) and `<base>.json`.
    pub fn save(&self, base: &Path, mode: Mode) -> Result<()> {
        let n = self.len();
        let mut data = Vec::with_capacity(n * EMG_CHANNELS);
        for t in 0..n {
            for c in &self.channels {
                data.push(c[t]);
            }
        }
        let header = ContainerHeader {
            rows: n,
            cols: EMG_CHANNELS,
            sample_rate: Some(self.sample_rate),
            channels: Some(EMG_CHANNELS),
            frame_rate: None,
            mode: Some(mode),
        };
        write_container(base, &header, &data)
    }

    pub fn load(base: &Path) -> Result<(Self, Option<Mode>)> {
        let (header, data) = read_container(base)?;
        let channels_n = header.channels.unwrap_or(header.cols);
        if channels_n != header.cols {
            return Err(invalid("EMG header channels disagree with column count"));
        }
        let sr = header
            .sample_rate
            .ok_or_else(|| invalid("EMG container lacks sample_rate"))?;
        let mut channels = vec![Vec::with_capacity(header.rows); channels_n];
        for row in data.chunks(channels_n) {
            for (c, v) in channels.iter_mut().zip(row) {
                c.push(*v);
            }
        }
        Ok((Self::new(channels, sr)?, header.mode))
    }
}

/// Mono audio at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWaveform {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if sample_rate != AUDIO_SAMPLE_RATE {
            return Err(invalid(format!(
                "audio sample rate must be {AUDIO_SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        ensure_finite(&samples, "audio samples")?;
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// 32-bit float WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate as u32,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample(s as f32)?;
        }
        w.finalize()?;
        Ok(())
    }

    /// Reads PCM16 or float32 mono WAV.
    pub fn read_wav(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = hound::WavReader::open(path)?;
        let spec = r.spec();
        if spec.channels != 1 {
            return Err(invalid(format!(
                "{}: expected mono audio, got {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Float, 32) => r
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()?,
            (hound::SampleFormat::Int, 16) => r
                .samples::<i16>()
                .map(|s| s.map(|v| f64::from(v) / 32768.0))
                .collect::<Result<_, _>>()?,
            (fmt, bits) => {
                return Err(invalid(format!(
                    "unsupported WAV encoding {fmt:?}/{bits} bits"
                )))
            }
        };
        Self::new(samples, f64::from(spec.sample_rate))
    }
}
