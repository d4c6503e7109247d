//! Griffin-Lim inversion of log-mel spectrograms.

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};
use crate::features::{hann, MelFilterbank, MelSpectrogram, AUDIO_HOP, AUDIO_WINDOW, MEL_BINS};
use crate::matrix::Matrix;
use crate::signal::{AudioWaveform, AUDIO_SAMPLE_RATE};

pub const DEFAULT_ITERS: usize = 60;
const PHASE_SEED: u64 = 0x6C69_6D00;

const BINS: usize = AUDIO_WINDOW / 2 + 1;

/// Pseudo-inverse of the analysis filterbank, `513 x 80`.
fn inverse_filterbank() -> &'static DMatrix<f64> {
    static INV: OnceLock<DMatrix<f64>> = OnceLock::new();
    INV.get_or_init(|| {
        let fb = MelFilterbank::standard();
        let w = fb.weights();
        let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
        m.pseudo_inverse(1e-10).expect("filterbank pseudo-inverse")
    })
}

/// Linear magnitudes from log-mel frames: least-squares inverse of the
/// filterbank, negative values clipped to 0.
pub fn mel_to_linear(mel: &Matrix) -> Result<Matrix> {
    if mel.cols() != MEL_BINS {
        return Err(Error::Shape(format!("mel width {} != {MEL_BINS}", mel.cols())));
    }
    if !mel.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("mel spectrogram".into()));
    }
    let inv = inverse_filterbank();
    let mut out = Matrix::zeros(mel.rows(), BINS);
    for (t, row) in mel.iter_rows().enumerate() {
        let e = nalgebra::DVector::from_iterator(MEL_BINS, row.iter().map(|v| v.exp()));
        let lin = inv * e;
        for (k, v) in lin.iter().enumerate() {
            out.set(t, k, v.max(0.0));
        }
    }
    Ok(out)
}

/// Complex STFT and its least-squares inverse at the mel analysis
/// parameters (periodic Hann, no padding).
struct Stft {
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann(AUDIO_WINDOW),
            fwd: planner.plan_fft_forward(AUDIO_WINDOW),
            inv: planner.plan_fft_inverse(AUDIO_WINDOW),
        }
    }

    fn analyze(&self, x: &[f64], frames: usize) -> Vec<Vec<Complex64>> {
        (0..frames)
            .map(|t| {
                let mut buf: Vec<Complex64> = x[t * AUDIO_HOP..t * AUDIO_HOP + AUDIO_WINDOW]
                    .iter()
                    .zip(&self.window)
                    .map(|(s, w)| Complex64::new(s * w, 0.0))
                    .collect();
                self.fwd.process(&mut buf);
                buf.truncate(BINS);
                buf
            })
            .collect()
    }

    fn synthesize(&self, spec: &[Vec<Complex64>]) -> Vec<f64> {
        let len = (spec.len() - 1) * AUDIO_HOP + AUDIO_WINDOW;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); AUDIO_WINDOW];
        for (t, frame) in spec.iter().enumerate() {
            buf[..BINS].copy_from_slice(frame);
            for k in BINS..AUDIO_WINDOW {
                buf[k] = frame[AUDIO_WINDOW - k].conj();
            }
            self.inv.process(&mut buf);
            let off = t * AUDIO_HOP;
            for (i, w) in self.window.iter().enumerate() {
                out[off + i] += w * buf[i].re / AUDIO_WINDOW as f64;
                norm[off + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

/// Result of a Griffin-Lim run with the spectral error after each
/// iteration.
#[derive(Debug, Clone)]
pub struct GriffinLimTrace {
    pub audio: AudioWaveform,
    /// `|| |STFT(x_i)| - S ||_F / ||S||_F` per iteration.
    pub errors: Vec<f64>,
}

pub fn griffin_lim(mel: &MelSpectrogram, iters: usize) -> Result<AudioWaveform> {
    Ok(griffin_lim_trace(mel, iters)?.audio)
}

/// Plain Griffin-Lim from a fixed pseudo-random initial phase, so output is
/// a deterministic function of the input.
pub fn griffin_lim_trace(mel: &MelSpectrogram, iters: usize) -> Result<GriffinLimTrace> {
    let target = mel_to_linear(mel.frames())?;
    let frames = target.rows();
    if frames == 0 {
        return Err(invalid("empty mel spectrogram"));
    }
    let stft = Stft::new();
    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spec: Vec<Vec<Complex64>> = target
        .iter_rows()
        .map(|row| {
            row.iter()
                .map(|&m| Complex64::from_polar(m, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)))
                .collect()
        })
        .collect();
    let target_norm = target.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut errors = Vec::with_capacity(iters);
    let mut x = stft.synthesize(&spec);
    for _ in 0..iters {
        let est = stft.analyze(&x, frames);
        let mut err = 0.0;
        for ((s, e), row) in spec.iter_mut().zip(&est).zip(target.iter_rows()) {
            for ((sv, ev), &m) in s.iter_mut().zip(e).zip(row) {
                let mag = ev.norm();
                err += (mag - m) * (mag - m);
                *sv = if mag > 1e-12 { ev * (m / mag) } else { Complex64::new(m, 0.0) };
            }
        }
        errors.push(if target_norm > 0.0 { err.sqrt() / target_norm } else { 0.0 });
        x = stft.synthesize(&spec);
    }
    Ok(GriffinLimTrace {
        audio: AudioWaveform::new(x, AUDIO_SAMPLE_RATE)?,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::mel_spectrogram;
    use std::f64::consts::PI;

    fn tone(freq: f64, secs: f64, amp: f64) -> AudioWaveform {
        let n = (secs * AUDIO_SAMPLE_RATE) as usize;
        let s = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / AUDIO_SAMPLE_RATE).sin()).collect();
        AudioWaveform::new(s, AUDIO_SAMPLE_RATE).unwrap()
    }

    fn peak_bin(x: &[f64]) -> usize {
        let n = 1 << 14;
        let mut buf: Vec<Complex64> = x.iter().take(n).map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap()
    }

    #[test]
    fn tone_peak_survives_inversion() {
        let mel = mel_spectrogram(&tone(440.0, 1.0, 0.5)).unwrap();
        let out = griffin_lim(&mel, DEFAULT_ITERS).unwrap();
        let bin_hz = AUDIO_SAMPLE_RATE / (1 << 14) as f64;
        let found = peak_bin(out.samples()) as f64 * bin_hz;
        // within one bin of the 1024-point analysis FFT
        assert!((found - 440.0).abs() <= AUDIO_SAMPLE_RATE / AUDIO_WINDOW as f64, "{found}");
    }

    #[test]
    fn silence_stays_silent() {
        let mel = mel_spectrogram(&AudioWaveform::new(vec![0.0; 8000], AUDIO_SAMPLE_RATE).unwrap()).unwrap();
        let out = griffin_lim(&mel, 10).unwrap();
        assert!(out.rms() < 1e-4);
    }

    #[test]
    fn error_is_non_increasing() {
        let a = tone(300.0, 0.5, 0.3);
        let b = tone(1200.0, 0.5, 0.2);
        let mix: Vec<f64> = a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect();
        let mel = mel_spectrogram(&AudioWaveform::new(mix, AUDIO_SAMPLE_RATE).unwrap()).unwrap();
        let t30 = griffin_lim_trace(&mel, 30).unwrap();
        let t60 = griffin_lim_trace(&mel, 60).unwrap();
        assert!(t60.errors.last().unwrap() <= t30.errors.last().unwrap());
        for w in t60.errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn output_length_and_determinism() {
        let mel = mel_spectrogram(&tone(200.0, 0.4, 0.4)).unwrap();
        let a = griffin_lim(&mel, 5).unwrap();
        let expect = mel.len() * AUDIO_HOP;
        assert!(a.len().abs_diff(expect) <= AUDIO_WINDOW);
        assert_eq!(a.samples(), griffin_lim(&mel, 5).unwrap().samples());
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::zeros(3, MEL_BINS);
        m.set(1, 1, f64::NAN);
        assert!(mel_to_linear(&m).is_err());
    }
}
