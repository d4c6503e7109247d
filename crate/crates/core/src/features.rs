//! Frame-level features: 355-dim EMG features (time-domain + STFT) and
//! 80-band log-mel spectrograms, both at 62.5 frames per second.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::container::{read_container, write_container, ContainerHeader, Mode};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::signal::{AudioWaveform, EmgRecording, EMG_CHANNELS};

pub const FRAME_RATE: f64 = 62.5;
pub const EMG_WINDOW: usize = 128;
pub const EMG_HOP: usize = 32;
pub const STFT_BINS: usize = EMG_WINDOW / 2 + 1;
pub const TD_FEATURES: usize = 6;
pub const FEATURE_DIM: usize = EMG_CHANNELS * (TD_FEATURES + STFT_BINS);

pub const AUDIO_WINDOW: usize = 1024;
pub const AUDIO_HOP: usize = 256;
pub const MEL_BINS: usize = 80;
pub const MEL_FMIN: f64 = 80.0;
pub const MEL_FMAX: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Frames left when `|T_emg - T_mel|` exceeds this are flagged instead of truncated.
pub const SYNC_TOLERANCE: usize = 2;

const DOUBLE_AVERAGE_LEN: usize = 9;

pub fn frame_count(len: usize, window: usize, hop: usize) -> Result<usize> {
    if window == 0 || hop == 0 {
        return Err(invalid("window and hop must be positive"));
    }
    if len < window {
        return Err(Error::TooShort {
            needed: window,
            got: len,
        });
    }
    Ok(1 + (len - window) / hop)
}

/// Contiguous windows fully inside the signal; no padding.
pub fn frame_signal(samples: &[f64], window: usize, hop: usize) -> Result<Vec<&[f64]>> {
    let n = frame_count(samples.len(), window, hop)?;
    Ok((0..n).map(|t| &samples[t * hop..t * hop + window]).collect())
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude spectrum (`n/2 + 1` bins) of Hann-windowed frames.
pub(crate) struct MagnitudeStft {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MagnitudeStft {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            window: hann(n),
            fft: FftPlanner::new().plan_fft_forward(n),
        }
    }

    pub(crate) fn spectrum(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex64::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(self.window.len() / 2 + 1);
        buf
    }

    pub(crate) fn magnitudes(&self, frame: &[f64]) -> Vec<f64> {
        self.spectrum(frame).iter().map(|c| c.norm()).collect()
    }
}

/// Low-frequency part of the time-domain decomposition: a 9-point moving
/// average applied twice, with edge samples replicated so constants pass
/// through unchanged.
pub fn double_average(x: &[f64]) -> Vec<f64> {
    fn moving_average(x: &[f64], len: usize) -> Vec<f64> {
        let half = (len / 2) as isize;
        let n = x.len() as isize;
        (0..n)
            .map(|i| {
                (-half..=half)
                    .map(|k| x[(i + k).clamp(0, n - 1) as usize])
                    .sum::<f64>()
                    / len as f64
            })
            .collect()
    }
    moving_average(&moving_average(x, DOUBLE_AVERAGE_LEN), DOUBLE_AVERAGE_LEN)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Fraction of adjacent sample pairs with a strict sign change.
pub fn zero_crossing_rate(x: &[f64]) -> f64 {
    let changes = x.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    changes as f64 / x.len() as f64
}

/// The six time-domain features of one frame, in output order:
/// mean(w), power(w), power(p), zcr(p), mean(r), power(r).
pub fn td_features(w: &[f64], p: &[f64], r: &[f64]) -> [f64; TD_FEATURES] {
    [
        mean(w),
        power(w),
        power(p),
        zero_crossing_rate(p),
        mean(r),
        power(r),
    ]
}

/// Frame sequence of 355-dim features with a silent/vocal tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Matrix,
    mode: Mode,
}

impl FeatureSequence {
    pub fn new(frames: Matrix, mode: Mode) -> Result<Self> {
        if frames.cols() != FEATURE_DIM {
            return Err(Error::Shape(format!(
                "feature width must be {FEATURE_DIM}, got {}",
                frames.cols()
            )));
        }
        crate::error::ensure_finite(frames.data(), "features")?;
        Ok(Self { frames, mode })
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn frame_rate(&self) -> f64 {
        FRAME_RATE
    }

    pub fn truncate(&mut self, rows: usize) {
        self.frames.truncate_rows(rows);
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        save_matrix(base, &self.frames, Some(self.mode))
    }

    /// Loads a feature file and checks its mode tag against `expected`.
    pub fn load(base: &Path, expected: Mode) -> Result<Self> {
        let (m, mode) = load_matrix(base)?;
        match mode {
            Some(found) if found == expected => Self::new(m, found),
            Some(found) => Err(invalid(format!(
                "{}: expected {expected} features, file is tagged {found}",
                base.display()
            ))),
            None => Err(invalid(format!("{}: feature file has no mode tag", base.display()))),
        }
    }
}

/// Log-mel spectrogram, `T x 80`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Matrix,
}

impl MelSpectrogram {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.cols() != MEL_BINS {
            return Err(Error::Shape(format!(
                "mel width must be {MEL_BINS}, got {}",
                frames.cols()
            )));
        }
        crate::error::ensure_finite(frames.data(), "mel spectrogram")?;
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn into_frames(self) -> Matrix {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn frame_rate(&self) -> f64 {
        FRAME_RATE
    }

    pub fn truncate(&mut self, rows: usize) {
        self.frames.truncate_rows(rows);
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        save_matrix(base, &self.frames, None)
    }

    pub fn load(base: &Path) -> Result<Self> {
        Self::new(load_matrix(base)?.0)
    }
}

fn save_matrix(base: &Path, m: &Matrix, mode: Option<Mode>) -> Result<()> {
    let header = ContainerHeader {
        rows: m.rows(),
        cols: m.cols(),
        sample_rate: None,
        channels: None,
        frame_rate: Some(FRAME_RATE),
        mode,
    };
    write_container(base, &header, m.data())
}

fn load_matrix(base: &Path) -> Result<(Matrix, Option<Mode>)> {
    let (header, data) = read_container(base)?;
    if header.frame_rate != Some(FRAME_RATE) {
        return Err(invalid(format!(
            "{}: frame rate {:?} differs from {FRAME_RATE}",
            base.display(),
            header.frame_rate
        )));
    }
    Ok((Matrix::from_vec(header.rows, header.cols, data), header.mode))
}

/// Un-normalized EMG features, `T x 355`: per channel the six TD features
/// (30 columns total), then per channel 65 STFT magnitudes (325 columns).
pub fn emg_features_raw(rec: &EmgRecording) -> Result<Matrix> {
    let t = frame_count(rec.len(), EMG_WINDOW, EMG_HOP)?;
    let stft = MagnitudeStft::new(EMG_WINDOW);
    let mut out = Matrix::zeros(t, FEATURE_DIM);
    for (c, x) in rec.channels().iter().enumerate() {
        let w = double_average(x);
        let p: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a - b).collect();
        let r: Vec<f64> = p.iter().map(|v| v.abs()).collect();
        let frames_x = frame_signal(x, EMG_WINDOW, EMG_HOP)?;
        for (i, fx) in frames_x.iter().enumerate() {
            let span = i * EMG_HOP..i * EMG_HOP + EMG_WINDOW;
            let td = td_features(&w[span.clone()], &p[span.clone()], &r[span]);
            let row = out.row_mut(i);
            row[c * TD_FEATURES..(c + 1) * TD_FEATURES].copy_from_slice(&td);
            let off = EMG_CHANNELS * TD_FEATURES + c * STFT_BINS;
            row[off..off + STFT_BINS].copy_from_slice(&stft.magnitudes(fx));
        }
    }
    Ok(out)
}

/// Per-dimension z-normalization over the utterance; zero-variance
/// dimensions become 0.
pub fn z_normalize(m: &mut Matrix) {
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 {
        return;
    }
    for j in 0..cols {
        let mu = (0..rows).map(|i| m.get(i, j)).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (m.get(i, j) - mu).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt();
        for i in 0..rows {
            let v = if sd > 1e-12 * (1.0 + mu.abs()) {
                (m.get(i, j) - mu) / sd
            } else {
                0.0
            };
            m.set(i, j, v);
        }
    }
}

pub fn emg_features(rec: &EmgRecording, mode: Mode) -> Result<FeatureSequence> {
    let mut m = emg_features_raw(rec)?;
    z_normalize(&mut m);
    FeatureSequence::new(m, mode)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the `n_fft/2 + 1` magnitude bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Matrix,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Matrix::zeros(n_mels, n_bins);
        for m in 0..n_mels {
            let (l, c, u) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate / n_fft as f64;
                let w = ((f - l) / (c - l)).min((u - f) / (u - c)).max(0.0);
                weights.set(m, k, w);
            }
        }
        Self {
            weights,
            centers: edges[1..=n_mels].to_vec(),
        }
    }

    /// The analysis filterbank used by [`mel_spectrogram`].
    pub fn standard() -> Self {
        Self::new(
            MEL_BINS,
            AUDIO_WINDOW,
            crate::signal::AUDIO_SAMPLE_RATE,
            MEL_FMIN,
            MEL_FMAX,
        )
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers
    }

    pub fn apply(&self, magnitudes: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .map(|w| w.iter().zip(magnitudes).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Log-mel of magnitude STFT (1024-point Hann, hop 256, no padding).
pub fn mel_spectrogram(audio: &AudioWaveform) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::standard();
    let stft = MagnitudeStft::new(AUDIO_WINDOW);
    let frames = frame_signal(audio.samples(), AUDIO_WINDOW, AUDIO_HOP)?;
    let rows: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            fb.apply(&stft.magnitudes(f))
                .into_iter()
                .map(|v| v.max(LOG_FLOOR).ln())
                .collect()
        })
        .collect();
    MelSpectrogram::new(Matrix::from_rows(&rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncReport {
    pub emg_frames: usize,
    pub mel_frames: usize,
    pub delta: usize,
    pub flagged: bool,
}

pub fn check_sync(f: &FeatureSequence, m: &MelSpectrogram) -> SyncReport {
    let delta = f.len().abs_diff(m.len());
    SyncReport {
        emg_frames: f.len(),
        mel_frames: m.len(),
        delta,
        flagged: delta > SYNC_TOLERANCE,
    }
}

/// Truncates both to the shorter length when within tolerance; flagged
/// pairs are returned as an error.
pub fn synchronize(f: &mut FeatureSequence, m: &mut MelSpectrogram) -> Result<SyncReport> {
    let report = check_sync(f, m);
    if report.flagged {
        return Err(invalid(format!(
            "EMG/mel frame counts differ by {} (> {SYNC_TOLERANCE})",
            report.delta
        )));
    }
    let n = f.len().min(m.len());
    f.truncate(n);
    m.truncate(n);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{AUDIO_SAMPLE_RATE, EMG_SAMPLE_RATE};

    #[test]
    fn framing_arithmetic() {
        let x = vec![0.0; 160];
        assert_eq!(frame_signal(&x[..128], 128, 32).unwrap().len(), 1);
        assert_eq!(frame_signal(&x, 128, 32).unwrap().len(), 2);
        assert!(matches!(
            frame_signal(&x[..127], 128, 32),
            Err(Error::TooShort { .. })
        ));
        assert!(frame_signal(&x, 0, 32).is_err());
    }

    #[test]
    fn zero_and_constant_signals() {
        let zero = EmgRecording::new(vec![vec![0.0; 256]; 5], EMG_SAMPLE_RATE).unwrap();
        let raw = emg_features_raw(&zero).unwrap();
        assert_eq!(raw.cols(), 355);
        assert!(raw.data().iter().all(|&v| v == 0.0));

        let c = 1.75;
        let rec = EmgRecording::new(vec![vec![c; 256]; 5], EMG_SAMPLE_RATE).unwrap();
        let raw = emg_features_raw(&rec).unwrap();
        for row in raw.iter_rows() {
            for ch in 0..5 {
                let td = &row[ch * 6..ch * 6 + 6];
                assert!((td[0] - c).abs() < 1e-12);
                assert!(td[2].abs() < 1e-20);
                assert_eq!(td[3], 0.0);
            }
        }
    }

    #[test]
    fn alternating_signal_zcr() {
        let x: Vec<f64> = (0..128).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        // brute-force sign-change count on p = x - w
        let w = double_average(&x);
        let p: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a - b).collect();
        let mut changes = 0;
        for i in 1..p.len() {
            if (p[i] > 0.0) != (p[i - 1] > 0.0) {
                changes += 1;
            }
        }
        assert_eq!(changes, 127);
        let rec = EmgRecording::new(vec![x; 5], EMG_SAMPLE_RATE).unwrap();
        let raw = emg_features_raw(&rec).unwrap();
        assert!((raw.get(0, 3) - 127.0 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn z_normalization_statistics() {
        let ch: Vec<Vec<f64>> = (0..5)
            .map(|c| {
                (0..2000)
                    .map(|t| ((t * (c + 3)) as f64 * 0.37).sin() + 0.1 * (t as f64 * 0.011).cos())
                    .collect()
            })
            .collect();
        let rec = EmgRecording::new(ch, EMG_SAMPLE_RATE).unwrap();
        let f = emg_features(&rec, Mode::Vocal).unwrap();
        let m = f.frames();
        for j in 0..m.cols() {
            let col: Vec<f64> = (0..m.rows()).map(|i| m.get(i, j)).collect();
            let mu = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mu.abs() < 1e-6);
            assert!(var == 0.0 || (var.sqrt() - 1.0).abs() < 1e-6, "dim {j}: {var}");
        }
    }

    #[test]
    fn silent_audio_hits_log_floor() {
        let a = AudioWaveform::new(vec![0.0; 16384], AUDIO_SAMPLE_RATE).unwrap();
        let mel = mel_spectrogram(&a).unwrap();
        assert_eq!(mel.len(), 61);
        assert!(mel.frames().data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_in_nearest_band() {
        let fb = MelFilterbank::standard();
        let nearest = fb
            .centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let s: Vec<f64> = (0..16384)
            .map(|t| (2.0 * PI * 1000.0 * t as f64 / AUDIO_SAMPLE_RATE).sin())
            .collect();
        let mel = mel_spectrogram(&AudioWaveform::new(s.clone(), AUDIO_SAMPLE_RATE).unwrap()).unwrap();
        for row in mel.frames().iter_rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
        let again = mel_spectrogram(&AudioWaveform::new(s, AUDIO_SAMPLE_RATE).unwrap()).unwrap();
        assert_eq!(mel, again);
    }

    #[test]
    fn filterbank_shape_and_range() {
        let fb = MelFilterbank::standard();
        assert_eq!(fb.weights().rows(), 80);
        assert_eq!(fb.weights().cols(), 513);
        assert!(fb.centers_hz()[0] > MEL_FMIN && fb.centers_hz()[79] < MEL_FMAX);
        assert!(fb.weights().data().iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn equal_durations_are_in_sync() {
        let emg = EmgRecording::new(vec![vec![0.1; 2048]; 5], EMG_SAMPLE_RATE).unwrap();
        let audio = AudioWaveform::new(vec![0.0; 16384], AUDIO_SAMPLE_RATE).unwrap();
        let mut f = emg_features(&emg, Mode::Vocal).unwrap();
        let mut m = mel_spectrogram(&audio).unwrap();
        let r = synchronize(&mut f, &mut m).unwrap();
        assert!(r.delta <= 1);
        assert_eq!(f.len(), m.len());

        let before = (f.clone(), m.clone());
        synchronize(&mut f, &mut m).unwrap();
        assert_eq!((f.clone(), m.clone()), before);

        let short = AudioWaveform::new(vec![0.0; 16384 - 5 * 256], AUDIO_SAMPLE_RATE).unwrap();
        let mut m2 = mel_spectrogram(&short).unwrap();
        assert!(check_sync(&f, &m2).flagged);
        assert!(synchronize(&mut f, &mut m2).is_err());
    }

    #[test]
    fn feature_mode_tag_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureSequence::new(Matrix::zeros(3, FEATURE_DIM), Mode::Vocal).unwrap();
        let base = dir.path().join("feat");
        f.save(&base).unwrap();
        assert_eq!(FeatureSequence::load(&base, Mode::Vocal).unwrap(), f);
        assert!(FeatureSequence::load(&base, Mode::Silent).is_err());
        assert!(FeatureSequence::new(Matrix::zeros(3, 30), Mode::Silent).is_err());
    }
}
