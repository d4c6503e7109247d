//! Objective scores: character error rate, mel-cepstral distortion and
//! short-time objective intelligibility.

use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dtw::dtw_basic;
use crate::error::{invalid, Error, Result};
use crate::features::mel_spectrogram;
use crate::matrix::Matrix;
use crate::signal::AudioWaveform;

/// Edit distance over Unicode characters divided by the reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(invalid("CER needs a non-empty reference"));
    }
    Ok(strsim::levenshtein(reference, hypothesis) as f64 / n as f64)
}

pub const CEPSTRAL_ORDER: usize = 13;

/// Orthonormal DCT-II of each log-mel frame, coefficients `1..13`.
pub fn mel_cepstrum(log_mel: &Matrix) -> Matrix {
    let n = log_mel.cols();
    let mut out = Matrix::zeros(log_mel.rows(), CEPSTRAL_ORDER - 1);
    for (t, row) in log_mel.iter_rows().enumerate() {
        for k in 1..CEPSTRAL_ORDER {
            let s: f64 = row
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
                .sum();
            out.set(t, k - 1, s * (2.0 / n as f64).sqrt());
        }
    }
    out
}

fn mcd_one_way(a: &Matrix, b: &Matrix) -> Result<f64> {
    let path = dtw_basic(a, b)?;
    let k = 10.0 / LN_10;
    let sum: f64 = path
        .pairs()
        .iter()
        .map(|&(i, j)| {
            let d2: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            k * (2.0 * d2).sqrt()
        })
        .sum();
    Ok(sum / path.len() as f64)
}

/// MCD between cepstral sequences: DTW-aligned mean of
/// `(10 / ln 10) sqrt(2 sum_d (c_d - c'_d)^2)`, averaged over both
/// alignment directions so the score is symmetric.
pub fn mcd_cepstra(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(invalid("MCD needs at least one frame on each side"));
    }
    Ok(0.5 * (mcd_one_way(a, b)? + mcd_one_way(b, a)?))
}

pub fn mcd(reference: &AudioWaveform, hypothesis: &AudioWaveform) -> Result<f64> {
    let a = mel_cepstrum(mel_spectrogram(reference)?.frames());
    let b = mel_cepstrum(mel_spectrogram(hypothesis)?.frames());
    mcd_cepstra(&a, &b)
}

/// MCD straight from log-mel matrices (skips waveform analysis).
pub fn mcd_mel(reference: &Matrix, hypothesis: &Matrix) -> Result<f64> {
    mcd_cepstra(&mel_cepstrum(reference), &mel_cepstrum(hypothesis))
}

const STOI_FS: usize = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA: f64 = -15.0;
const STOI_DYN_RANGE: f64 = 40.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Rational resampling by `up / down` with a Kaiser-windowed sinc
/// lowpass (10 zero crossings per side, beta 5).
pub fn resample(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    let m = up.max(down);
    let half = 10 * m;
    let fc = 0.5 / m as f64;
    let beta = 5.0;
    let h: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let t = i as f64 - half as f64;
            let sinc = if t == 0.0 { 1.0 } else { (2.0 * PI * fc * t).sin() / (PI * t) / (2.0 * fc) };
            let r = t / half as f64;
            let win = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
            up as f64 * 2.0 * fc * sinc * win
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|n| {
            // position in the upsampled grid
            let p = (n * down) as isize;
            let lo = (p - half as isize).max(0);
            let hi = p + half as isize;
            let k_lo = (lo + up as isize - 1) / up as isize;
            let k_hi = (hi / up as isize).min(x.len() as isize - 1);
            (k_lo..=k_hi)
                .map(|k| x[k as usize] * h[(k * up as isize - p + half as isize) as usize])
                .sum()
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Symmetric Hann of length `n + 2` with the zero end points dropped.
fn inner_hann(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drops frames more than the dynamic range below the loudest reference
/// frame, then overlap-adds the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = inner_hann(STOI_FRAME);
    let window = |s: &[f64], i: usize| -> Vec<f64> { w.iter().zip(&s[i..i + STOI_FRAME]).map(|(a, b)| a * b).collect() };
    let starts: Vec<usize> = frame_starts(x.len(), STOI_FRAME, hop).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| 20.0 * (window(x, i).iter().map(|v| v * v).sum::<f64>().sqrt() + f64::EPSILON).log10())
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - STOI_DYN_RANGE - e < 0.0)
        .map(|(&i, _)| i)
        .collect();
    let overlap_add = |s: &[f64]| -> Vec<f64> {
        if kept.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (kept.len() - 1) * hop + STOI_FRAME];
        for (k, &i) in kept.iter().enumerate() {
            for (o, v) in out[k * hop..].iter_mut().zip(window(s, i)) {
                *o += v;
            }
        }
        out
    };
    (overlap_add(x), overlap_add(y))
}

/// One-third octave band energies, `bands x frames`.
fn third_octave_envelopes(x: &[f64]) -> Vec<Vec<f64>> {
    let hop = STOI_FRAME / 2;
    let w = inner_hann(STOI_FRAME);
    let fft = FftPlanner::new().plan_fft_forward(STOI_NFFT);
    let bins = STOI_NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * STOI_FS as f64 / STOI_NFFT as f64).collect();
    let nearest = |f: f64| -> usize {
        (0..bins)
            .min_by(|&a, &b| (freqs[a] - f).powi(2).total_cmp(&(freqs[b] - f).powi(2)))
            .unwrap()
    };
    let bands: Vec<(usize, usize)> = (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect();
    let mut env = vec![Vec::new(); STOI_BANDS];
    for i in frame_starts(x.len(), STOI_FRAME, hop) {
        let mut buf = vec![Complex64::new(0.0, 0.0); STOI_NFFT];
        for (j, (a, b)) in w.iter().zip(&x[i..i + STOI_FRAME]).enumerate() {
            buf[j].re = a * b;
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            env[b].push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    env
}

/// Short-time objective intelligibility of `degraded` against `clean`.
pub fn stoi(clean: &AudioWaveform, degraded: &AudioWaveform) -> Result<f64> {
    stoi_samples(clean.samples(), degraded.samples(), clean.sample_rate())
}

/// Score returned when fewer than one segment of voiced frames remains.
pub const STOI_FLOOR: f64 = 1e-5;

pub fn stoi_samples(clean: &[f64], degraded: &[f64], sample_rate: f64) -> Result<f64> {
    let len = clean.len().min(degraded.len());
    let sr = sample_rate.round() as usize;
    let (x, y) = if sr == STOI_FS {
        (clean[..len].to_vec(), degraded[..len].to_vec())
    } else {
        (resample(&clean[..len], STOI_FS, sr), resample(&degraded[..len], STOI_FS, sr))
    };
    let min_len = STOI_SEGMENT * STOI_FRAME / 2 + STOI_FRAME;
    if x.len() < min_len {
        return Err(Error::TooShort { needed: min_len, got: x.len() });
    }
    if !x.iter().chain(&y).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("STOI input".into()));
    }
    let (x, y) = remove_silent_frames(&x, &y);
    let xe = third_octave_envelopes(&x);
    let ye = third_octave_envelopes(&y);
    let frames = xe[0].len();
    if frames < STOI_SEGMENT {
        // too little speech survives silence removal; the reference
        // implementation scores this as (near) zero intelligibility
        return Ok(STOI_FLOOR);
    }
    let clip = 10f64.powf(-STOI_BETA / 20.0);
    let eps = f64::EPSILON;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in STOI_SEGMENT..=frames {
        for (xb, yb) in xe.iter().zip(&ye) {
            let xs = &xb[m - STOI_SEGMENT..m];
            let ys = &yb[m - STOI_SEGMENT..m];
            let k = norm(xs) / (norm(ys) + eps);
            let yp: Vec<f64> = ys.iter().zip(xs).map(|(y, x)| (y * k).min(x * (1.0 + clip))).collect();
            let centre = |v: &[f64]| -> Vec<f64> {
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| a - mu).collect()
            };
            let xc = centre(xs);
            let yc = centre(&yp);
            let (nx, ny) = (norm(&xc) + eps, norm(&yc) + eps);
            total += xc.iter().zip(&yc).map(|(a, b)| a / nx * b / ny).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterance_id: String,
    pub cer: f64,
    pub mcd: f64,
    pub stoi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub utterances: usize,
    pub cer: MeanStd,
    pub mcd: MeanStd,
    pub stoi: MeanStd,
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    MetricSummary {
        utterances: reports.len(),
        cer: col(|r| r.cer),
        mcd: col(|r| r.mcd),
        stoi: col(|r| r.stoi),
    }
}

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("utterance_id,cer,mcd,stoi\n");
    for r in reports {
        let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e}", r.utterance_id, r.cer, r.mcd, r.stoi);
    }
    s
}

/// Row-normalizable counts: `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self { labels, counts: vec![vec![0; n]; n] }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    /// Each true-label row divided by its total: entry `[i][j]` is the
    /// share of label-`i` frames predicted as `j`. Empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
            })
            .collect()
    }

    pub fn normalized_csv(&self) -> String {
        let mut s = String::from("truth");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(self.normalized()) {
            s.push_str(l);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}
