//! EMG conditioning: zero-phase Butterworth bandpass and power-line notches.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{ensure_finite, invalid, Result};
use crate::signal::EmgRecording;

pub const BANDPASS_LOW_HZ: f64 = 4.0;
pub const BANDPASS_HIGH_HZ: f64 = 400.0;
pub const BUTTERWORTH_ORDER: usize = 4;
pub const MAINS_HZ: f64 = 50.0;
pub const NOTCH_Q: f64 = 30.0;

/// Second-order section with `a[0] == 1`, run in transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z1 * self.a[1] + z2 * self.a[2];
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }
}

/// Cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Complex response of a single forward pass at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let omega = 2.0 * PI * freq / fs;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(omega))
    }

    /// Magnitude of the forward-backward (zero-phase) response, i.e. `|H|^2`.
    pub fn zero_phase_gain(&self, freq: f64, fs: f64) -> f64 {
        self.response(freq, fs).norm_sqr()
    }

    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    /// Single forward pass with explicit initial states (one pair per section).
    pub fn filter_with_state(&self, x: &[f64], state: &mut [[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, st) in self.sections.iter().zip(state.iter_mut()) {
            for v in y.iter_mut() {
                let inp = *v;
                let out = s.b[0] * inp + st[0];
                st[0] = s.b[1] * inp - s.a[1] * out + st[1];
                st[1] = s.b[2] * inp - s.a[2] * out;
                *v = out;
            }
        }
        y
    }

    /// Steady-state section states for a unit step input.
    pub fn step_state(&self) -> Vec<[f64; 2]> {
        let mut level = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let g = s.dc_gain();
                let out = g * level;
                let s2 = s.b[2] * level - s.a[2] * out;
                let s1 = s.b[1] * level - s.a[1] * out + s2;
                level = out;
                [s1, s2]
            })
            .collect()
    }

    /// Zero-phase filtering: odd-reflection padding of `3 * order` samples,
    /// steady-state initial conditions, forward then backward pass.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_finite(x, "filter input")?;
        let n = x.len();
        if n < 2 {
            return Err(invalid("filtfilt needs at least two samples"));
        }
        let pad = (3 * self.order()).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |level: f64| -> Vec<[f64; 2]> {
            zi.iter().map(|s| [s[0] * level, s[1] * level]).collect()
        };
        let mut st = scaled(ext[0]);
        let mut y = self.filter_with_state(&ext, &mut st);
        y.reverse();
        let mut st = scaled(y[0]);
        let mut y = self.filter_with_state(&y, &mut st);
        y.reverse();
        Ok(y[pad..pad + n].to_vec())
    }
}

/// Digital Butterworth bandpass from an analog prototype of `order` poles,
/// via lowpass-to-bandpass mapping and the bilinear transform with prewarping.
/// Produces `order` sections, each with zeros at z = +1 and z = -1.
pub fn butterworth_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(invalid("filter order must be positive"));
    }
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        return Err(invalid(format!(
            "band edges must satisfy 0 < low < high < fs/2, got low={low} high={high} fs={fs}"
        )));
    }
    let fs2 = 2.0 * fs;
    let wl = fs2 * (PI * low / fs).tan();
    let wh = fs2 * (PI * high / fs).tan();
    let bw = wh - wl;
    let w0sq = wl * wh;

    let mut poles = Vec::with_capacity(2 * order);
    for k in 1..=order {
        let theta = PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let ps = p * (bw / 2.0);
        let disc = (ps * ps - w0sq).sqrt();
        for s in [ps + disc, ps - disc] {
            poles.push((fs2 + s) / (fs2 - s));
        }
    }

    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|z| z.im > 1e-12).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|z| z.im.abs() <= 1e-12)
        .map(|z| z.re)
        .collect();
    upper.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    real.sort_by(f64::total_cmp);

    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|z| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * z.re, z.norm_sqr()],
        })
        .collect();
    for pair in real.chunks(2) {
        let (p1, p2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(p1 + p2), p1 * p2],
        });
    }

    let mut sos = Sos { sections };
    let center = fs / PI * (w0sq.sqrt() / fs2).atan();
    let g = sos.response(center, fs).norm();
    for b in sos.sections[0].b.iter_mut() {
        *b /= g;
    }
    Ok(sos)
}

/// Second-order IIR notch with quality factor `q`.
pub fn notch(freq: f64, q: f64, fs: f64) -> Result<Biquad> {
    if !(freq > 0.0 && freq < fs / 2.0) {
        return Err(invalid(format!(
            "notch frequency {freq} Hz must lie in (0, {})",
            fs / 2.0
        )));
    }
    if q <= 0.0 {
        return Err(invalid("notch quality factor must be positive"));
    }
    let w0 = 2.0 * PI * freq / fs;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Biquad {
        b: [gain, -2.0 * gain * c, gain],
        a: [1.0, -2.0 * gain * c, 2.0 * gain - 1.0],
    })
}

/// Notches at `base, 2*base, ...` up to and including `max` (harmonics at
/// or above Nyquist are skipped).
pub fn harmonic_notches(base: f64, max: f64, fs: f64) -> Result<Sos> {
    if base <= 0.0 {
        return Err(invalid("notch base frequency must be positive"));
    }
    if base >= fs / 2.0 {
        return Err(invalid(format!(
            "notch base {base} Hz is at or above Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    if max > fs / 2.0 {
        return Err(invalid(format!(
            "highest notch {max} Hz exceeds Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    let mut sections = Vec::new();
    let mut k = 1.0;
    while k * base <= max + 1e-9 {
        let f = k * base;
        if f < fs / 2.0 {
            sections.push(notch(f, NOTCH_Q, fs)?);
        }
        k += 1.0;
    }
    Ok(Sos { sections })
}

pub fn bandpass(rec: &EmgRecording, low: f64, high: f64) -> Result<EmgRecording> {
    let sos = butterworth_bandpass(BUTTERWORTH_ORDER, low, high, rec.sample_rate())?;
    rec.map_channels(|c| sos.filtfilt(c))
}

pub fn notch_harmonics(rec: &EmgRecording, base: f64, max: f64) -> Result<EmgRecording> {
    let sos = harmonic_notches(base, max, rec.sample_rate())?;
    rec.map_channels(|c| sos.filtfilt(c))
}

/// The full conditioning chain: 4-400 Hz bandpass, then 50 Hz harmonic notches.
pub fn condition(rec: &EmgRecording) -> Result<EmgRecording> {
    let bp = bandpass(rec, BANDPASS_LOW_HZ, BANDPASS_HIGH_HZ)?;
    notch_harmonics(&bp, MAINS_HZ, BANDPASS_HIGH_HZ)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 2000.0;

    fn sine(freq: f64, secs: f64) -> Vec<f64> {
        let n = (secs * FS) as usize;
        (0..n)
            .map(|t| (2.0 * PI * freq * t as f64 / FS).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// Gain in dB measured over the middle half, away from edge transients.
    fn measured_gain_db(sos: &Sos, x: &[f64]) -> f64 {
        let y = sos.filtfilt(x).unwrap();
        let (a, b) = (x.len() / 4, 3 * x.len() / 4);
        20.0 * (rms(&y[a..b]) / rms(&x[a..b])).log10()
    }

    fn recording(ch: Vec<f64>) -> EmgRecording {
        EmgRecording::new(vec![ch; 5], FS).unwrap()
    }

    #[test]
    fn bandpass_poles_are_stable() {
        let sos = butterworth_bandpass(4, 4.0, 400.0, FS).unwrap();
        assert_eq!(sos.sections.len(), 4);
        for s in &sos.sections {
            // |z|^2 == a2 for a conjugate pair
            assert!(s.a[2] < 1.0 && s.a[2] > 0.0);
        }
    }

    #[test]
    fn bandpass_passband_and_stopband() {
        let sos = butterworth_bandpass(4, 4.0, 400.0, FS).unwrap();
        // analytic: 1 Hz is far below the 4 Hz edge
        let analytic_db = 10.0 * sos.zero_phase_gain(1.0, FS).log10();
        assert!(analytic_db < -20.0, "{analytic_db}");
        assert!(measured_gain_db(&sos, &sine(1.0, 8.0)) < -20.0);
        let pass = measured_gain_db(&sos, &sine(50.0, 2.0));
        assert!(pass.abs() < 1.0, "{pass}");
    }

    #[test]
    fn bandpass_removes_dc() {
        let rec = recording(vec![3.0; 4000]);
        let out = bandpass(&rec, 4.0, 400.0).unwrap();
        let mean = out.channels()[0].iter().sum::<f64>() / 4000.0;
        assert!(mean.abs() < 1e-6 * 3.0, "{mean}");
    }

    #[test]
    fn notch_kills_mains_and_keeps_neighbours() {
        let sos = harmonic_notches(50.0, 400.0, FS).unwrap();
        assert_eq!(sos.sections.len(), 8);
        assert!(measured_gain_db(&sos, &sine(50.0, 4.0)) <= -30.0);
        assert!(measured_gain_db(&sos, &sine(150.0, 4.0)) <= -30.0);
        let analytic_75 = 10.0 * sos.zero_phase_gain(75.0, FS).log10();
        assert!(analytic_75.abs() < 1.0);
        assert!(measured_gain_db(&sos, &sine(75.0, 4.0)).abs() < 1.0);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(butterworth_bandpass(4, 0.0, 400.0, FS).is_err());
        assert!(butterworth_bandpass(4, 400.0, 4.0, FS).is_err());
        assert!(butterworth_bandpass(4, 4.0, 1000.0, FS).is_err());
        assert!(harmonic_notches(1000.0, 1000.0, FS).is_err());
        assert!(harmonic_notches(50.0, 1200.0, FS).is_err());
        assert!(harmonic_notches(0.0, 400.0, FS).is_err());
        assert!(Sos { sections: vec![] }.filtfilt(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn filters_preserve_length_and_phase() {
        let x = sine(60.0, 1.0);
        let y = butterworth_bandpass(4, 4.0, 400.0, FS)
            .unwrap()
            .filtfilt(&x)
            .unwrap();
        assert_eq!(y.len(), x.len());
        let mid = &x[500..1500];
        let best = (-10i64..=10)
            .max_by(|&a, &b| {
                let xc = |lag: i64| -> f64 {
                    mid.iter()
                        .enumerate()
                        .map(|(i, v)| v * y[(500 + i as i64 + lag) as usize])
                        .sum()
                };
                xc(a).total_cmp(&xc(b))
            })
            .unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filtering_is_linear() {
        let s1 = sine(30.0, 1.0);
        let s2: Vec<f64> = (0..2000).map(|t| ((t * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        for sos in [
            butterworth_bandpass(4, 4.0, 400.0, FS).unwrap(),
            harmonic_notches(50.0, 400.0, FS).unwrap(),
        ] {
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
            let y1 = sos.filtfilt(&s1).unwrap();
            let y2 = sos.filtfilt(&s2).unwrap();
            let ym = sos.filtfilt(&mix).unwrap();
            let scale = ym.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..ym.len() {
                let lin = 2.0 * y1[i] - 0.5 * y2[i];
                assert!((ym[i] - lin).abs() <= 1e-9 * scale.max(1.0));
            }
        }
    }
}
