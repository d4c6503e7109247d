//! Paired synthetic utterances with known tone structure: audio, vocal
//! EMG, time-warped silent EMG, transcript and phone alignment.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::container::Mode;
use crate::dsp::{MAINS_HZ, NOTCH_Q};
use crate::error::{invalid, Error, Result};
use crate::features::{EMG_HOP, EMG_WINDOW};
use crate::signal::{AudioWaveform, EmgRecording, AUDIO_SAMPLE_RATE, EMG_CHANNELS, EMG_SAMPLE_RATE};
use crate::toneme::{
    build_inventory, full_lexicon, parse_syllable, AlignmentIntervals, Interval, SyllableSplit, TonemeSet,
    Transcript,
};

/// Toneless syllables the default corpus draws from.
pub const DEFAULT_BASES: &[&str] = &["ma", "ba", "di", "nu", "la", "ge", "bang", "ding"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_utterances: usize,
    pub min_syllables: usize,
    pub max_syllables: usize,
    /// Toned syllables (e.g. `ma3`) utterances are drawn from.
    pub lexicon: Vec<String>,
    pub seed: u64,
    pub tempo_min: f64,
    pub tempo_max: f64,
    pub noise_level: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_utterances: 100,
            min_syllables: 3,
            max_syllables: 5,
            lexicon: default_lexicon(),
            seed: 1,
            tempo_min: 0.7,
            tempo_max: 1.3,
            noise_level: 0.05,
        }
    }
}

pub fn default_lexicon() -> Vec<String> {
    DEFAULT_BASES
        .iter()
        .flat_map(|b| (1..=5).map(move |t| format!("{b}{t}")))
        .collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lexicon.is_empty() {
            return Err(Error::Config("synthetic lexicon is empty".into()));
        }
        if self.min_syllables == 0 || self.min_syllables > self.max_syllables {
            return Err(Error::Config("need 1 <= min_syllables <= max_syllables".into()));
        }
        if !(self.tempo_min > 0.0) || self.tempo_min > self.tempo_max {
            return Err(Error::Config("need 0 < tempo_min <= tempo_max".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config("noise_level must be non-negative".into()));
        }
        for s in &self.lexicon {
            parse_syllable(s)?;
        }
        Ok(())
    }

    pub fn inventory(&self) -> Result<TonemeSet> {
        build_inventory(&self.lexicon)
    }
}

/// Stable stand-in character for a toned syllable.
pub fn character_for(syllable: &str) -> char {
    let idx = full_lexicon().iter().position(|s| s == syllable).unwrap_or(0);
    char::from_u32(0x4E00 + idx as u32).expect("CJK block")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub transcript: Transcript,
    pub alignment: AlignmentIntervals,
    pub audio: AudioWaveform,
    pub vocal: EmgRecording,
    pub silent: EmgRecording,
}

/// Per-toneme EMG envelope gains: a fixed random linear readout of the
/// toneme identity, factored as one-hot base label plus one-hot tone.
#[derive(Debug, Clone)]
struct Readout {
    base: Vec<(String, [f64; EMG_CHANNELS])>,
    tone: [[f64; EMG_CHANNELS]; 6],
}

const SILENCE_LEVEL: f64 = 0.1;

impl Readout {
    fn new(inventory: &TonemeSet, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x0E4D_0123);
        let (toneless, _) = inventory.toneless();
        let mut draw = || {
            let mut v = [0.0; EMG_CHANNELS];
            v.iter_mut().for_each(|x| *x = r.gen_range(0.0..1.0));
            v
        };
        let base = toneless.labels()[1..].iter().map(|l| (l.clone(), draw())).collect();
        let mut tone = [[0.0; EMG_CHANNELS]; 6];
        for t in tone.iter_mut().skip(1) {
            *t = draw();
        }
        Self { base, tone }
    }

    fn gains(&self, label: &str) -> [f64; EMG_CHANNELS] {
        if label == "sil" {
            return [SILENCE_LEVEL; EMG_CHANNELS];
        }
        let tone = crate::toneme::tone_of(label).unwrap_or(0) as usize;
        let stem = if tone > 0 { &label[..label.len() - 1] } else { label };
        let b = self
            .base
            .iter()
            .find(|(l, _)| l == stem)
            .map(|(_, v)| *v)
            .unwrap_or([0.0; EMG_CHANNELS]);
        let mut g = [0.0; EMG_CHANNELS];
        for c in 0..EMG_CHANNELS {
            g[c] = 0.2 + b[c] + self.tone[tone][c];
        }
        g
    }
}

/// Contour in Hz over normalized voiced time `u` in `[0, 1]`.
pub fn tone_f0(tone: u8, u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    match tone {
        1 => 220.0,
        2 => 160.0 + 80.0 * u,
        3 => {
            if u < 0.5 {
                170.0 - 100.0 * u
            } else {
                120.0 + 80.0 * (u - 0.5)
            }
        }
        4 => 240.0 - 100.0 * u,
        _ => 170.0,
    }
}

/// Formant centres and bandwidths (Hz) for a toneme's spectral envelope.
fn formants(label: &str) -> &'static [(f64, f64)] {
    let stem = label.trim_end_matches(|c: char| c.is_ascii_digit());
    match stem {
        "a" => &[(800.0, 90.0), (1250.0, 110.0), (2600.0, 160.0)],
        "i" => &[(300.0, 60.0), (2300.0, 120.0), (3100.0, 180.0)],
        "u" => &[(350.0, 60.0), (800.0, 90.0), (2300.0, 160.0)],
        "e" => &[(500.0, 80.0), (1500.0, 110.0), (2500.0, 160.0)],
        "o" => &[(500.0, 80.0), (900.0, 100.0), (2500.0, 160.0)],
        "ng" => &[(300.0, 60.0), (1100.0, 150.0)],
        "n" => &[(280.0, 60.0), (1700.0, 150.0)],
        "m" => &[(260.0, 60.0), (1200.0, 150.0)],
        "l" => &[(360.0, 70.0), (1300.0, 120.0), (2700.0, 200.0)],
        "b" => &[(900.0, 400.0)],
        "d" => &[(3500.0, 600.0)],
        "g" => &[(1800.0, 400.0)],
        _ => &[(600.0, 200.0), (1800.0, 300.0), (3000.0, 400.0)],
    }
}

fn spectral_gain(label: &str, f: f64) -> f64 {
    formants(label)
        .iter()
        .map(|&(c, b)| 1.0 / (1.0 + ((f - c) / b).powi(2)))
        .sum()
}

fn is_voiced(label: &str) -> bool {
    !matches!(label, "b" | "d" | "g" | "p" | "t" | "k" | "f" | "s" | "sh" | "x" | "h" | "c" | "q" | "z" | "zh" | "ch" | "j")
}

/// One toneme on the vocal timeline.
#[derive(Debug, Clone)]
struct Segment {
    label: String,
    start: f64,
    end: f64,
    /// Tone and voiced-span of the owning syllable, for F0.
    tone: u8,
    voiced: (f64, f64),
}

fn plan_syllable(split: &SyllableSplit, start: f64, r: &mut ChaCha8Rng, out: &mut Vec<Segment>) -> f64 {
    let onset = split.onset.as_ref().map(|_| r.gen_range(0.05..0.08)).unwrap_or(0.0);
    let mut nucleus = r.gen_range(0.16..0.26);
    if split.tone == 5 {
        nucleus *= 0.6;
    }
    let coda = split.coda.as_ref().map(|_| r.gen_range(0.05..0.07)).unwrap_or(0.0);
    let voiced = (start + onset, start + onset + nucleus + coda);
    let mut t = start;
    for (label, len) in split
        .onset
        .iter()
        .map(|o| (o.clone(), onset))
        .chain(std::iter::once((format!("{}{}", split.nucleus, split.tone), nucleus)))
        .chain(split.coda.iter().map(|c| (c.clone(), coda)))
    {
        out.push(Segment {
            label,
            start: t,
            end: t + len,
            tone: split.tone,
            voiced,
        });
        t += len;
    }
    t
}

/// EMG samples (2000 Hz) and audio samples (16 kHz) both land on whole
/// analysis frames, so the two frame counts agree exactly.
fn frame_aligned_duration(d: f64) -> f64 {
    let emg = (d * EMG_SAMPLE_RATE).ceil() as usize;
    let frames = 1 + emg.saturating_sub(EMG_WINDOW).div_ceil(EMG_HOP);
    (EMG_WINDOW + (frames - 1) * EMG_HOP) as f64 / EMG_SAMPLE_RATE
}

fn label_at(segments: &[Segment], t: f64) -> Option<&Segment> {
    segments.iter().find(|s| s.start <= t && t < s.end)
}

fn render_audio(segments: &[Segment], total: f64, noise: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (total * AUDIO_SAMPLE_RATE).round() as usize;
    let fs = AUDIO_SAMPLE_RATE;
    let mut out = vec![0.0; n];
    let mut phase = 0.0;
    let ramp = 0.01;
    // simple 2-pole resonators for unvoiced bursts, rebuilt per segment
    for seg in segments {
        let a = (seg.start * fs).round() as usize;
        let b = ((seg.end * fs).round() as usize).min(n);
        let voiced = is_voiced(&seg.label);
        let (mut y1, mut y2) = (0.0, 0.0);
        let (cf, bw) = formants(&seg.label)[0];
        let rad = (-PI * bw / fs).exp();
        let c1 = 2.0 * rad * (2.0 * PI * cf / fs).cos();
        let c2 = -rad * rad;
        for i in a..b {
            let t = i as f64 / fs;
            let fade = ((t - seg.start) / ramp).min((seg.end - t) / ramp).clamp(0.0, 1.0);
            let fade = 0.5 - 0.5 * (PI * fade).cos();
            let s = if voiced {
                let u = (t - seg.voiced.0) / (seg.voiced.1 - seg.voiced.0).max(1e-6);
                let f0 = tone_f0(seg.tone, u);
                phase += 2.0 * PI * f0 / fs;
                if phase > 2.0 * PI {
                    phase -= 2.0 * PI;
                }
                let mut acc = 0.0;
                let mut h = 1;
                while (h as f64) * f0 < 4000.0 {
                    let f = h as f64 * f0;
                    acc += spectral_gain(&seg.label, f) * (h as f64 * phase).sin() / (h as f64).sqrt();
                    h += 1;
                }
                0.08 * acc
            } else {
                let x: f64 = r.sample(StandardNormal);
                let y = x + c1 * y1 + c2 * y2;
                y2 = y1;
                y1 = y;
                0.02 * y
            };
            out[i] += fade * s;
        }
    }
    for v in out.iter_mut() {
        *v += noise * 0.01 * r.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Carrier band, kept inside the 4-400 Hz conditioning passband with
/// margin so the conditioning chain passes it almost untouched.
const CARRIER_BAND: (f64, f64) = (20.0, 300.0);

/// Unit-RMS Gaussian noise with a flat spectrum over [`CARRIER_BAND`],
/// leaving out the mains-harmonic notch regions.
fn carrier(n: usize, r: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    let df = EMG_SAMPLE_RATE / n as f64;
    for k in 1..n.div_ceil(2) {
        let f = k as f64 * df;
        let harmonic = (f / MAINS_HZ).round() * MAINS_HZ;
        let guard = (2.0 * harmonic / NOTCH_Q).max(2.0);
        if f < CARRIER_BAND.0 || f > CARRIER_BAND.1 || (f - harmonic).abs() < guard {
            continue;
        }
        let c = Complex64::new(r.sample(StandardNormal), r.sample(StandardNormal));
        spec[k] = c;
        spec[n - k] = c.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let rms = (spec.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64).sqrt();
    if !(rms > 0.0) {
        return Err(invalid("recording too short for an EMG carrier"));
    }
    Ok(spec.into_iter().map(|c| c.re / rms).collect())
}

/// Per-channel envelope at vocal time `t`, smoothed over 20 ms.
fn envelope(segments: &[Segment], readout: &Readout, t: f64) -> [f64; EMG_CHANNELS] {
    let mut acc = [0.0; EMG_CHANNELS];
    let taps = 5;
    for k in 0..taps {
        let tt = t + (k as f64 - (taps - 1) as f64 / 2.0) * 0.005;
        let g = readout.gains(label_at(segments, tt).map_or("sil", |s| s.label.as_str()));
        for c in 0..EMG_CHANNELS {
            acc[c] += g[c] / taps as f64;
        }
    }
    acc
}

fn render_emg(
    times: &[f64],
    segments: &[Segment],
    readout: &Readout,
    noise: f64,
    r: &mut ChaCha8Rng,
) -> Result<EmgRecording> {
    let n = times.len();
    let mut channels = Vec::with_capacity(EMG_CHANNELS);
    let envs: Vec<[f64; EMG_CHANNELS]> = times.iter().map(|&t| envelope(segments, readout, t)).collect();
    for c in 0..EMG_CHANNELS {
        let carr = carrier(n, r)?;
        let floor = carrier(n, r)?;
        channels.push((0..n).map(|i| envs[i][c] * carr[i] + noise * floor[i]).collect());
    }
    EmgRecording::new(channels, EMG_SAMPLE_RATE)
}

/// Silent-time sample instants mapped onto vocal time by a smooth,
/// monotonic tempo curve.
fn warp_times(total: f64, spec: &SyntheticSpec, r: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = (spec.tempo_min, spec.tempo_max);
    let mid = r.gen_range(lo..=hi);
    let amp = (hi - mid).min(mid - lo) * r.gen_range(0.0..=1.0);
    let period = r.gen_range(0.8..2.0);
    let phi = r.gen_range(0.0..2.0 * PI);
    let mut times = Vec::new();
    let mut t = 0.0;
    let mut tau = 0.0;
    while t < total {
        times.push(t);
        let rate = mid + amp * (2.0 * PI * tau / period + phi).sin();
        t += rate / EMG_SAMPLE_RATE;
        tau += 1.0 / EMG_SAMPLE_RATE;
    }
    // whole analysis frames only
    let frames = 1 + times.len().saturating_sub(EMG_WINDOW) / EMG_HOP;
    times.truncate(EMG_WINDOW + (frames - 1) * EMG_HOP);
    times
}

fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:04}")
}

pub fn generate_utterance(spec: &SyntheticSpec, index: usize) -> Result<SyntheticUtterance> {
    spec.validate()?;
    let inventory = spec.inventory()?;
    let readout = Readout::new(&inventory, spec.seed);
    generate_with(spec, &readout, index)
}

fn generate_with(spec: &SyntheticSpec, readout: &Readout, index: usize) -> Result<SyntheticUtterance> {
    let mut r = utterance_rng(spec.seed, index);
    let count = r.gen_range(spec.min_syllables..=spec.max_syllables);
    let syllables: Vec<String> = (0..count)
        .map(|_| spec.lexicon.choose(&mut r).expect("non-empty lexicon").clone())
        .collect();
    let mut segments = Vec::new();
    let mut t = r.gen_range(0.15..0.25);
    for s in &syllables {
        t = plan_syllable(&parse_syllable(s)?, t, &mut r, &mut segments);
        t += r.gen_range(0.0..0.04);
    }
    let total = frame_aligned_duration(t + r.gen_range(0.15..0.25));

    let mut intervals = Vec::new();
    let mut cursor = 0.0;
    for s in &segments {
        if s.start > cursor + 1e-9 {
            intervals.push(Interval { start: cursor, end: s.start, label: "sil".into() });
        }
        intervals.push(Interval { start: s.start, end: s.end, label: s.label.clone() });
        cursor = s.end;
    }
    intervals.push(Interval { start: cursor, end: total, label: "sil".into() });
    let alignment = AlignmentIntervals::new(intervals, total)?;

    let audio = AudioWaveform::new(render_audio(&segments, total, spec.noise_level, &mut r), AUDIO_SAMPLE_RATE)?;
    let n_emg = (total * EMG_SAMPLE_RATE).round() as usize;
    let vocal_times: Vec<f64> = (0..n_emg).map(|i| i as f64 / EMG_SAMPLE_RATE).collect();
    let vocal = render_emg(&vocal_times, &segments, readout, spec.noise_level, &mut r)?;
    let silent_times = warp_times(total, spec, &mut r);
    let silent = render_emg(&silent_times, &segments, readout, spec.noise_level, &mut r)?;

    let id = utterance_id(index);
    let characters = syllables.iter().map(|s| character_for(s)).collect();
    Ok(SyntheticUtterance {
        transcript: Transcript { id: id.clone(), syllables, characters },
        id,
        alignment,
        audio,
        vocal,
        silent,
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticUtterance>> {
    spec.validate()?;
    let inventory = spec.inventory()?;
    let readout = Readout::new(&inventory, spec.seed);
    (0..spec.n_utterances).map(|i| generate_with(spec, &readout, i)).collect()
}

pub const CORPUS_SPEC_FILE: &str = "corpus.json";
pub const LEXICON_FILE: &str = "lexicon.txt";

/// One directory per utterance with `emg_vocal`, `emg_silent`,
/// `audio.wav`, `transcript.txt` and `alignment.textgrid`.
pub fn write_corpus(root: &Path, spec: &SyntheticSpec, utterances: &[SyntheticUtterance]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let p = root.join(CORPUS_SPEC_FILE);
    fs::write(&p, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&p, e))?;
    let p = root.join(LEXICON_FILE);
    fs::write(&p, spec.lexicon.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
    for u in utterances {
        let dir = root.join(&u.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        u.vocal.save(&dir.join("emg_vocal"), Mode::Vocal)?;
        u.silent.save(&dir.join("emg_silent"), Mode::Silent)?;
        u.audio.write_wav(&dir.join("audio.wav"))?;
        u.transcript.write(&dir.join("transcript.txt"))?;
        let tg = dir.join("alignment.textgrid");
        fs::write(&tg, u.alignment.to_textgrid()).map_err(|e| Error::io(&tg, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then 8:1:1 (validation and test get `n / 10` each).
pub fn split(ids: &[String], seed: u64) -> Result<Split> {
    if ids.len() < 10 {
        return Err(invalid(format!("need at least 10 utterances to split, got {}", ids.len())));
    }
    let mut order = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5_9117));
    let k = ids.len() / 10;
    let test = order.split_off(order.len() - k);
    let val = order.split_off(order.len() - k);
    Ok(Split { train: order, val, test })
}

impl Split {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let p = dir.join(format!("{name}.txt"));
            fs::write(&p, ids.iter().map(|i| format!("{i}\n")).collect::<String>()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<String>> {
            let p = dir.join(format!("{name}.txt"));
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        };
        Ok(Self { train: read("train")?, val: read("val")?, test: read("test")? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::condition;
    use crate::dtw::{dtw_basic, path_to_durations};
    use crate::features::{check_sync, emg_features, mel_spectrogram};
    use crate::toneme::split_syllable;

    fn small(n: usize) -> SyntheticSpec {
        SyntheticSpec { n_utterances: n, ..SyntheticSpec::default() }
    }

    fn file_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = small(3);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(a.path(), &spec, &generate(&spec).unwrap()).unwrap();
        write_corpus(b.path(), &spec, &generate(&spec).unwrap()).unwrap();
        let (fa, fb) = (file_bytes(a.path()), file_bytes(b.path()));
        assert_eq!(fa.len(), 3 * 7 + 2);
        assert_eq!(fa, fb);
        assert_eq!(generate_utterance(&spec, 2).unwrap(), generate(&spec).unwrap()[2]);
    }

    #[test]
    fn frames_stay_in_sync() {
        for u in generate(&small(6)).unwrap() {
            let f = emg_features(&condition(&u.vocal).unwrap(), Mode::Vocal).unwrap();
            let m = mel_spectrogram(&u.audio).unwrap();
            assert!(check_sync(&f, &m).delta <= 1, "{}", u.id);
            for s in &u.transcript.syllables {
                split_syllable(s).unwrap();
            }
        }
    }

    #[test]
    fn unit_tempo_aligns_diagonally() {
        let spec = SyntheticSpec { tempo_min: 1.0, tempo_max: 1.0, ..small(4) };
        for u in generate(&spec).unwrap() {
            let x = emg_features(&condition(&u.silent).unwrap(), Mode::Silent).unwrap();
            let y = emg_features(&condition(&u.vocal).unwrap(), Mode::Vocal).unwrap();
            assert_eq!(x.len(), y.len());
            let path = dtw_basic(x.frames(), y.frames()).unwrap();
            let d = path_to_durations(&path, x.len(), y.len()).unwrap();
            let ones = d.as_slice().iter().filter(|&&v| v == 1).count();
            assert!(ones as f64 >= 0.9 * d.len() as f64, "{}: {ones}/{}", u.id, d.len());
        }
    }

    #[test]
    fn conditioning_keeps_energy() {
        for u in generate(&small(3)).unwrap() {
            let after = condition(&u.vocal).unwrap();
            let e = |r: &EmgRecording| r.channels().iter().flatten().map(|v| v * v).sum::<f64>();
            let kept = e(&after) / e(&u.vocal);
            assert!(kept >= 0.8, "{}: {kept}", u.id);
        }
    }

    /// Autocorrelation pitch with parabolic peak refinement.
    fn pitch(x: &[f64]) -> f64 {
        let fs = AUDIO_SAMPLE_RATE;
        let (lo, hi) = ((fs / 400.0) as usize, (fs / 80.0) as usize);
        let ac = |lag: usize| -> f64 { x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum() };
        let vals: Vec<f64> = (lo - 1..=hi + 1).map(ac).collect();
        let k = (1..vals.len() - 1).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let (a, b, c) = (vals[k - 1], vals[k], vals[k + 1]);
        let shift = 0.5 * (a - c) / (a - 2.0 * b + c);
        fs / ((lo - 1 + k) as f64 + shift)
    }

    #[test]
    fn falling_tone_falls() {
        let spec = SyntheticSpec { lexicon: vec!["ma4".into()], min_syllables: 1, max_syllables: 1, ..small(1) };
        let u = generate_utterance(&spec, 0).unwrap();
        let nuc = u.alignment.intervals.iter().find(|i| i.label == "a4").unwrap();
        let fs = AUDIO_SAMPLE_RATE;
        let (win, hop) = (0.03, 0.01);
        let mut track = Vec::new();
        let mut t = nuc.start + 0.015;
        while t + win <= nuc.end - 0.015 {
            let s = &u.audio.samples()[(t * fs) as usize..((t + win) * fs) as usize];
            track.push(pitch(s));
            t += hop;
        }
        assert!(track.len() >= 8);
        for w in track.windows(2) {
            assert!(w[1] < w[0], "{track:?}");
        }
        assert!(track[0] > 200.0 && *track.last().unwrap() < 180.0, "{track:?}");
    }

    #[test]
    fn contours_match_tone_shapes() {
        assert_eq!(tone_f0(1, 0.3), tone_f0(1, 0.9));
        assert!(tone_f0(2, 1.0) > tone_f0(2, 0.0));
        assert!(tone_f0(3, 0.5) < tone_f0(3, 0.0) && tone_f0(3, 0.5) < tone_f0(3, 1.0));
        assert!(tone_f0(4, 1.0) < tone_f0(4, 0.0));
    }

    #[test]
    fn split_ratios() {
        let ids: Vec<String> = (0..100).map(utterance_id).collect();
        let s = split(&ids, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split(&ids, 3).unwrap());
        let s10 = split(&ids[..10], 3).unwrap();
        assert_eq!((s10.train.len(), s10.val.len(), s10.test.len()), (8, 1, 1));
        assert!(split(&ids[..9], 3).is_err());
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        assert_eq!(all, ids);
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec { tempo_min: 0.0, ..small(1) }.validate().is_err());
        assert!(SyntheticSpec { lexicon: vec![], ..small(1) }.validate().is_err());
        assert!(SyntheticSpec { lexicon: vec!["xx".into()], ..small(1) }.validate().is_err());
    }
}
