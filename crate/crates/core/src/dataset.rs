//! Turns recordings into model-ready examples and scores the toneme head.

use crate::container::Mode;
use crate::dsp::condition;
use crate::error::Result;
use crate::features::{emg_features, mel_spectrogram, synchronize};
use crate::matrix::Matrix;
use crate::metrics::ConfusionMatrix;
use crate::model::Ssrnet;
use crate::signal::{AudioWaveform, EmgRecording};
use crate::synth::SyntheticUtterance;
use crate::toneme::{rasterize, AlignmentIntervals, TonemeSet};
use crate::training::Utterance;

/// Conditions and featurizes one paired recording. `classes` maps
/// inventory ids to head classes (see [`crate::training::class_map`]).
pub fn prepare(
    id: &str,
    silent: &EmgRecording,
    vocal: &EmgRecording,
    audio: &AudioWaveform,
    alignment: &AlignmentIntervals,
    inventory: &TonemeSet,
    classes: &[usize],
) -> Result<Utterance> {
    let x = emg_features(&condition(silent)?, Mode::Silent)?;
    let mut v = emg_features(&condition(vocal)?, Mode::Vocal)?;
    let mut mel = mel_spectrogram(audio)?;
    synchronize(&mut v, &mut mel)?;
    let labels = rasterize(alignment, mel.len(), inventory)?;
    Ok(Utterance {
        id: id.to_string(),
        silent: x.frames().clone(),
        vocal: v.frames().clone(),
        mel: mel.into_frames(),
        tonemes: labels.ids.iter().map(|&i| classes[i]).collect(),
    })
}

pub fn prepare_synthetic(u: &SyntheticUtterance, inventory: &TonemeSet, classes: &[usize]) -> Result<Utterance> {
    prepare(&u.id, &u.silent, &u.vocal, &u.audio, &u.alignment, inventory, classes)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame predicted classes of the toneme head under `durations`.
pub fn predict_tonemes(model: &Ssrnet, features: &Matrix, durations: &[usize]) -> Result<Vec<usize>> {
    let logits = model.toneme_logits(features, durations)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

/// Frame-level scores of the toneme head, silence frames excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct TonemeScores {
    pub frames: usize,
    pub toneme_correct: usize,
    /// Frames whose true class carries a tone.
    pub toned_frames: usize,
    pub tone_correct: usize,
    pub confusion: ConfusionMatrix,
}

impl TonemeScores {
    pub fn new(classes: &TonemeSet) -> Self {
        Self {
            frames: 0,
            toneme_correct: 0,
            toned_frames: 0,
            tone_correct: 0,
            confusion: ConfusionMatrix::new(classes.labels().to_vec()),
        }
    }

    pub fn add(&mut self, classes: &TonemeSet, truth: &[usize], predicted: &[usize]) {
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == 0 {
                continue;
            }
            self.frames += 1;
            self.toneme_correct += (t == p) as usize;
            self.confusion.add(t, p);
            if let Some(tone) = classes.tone_of_id(t) {
                self.toned_frames += 1;
                self.tone_correct += (classes.tone_of_id(p) == Some(tone)) as usize;
            }
        }
    }

    pub fn toneme_accuracy(&self) -> f64 {
        self.toneme_correct as f64 / self.frames.max(1) as f64
    }

    pub fn tone_accuracy(&self) -> f64 {
        self.tone_correct as f64 / self.toned_frames.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SyntheticSpec};
    use crate::training::class_map;

    #[test]
    fn prepared_examples_are_consistent() {
        let spec = SyntheticSpec { n_utterances: 3, ..SyntheticSpec::default() };
        let inv = spec.inventory().unwrap();
        let (classes, map) = class_map(&inv, true);
        for u in generate(&spec).unwrap() {
            let ex = prepare_synthetic(&u, &inv, &map).unwrap();
            assert_eq!(ex.vocal.rows(), ex.mel.rows());
            assert_eq!(ex.tonemes.len(), ex.mel.rows());
            assert!(ex.tonemes.iter().all(|&c| c < classes.len()));
            assert!(ex.tonemes.iter().any(|&c| c != 0));
        }
    }

    #[test]
    fn scores_skip_silence() {
        let spec = SyntheticSpec::default();
        let inv = spec.inventory().unwrap();
        let a1 = inv.id("a1").unwrap();
        let a2 = inv.id("a2").unwrap();
        let m = inv.id("m").unwrap();
        let mut s = TonemeScores::new(&inv);
        s.add(&inv, &[0, a1, a1, m, 0], &[a1, a1, a2, m, 0]);
        assert_eq!(s.frames, 3);
        assert_eq!(s.toneme_correct, 2);
        assert_eq!((s.toned_frames, s.tone_correct), (2, 1));
        assert_eq!(s.confusion.total(), 3);
    }
}
