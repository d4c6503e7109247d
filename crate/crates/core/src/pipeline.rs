//! Stage runner behind the command-line tool. Each stage writes into
//! `workdir/<stage>/` and records a provenance file; a stage whose config
//! and inputs are unchanged is skipped.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{KeyGroup, PipelineConfig};
use crate::container::Mode;
use crate::dataset::{predict_tonemes, TonemeScores};
use crate::dsp::condition;
use crate::dtw::{dtw_basic, path_to_durations, read_durations, write_durations, DurationSequence};
use crate::error::{invalid, Error, Result};
use crate::features::{emg_features, mel_spectrogram, synchronize, FeatureSequence, MelSpectrogram};
use crate::metrics::{cer, mcd, reports_csv, stoi, summarize, MetricReport, MetricSummary};
use crate::model::Ssrnet;
use crate::signal::{AudioWaveform, EmgRecording};
use crate::synth::{self, Split, LEXICON_FILE};
use crate::toneme::{build_inventory, full_inventory, parse_textgrid, rasterize, split_syllable, TonemeSet, Transcript};
use crate::training::{class_map, load_checkpoint, refresh_one, train, CheckpointSink, Utterance};
use crate::vocoder::griffin_lim;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    SynthData,
    Condition,
    Featurize,
    Align,
    Train,
    Infer,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::SynthData,
        Stage::Condition,
        Stage::Featurize,
        Stage::Align,
        Stage::Train,
        Stage::Infer,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::Condition => "condition",
            Stage::Featurize => "featurize",
            Stage::Align => "align",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
        }
    }

    fn groups(self) -> &'static [KeyGroup] {
        match self {
            Stage::SynthData => &[KeyGroup::Synth],
            Stage::Condition | Stage::Featurize | Stage::Align => &[],
            Stage::Train => &[KeyGroup::Model],
            Stage::Infer => &[KeyGroup::Vocoder],
            Stage::Evaluate => &[KeyGroup::Vocoder, KeyGroup::Metrics],
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::SynthData => &[],
            Stage::Condition => &[],
            Stage::Featurize => &[Stage::Condition],
            Stage::Align => &[Stage::Featurize],
            Stage::Train => &[Stage::Condition, Stage::Featurize, Stage::Align],
            Stage::Infer => &[Stage::Condition, Stage::Featurize, Stage::Train],
            Stage::Evaluate => &[Stage::Condition, Stage::Featurize, Stage::Train, Stage::Infer],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// A stage or the whole chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stage(Stage),
    All,
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(Command::All)
        } else {
            s.parse().map(Command::Stage)
        }
    }
}

/// Config hash, input hashes and output hashes of one stage run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(PROVENANCE_FILE);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Digest of all outputs, used as the input hash of downstream stages.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.outputs {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update(*b"\n");
        }
        hex::encode(h.finalize())
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes of every file below `dir` (except the provenance file), keyed by
/// `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("walk stays below root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if key != PROVENANCE_FILE {
                    out.insert(key, hash_file(&p)?);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Maps `f` over `items` with at most `workers` threads. Results keep the
/// input order; the first error in input order is returned.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.split_whitespace().map(String::from).collect())
}

/// Loads an EMG container and insists on its mode tag.
fn load_emg(base: &Path, expected: Mode) -> Result<EmgRecording> {
    let (rec, mode) = EmgRecording::load(base)?;
    match mode {
        Some(m) if m == expected => Ok(rec),
        Some(m) => Err(invalid(format!("{}: expected {expected} EMG, file is tagged {m}", base.display()))),
        None => Err(invalid(format!("{}: EMG file has no mode tag", base.display()))),
    }
}

/// Collapses per-frame classes into a label sequence: repeated frames
/// merge and silence is dropped.
pub fn collapse_labels(frames: &[usize], classes: &TonemeSet) -> Vec<String> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in frames {
        if prev != Some(c) && c != 0 {
            out.push(classes.label(c).unwrap_or("?").to_string());
        }
        prev = Some(c);
    }
    out
}

/// CER over label sequences: every distinct label is one symbol.
pub fn label_cer(reference: &[String], hypothesis: &[String]) -> Result<f64> {
    let mut table: HashMap<String, char> = HashMap::new();
    let mut encode = |labels: &[String]| -> String {
        labels
            .iter()
            .map(|l| {
                let next = char::from_u32(0xE000 + table.len() as u32).expect("private-use range");
                *table.entry(l.clone()).or_insert(next)
            })
            .collect()
    };
    let r = encode(reference);
    let h = encode(hypothesis);
    cer(&r, &h)
}

/// Which metrics to compute; disabled ones are reported as NaN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricToggles {
    pub cer: bool,
    pub mcd: bool,
    pub stoi: bool,
}

/// Scores one hypothesis against its reference.
pub fn score_utterance(
    id: &str,
    reference: (&AudioWaveform, &[String]),
    hypothesis: (&AudioWaveform, &[String]),
    on: MetricToggles,
) -> Result<MetricReport> {
    Ok(MetricReport {
        utterance_id: id.to_string(),
        cer: if on.cer { label_cer(reference.1, hypothesis.1)? } else { f64::NAN },
        mcd: if on.mcd { mcd(reference.0, hypothesis.0)? } else { f64::NAN },
        stoi: if on.stoi { stoi(reference.0, hypothesis.0)? } else { f64::NAN },
    })
}

/// Output of inference on one silent utterance.
#[derive(Debug, Clone)]
pub struct InferredUtterance {
    pub durations: DurationSequence,
    pub mel: MelSpectrogram,
    pub audio: AudioWaveform,
    /// Per-frame toneme-head classes under the predicted durations.
    pub classes: Vec<usize>,
}

/// Inference from silent features only; checks the checkpoint width.
pub fn infer_features(model: &Ssrnet, features: &FeatureSequence, vocoder_iters: usize) -> Result<InferredUtterance> {
    if features.mode() != Mode::Silent {
        return Err(invalid("inference reads silent-mode features only"));
    }
    let want = model.config().input_dim;
    let got = features.frames().cols();
    if want != got {
        return Err(Error::Shape(format!("checkpoint expects {want}-dim features, got {got}-dim")));
    }
    let inf = model.infer(features.frames())?;
    let classes = predict_tonemes(model, features.frames(), &inf.durations)?;
    let mel = MelSpectrogram::new(inf.mel)?;
    let audio = griffin_lim(&mel, vocoder_iters)?;
    Ok(InferredUtterance {
        durations: DurationSequence::new(inf.durations),
        mel,
        audio,
        classes,
    })
}

/// Conditions, featurizes and synthesizes raw silent EMG containers. Writes
/// `<stem>.wav`, `<stem>.mel.*` and `durations.txt` into `out_dir`.
pub fn infer_files(checkpoint: &Path, inputs: &[PathBuf], out_dir: &Path, vocoder_iters: usize) -> Result<Vec<PathBuf>> {
    let (model, _) = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut table = BTreeMap::new();
    let mut written = Vec::new();
    for base in inputs {
        let stem = base
            .file_name()
            .map(|s| s.to_string_lossy().trim_end_matches(".json").trim_end_matches(".f32").to_string())
            .ok_or_else(|| invalid(format!("bad input path {}", base.display())))?;
        let base = base.with_file_name(&stem);
        // corpus layout: <utterance>/emg_silent, so name by utterance
        let name = match base.parent().and_then(|p| p.file_name()) {
            Some(dir) if stem == "emg_silent" => dir.to_string_lossy().to_string(),
            _ => stem,
        };
        if table.contains_key(&name) {
            return Err(invalid(format!("two inputs map to the output name {name:?}")));
        }
        let rec = load_emg(&base, Mode::Silent)?;
        let feats = emg_features(&condition(&rec)?, Mode::Silent)?;
        let out = infer_features(&model, &feats, vocoder_iters)?;
        let wav = out_dir.join(format!("{name}.wav"));
        out.audio.write_wav(&wav)?;
        out.mel.save(&out_dir.join(format!("{name}.mel")))?;
        table.insert(name, out.durations);
        written.push(wav);
    }
    write_durations(&out_dir.join("durations.txt"), &table)?;
    Ok(written)
}

/// Result of one stage invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    pub dir: PathBuf,
}

/// Aggregate scores written by the evaluate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub metrics: MetricSummary,
    pub toneme_accuracy: f64,
    pub tone_accuracy: f64,
    pub scored_frames: usize,
    /// MCD of the ground-truth-duration decode against the resynthesized
    /// target mel, and of a shuffled-utterance pairing as a baseline.
    pub mcd_gt_resynth: f64,
    pub mcd_shuffled_baseline: f64,
}

pub struct Pipeline {
    cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.workdir.join(stage.name())
    }

    pub fn corpus_root(&self) -> PathBuf {
        self.cfg
            .corpus_root
            .clone()
            .unwrap_or_else(|| self.stage_dir(Stage::SynthData))
    }

    pub fn run(&self, command: Command) -> Result<Vec<StageReport>> {
        fs::create_dir_all(&self.cfg.workdir).map_err(|e| Error::io(&self.cfg.workdir, e))?;
        match command {
            Command::Stage(s) => Ok(vec![self.run_stage(s)?]),
            Command::All => Stage::ALL
                .into_iter()
                .filter(|&s| s != Stage::SynthData || self.cfg.corpus_root.is_none())
                .map(|s| self.run_stage(s))
                .collect(),
        }
    }

    fn corpus_hash(&self) -> Result<String> {
        match &self.cfg.corpus_root {
            None => Ok(Provenance::read(&self.stage_dir(Stage::SynthData))?.digest()),
            Some(root) => {
                let p = Provenance {
                    stage: "corpus".into(),
                    tool_version: String::new(),
                    config_hash: String::new(),
                    input_hashes: BTreeMap::new(),
                    outputs: hash_tree(root)?,
                };
                Ok(p.digest())
            }
        }
    }

    fn inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        if stage != Stage::SynthData {
            m.insert("corpus".to_string(), self.corpus_hash()?);
        }
        for &up in stage.upstream() {
            m.insert(up.name().to_string(), Provenance::read(&self.stage_dir(up))?.digest());
        }
        Ok(m)
    }

    /// Runs `stage` unless its recorded provenance still matches.
    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        let dir = self.stage_dir(stage);
        let inputs = self.inputs(stage)?;
        let config_hash = self.cfg.hash_groups(stage.groups());
        if let Ok(p) = Provenance::read(&dir) {
            if p.config_hash == config_hash
                && p.input_hashes == inputs
                && p.tool_version == TOOL_VERSION
                && hash_tree(&dir).map(|h| h == p.outputs).unwrap_or(false)
            {
                return Ok(StageReport { stage, skipped: true, dir });
            }
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        match stage {
            Stage::SynthData => self.synth_data(&dir)?,
            Stage::Condition => self.condition(&dir)?,
            Stage::Featurize => self.featurize(&dir)?,
            Stage::Align => self.align(&dir)?,
            Stage::Train => self.train(&dir)?,
            Stage::Infer => self.infer(&dir)?,
            Stage::Evaluate => self.evaluate(&dir)?,
        }
        let p = Provenance {
            stage: stage.name().to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash,
            input_hashes: inputs,
            outputs: hash_tree(&dir)?,
        };
        write_text(&dir.join(PROVENANCE_FILE), &serde_json::to_string_pretty(&p)?)?;
        Ok(StageReport { stage, skipped: false, dir })
    }

    fn synth_data(&self, dir: &Path) -> Result<()> {
        let utts = synth::generate(&self.cfg.synth)?;
        synth::write_corpus(dir, &self.cfg.synth, &utts)?;
        let ids: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
        synth::split(&ids, self.cfg.synth.seed)?.write(dir)
    }

    /// Utterance directories of the corpus, sorted.
    fn corpus_ids(&self) -> Result<Vec<String>> {
        let root = self.corpus_root();
        if !root.is_dir() {
            return Err(Error::MissingArtifact(root));
        }
        let mut ids = Vec::new();
        for e in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
            let e = e.map_err(|e| Error::io(&root, e))?;
            if e.path().join("emg_silent.json").exists() {
                ids.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        if ids.is_empty() {
            return Err(invalid(format!("no utterances under {}", root.display())));
        }
        ids.sort();
        Ok(ids)
    }

    fn split(&self) -> Result<Split> {
        Split::read(&self.stage_dir(Stage::Condition))
    }

    fn condition(&self, dir: &Path) -> Result<()> {
        let root = self.corpus_root();
        let ids = self.corpus_ids()?;
        parallel_map(&ids, self.cfg.workers, |id| {
            let src = root.join(id);
            let out = dir.join(id);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            condition(&load_emg(&src.join("emg_silent"), Mode::Silent)?)?.save(&out.join("emg_silent"), Mode::Silent)?;
            condition(&load_emg(&src.join("emg_vocal"), Mode::Vocal)?)?.save(&out.join("emg_vocal"), Mode::Vocal)
        })?;
        let split = match Split::read(&root) {
            Ok(s) => s,
            Err(Error::MissingArtifact(_)) => synth::split(&ids, self.cfg.training.seed)?,
            Err(e) => return Err(e),
        };
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            if !ids.contains(id) {
                return Err(invalid(format!("split lists unknown utterance `{id}`")));
            }
        }
        split.write(dir)
    }

    fn inventory(&self) -> Result<TonemeSet> {
        let p = self.corpus_root().join(LEXICON_FILE);
        if p.exists() {
            let text = read_text(&p)?;
            build_inventory(&text.split_whitespace().collect::<Vec<_>>())
        } else {
            Ok(full_inventory())
        }
    }

    fn featurize(&self, dir: &Path) -> Result<()> {
        let root = self.corpus_root();
        let cond = self.stage_dir(Stage::Condition);
        let inv = self.inventory()?;
        inv.save(&dir.join("inventory.txt"))?;
        let ids = self.corpus_ids()?;
        let rows = parallel_map(&ids, self.cfg.workers, |id| {
            let out = dir.join(id);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let silent = emg_features(&load_emg(&cond.join(id).join("emg_silent"), Mode::Silent)?, Mode::Silent)?;
            let mut vocal = emg_features(&load_emg(&cond.join(id).join("emg_vocal"), Mode::Vocal)?, Mode::Vocal)?;
            let mut mel = mel_spectrogram(&AudioWaveform::read_wav(&root.join(id).join("audio.wav"))?)?;
            let report = synchronize(&mut vocal, &mut mel)?;
            let alignment = parse_textgrid(&read_text(&root.join(id).join("alignment.textgrid"))?)?;
            let labels = rasterize(&alignment, mel.len(), &inv)?;
            let transcript = Transcript::read(&root.join(id).join("transcript.txt"))?;
            let mut reference = Vec::new();
            for s in &transcript.syllables {
                reference.extend(split_syllable(s)?);
            }
            silent.save(&out.join("silent"))?;
            vocal.save(&out.join("vocal"))?;
            mel.save(&out.join("mel"))?;
            let names: Vec<&str> = labels.ids.iter().map(|&i| inv.label(i).expect("rasterized id")).collect();
            write_text(&out.join("tonemes.txt"), &(names.join(" ") + "\n"))?;
            write_text(&out.join("reference.txt"), &(reference.join(" ") + "\n"))?;
            Ok(format!(
                "{id},{},{},{},{}\n",
                silent.len(),
                report.emg_frames,
                report.mel_frames,
                report.delta
            ))
        })?;
        let mut csv = String::from("utterance_id,silent_frames,vocal_frames,mel_frames,delta\n");
        csv.extend(rows);
        write_text(&dir.join("frames.csv"), &csv)
    }

    fn align(&self, dir: &Path) -> Result<()> {
        let feat = self.stage_dir(Stage::Featurize);
        let ids = self.corpus_ids()?;
        let ds = parallel_map(&ids, self.cfg.workers, |id| {
            let s = FeatureSequence::load(&feat.join(id).join("silent"), Mode::Silent)?;
            let v = FeatureSequence::load(&feat.join(id).join("vocal"), Mode::Vocal)?;
            path_to_durations(&dtw_basic(s.frames(), v.frames())?, s.len(), v.len())
        })?;
        write_durations(&dir.join("durations.txt"), &ids.into_iter().zip(ds).collect())
    }

    /// Head classes and the inventory-to-class map for the configured
    /// tone setting.
    fn classes(&self) -> Result<(TonemeSet, Vec<usize>, TonemeSet)> {
        let inv = TonemeSet::load(&self.stage_dir(Stage::Featurize).join("inventory.txt"))?;
        let (classes, map) = class_map(&inv, self.cfg.training.model.tones_enabled);
        Ok((classes, map, inv))
    }

    /// Training example; reads vocal data, so only training and alignment
    /// may call it.
    fn training_utterance(&self, id: &str, inv: &TonemeSet, map: &[usize]) -> Result<Utterance> {
        let feat = self.stage_dir(Stage::Featurize).join(id);
        let tonemes = read_labels(&feat.join("tonemes.txt"))?
            .iter()
            .map(|l| inv.id(l).map(|i| map[i]).ok_or_else(|| Error::UnknownLabel(l.clone())))
            .collect::<Result<_>>()?;
        Ok(Utterance {
            id: id.to_string(),
            silent: FeatureSequence::load(&feat.join("silent"), Mode::Silent)?.frames().clone(),
            vocal: FeatureSequence::load(&feat.join("vocal"), Mode::Vocal)?.frames().clone(),
            mel: MelSpectrogram::load(&feat.join("mel"))?.into_frames(),
            tonemes,
        })
    }

    fn train(&self, dir: &Path) -> Result<()> {
        let split = self.split()?;
        let (classes, map, inv) = self.classes()?;
        classes.save(&dir.join("classes.txt"))?;
        let load = |ids: &[String]| parallel_map(ids, self.cfg.workers, |id| self.training_utterance(id, &inv, &map));
        let (tr, va, te) = (load(&split.train)?, load(&split.val)?, load(&split.test)?);
        let table = read_durations(&self.stage_dir(Stage::Align).join("durations.txt"))?;
        let cached = |us: &[Utterance]| -> Result<Vec<DurationSequence>> {
            us.iter()
                .map(|u| table.get(&u.id).cloned().ok_or_else(|| invalid(format!("no durations for `{}`", u.id))))
                .collect()
        };
        let initial = (cached(&tr)?, cached(&va)?);
        let mut cfg = self.cfg.training.clone();
        cfg.model.input_dim = tr.first().map(|u| u.silent.cols()).ok_or_else(|| invalid("empty training split"))?;
        cfg.model.num_classes = classes.len();
        let sink = CheckpointSink {
            dir: dir.join("checkpoints"),
            config_hash: self.cfg.hash_groups(Stage::Train.groups()),
        };
        let out = train(&tr, &va, &cfg, Some(initial), Some(&sink))?;
        write_text(&dir.join("loss.csv"), &out.log.loss_csv())?;
        write_text(&dir.join("epochs.csv"), &out.log.epoch_csv())?;
        let mut final_d: BTreeMap<String, DurationSequence> = BTreeMap::new();
        for (u, d) in tr.iter().zip(&out.train_durations).chain(va.iter().zip(&out.val_durations)) {
            final_d.insert(u.id.clone(), d.clone());
        }
        write_durations(&dir.join("durations.txt"), &final_d)?;
        // ground-truth durations of the test split, from the selected model
        let gt = parallel_map(&te, self.cfg.workers, |u| refresh_one(&out.best, u, cfg.lambda_align))?;
        write_durations(
            &dir.join("test_durations.txt"),
            &te.iter().map(|u| u.id.clone()).zip(gt).collect(),
        )
    }

    fn model(&self) -> Result<Ssrnet> {
        Ok(load_checkpoint(&self.stage_dir(Stage::Train).join("checkpoints").join("best.ckpt"))?.0)
    }

    fn silent_features(&self, id: &str) -> Result<FeatureSequence> {
        FeatureSequence::load(&self.stage_dir(Stage::Featurize).join(id).join("silent"), Mode::Silent)
    }

    fn infer(&self, dir: &Path) -> Result<()> {
        let split = self.split()?;
        let model = self.model()?;
        let classes = TonemeSet::load(&self.stage_dir(Stage::Train).join("classes.txt"))?;
        let ds = parallel_map(&split.test, self.cfg.workers, |id| {
            let out = infer_features(&model, &self.silent_features(id)?, self.cfg.vocoder_iters)?;
            let d = dir.join(id);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            out.mel.save(&d.join("mel"))?;
            out.audio.write_wav(&d.join("audio.wav"))?;
            write_text(&d.join("hypothesis.txt"), &(collapse_labels(&out.classes, &classes).join(" ") + "\n"))?;
            Ok(out.durations)
        })?;
        write_durations(&dir.join("durations.txt"), &split.test.iter().cloned().zip(ds).collect())
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let split = self.split()?;
        if split.test.is_empty() {
            return Err(invalid("test split is empty"));
        }
        let model = self.model()?;
        let (classes, map, inv) = self.classes()?;
        let feat = self.stage_dir(Stage::Featurize);
        let hyp = self.stage_dir(Stage::Infer);
        let root = self.corpus_root();
        let gt = read_durations(&self.stage_dir(Stage::Train).join("test_durations.txt"))?;
        let on = MetricToggles {
            cer: self.cfg.metric_cer,
            mcd: self.cfg.metric_mcd,
            stoi: self.cfg.metric_stoi,
        };
        let to_class = |l: &String| -> Result<String> {
            let id = inv.id(l).ok_or_else(|| Error::UnknownLabel(l.clone()))?;
            Ok(classes.label(map[id]).expect("mapped class").to_string())
        };
        struct Scored {
            report: MetricReport,
            truth: Vec<usize>,
            predicted: Vec<usize>,
            target: Option<AudioWaveform>,
            decoded: Option<AudioWaveform>,
        }
        let scored = parallel_map(&split.test, self.cfg.workers, |id| {
            let hdir = hyp.join(id);
            if !hdir.is_dir() {
                return Err(Error::MissingArtifact(hdir));
            }
            let reference = read_labels(&feat.join(id).join("reference.txt"))?
                .iter()
                .map(to_class)
                .collect::<Result<Vec<_>>>()?;
            let hypothesis = read_labels(&hdir.join("hypothesis.txt"))?;
            let ref_audio = AudioWaveform::read_wav(&root.join(id).join("audio.wav"))?;
            let hyp_audio = AudioWaveform::read_wav(&hdir.join("audio.wav"))?;
            let report = score_utterance(id, (&ref_audio, &reference), (&hyp_audio, &hypothesis), on)?;

            let d = gt.get(id).ok_or_else(|| invalid(format!("no ground-truth durations for `{id}`")))?;
            let silent = self.silent_features(id)?;
            let predicted = predict_tonemes(&model, silent.frames(), d.as_slice())?;
            let truth = read_labels(&feat.join(id).join("tonemes.txt"))?
                .iter()
                .map(|l| inv.id(l).map(|i| map[i]).ok_or_else(|| Error::UnknownLabel(l.clone())))
                .collect::<Result<Vec<_>>>()?;
            let (target, decoded) = if on.mcd {
                let target_mel = MelSpectrogram::load(&feat.join(id).join("mel"))?;
                let decoded_mel = MelSpectrogram::new(model.mel_for_durations(silent.frames(), d.as_slice())?)?;
                (
                    Some(griffin_lim(&target_mel, self.cfg.vocoder_iters)?),
                    Some(griffin_lim(&decoded_mel, self.cfg.vocoder_iters)?),
                )
            } else {
                (None, None)
            };
            Ok(Scored { report, truth, predicted, target, decoded })
        })?;

        let mut scores = TonemeScores::new(&classes);
        for s in &scored {
            scores.add(&classes, &s.truth, &s.predicted);
        }
        let (mut gt_mcd, mut shuffled) = (f64::NAN, f64::NAN);
        if on.mcd {
            let n = scored.len();
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, i), (i, (i + 1) % n)]).collect();
            let vals = parallel_map(&pairs, self.cfg.workers, |&(i, j)| {
                mcd(
                    scored[i].target.as_ref().expect("computed when mcd is on"),
                    scored[j].decoded.as_ref().expect("computed when mcd is on"),
                )
            })?;
            gt_mcd = vals.iter().step_by(2).sum::<f64>() / n as f64;
            shuffled = vals.iter().skip(1).step_by(2).sum::<f64>() / n as f64;
        }
        let reports: Vec<MetricReport> = scored.into_iter().map(|s| s.report).collect();
        let summary = EvaluationSummary {
            metrics: summarize(&reports),
            toneme_accuracy: scores.toneme_accuracy(),
            tone_accuracy: scores.tone_accuracy(),
            scored_frames: scores.frames,
            mcd_gt_resynth: gt_mcd,
            mcd_shuffled_baseline: shuffled,
        };
        write_text(&dir.join("metrics.csv"), &reports_csv(&reports))?;
        write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
        write_text(&dir.join("confusion.csv"), &scores.confusion.normalized_csv())?;
        write_text(&dir.join("confusion_counts.csv"), &scores.confusion.to_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("all".parse::<Command>().unwrap(), Command::All);
        assert_eq!("bake".parse::<Command>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn pool_keeps_order_and_first_error() {
        let items: Vec<usize> = (0..50).collect();
        let out = parallel_map(&items, 4, |&i| Ok(i * i)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
        let err = parallel_map(&items, 3, |&i| if i % 7 == 3 { Err(invalid(format!("{i}"))) } else { Ok(i) }).unwrap_err();
        assert!(err.to_string().ends_with(": 3"), "{err}");
    }

    #[test]
    fn labels_collapse_and_score() {
        let set = TonemeSet::from_labels(vec!["sil".into(), "a1".into(), "m".into()]).unwrap();
        let labels = collapse_labels(&[0, 2, 2, 1, 1, 0, 0, 1], &set);
        assert_eq!(labels, ["m", "a1", "a1"]);
        let r: Vec<String> = ["m", "a1"].iter().map(|s| s.to_string()).collect();
        assert_eq!(label_cer(&r, &r).unwrap(), 0.0);
        assert_eq!(label_cer(&r, &labels).unwrap(), 0.5);
    }

    #[test]
    fn identical_hypothesis_scores_perfectly() {
        let samples: Vec<f64> = (0..16000).map(|i| (i as f64 * 0.05).sin() * (i as f64 * 0.0007).sin()).collect();
        let a = AudioWaveform::new(samples, crate::signal::AUDIO_SAMPLE_RATE).unwrap();
        let t: Vec<String> = ["b", "a1"].iter().map(|s| s.to_string()).collect();
        let on = MetricToggles { cer: true, mcd: true, stoi: true };
        let r = score_utterance("u", (&a, &t), (&a, &t), on).unwrap();
        assert_eq!(r.cer, 0.0);
        assert_eq!(r.mcd, 0.0);
        assert!((r.stoi - 1.0).abs() < 1e-6);
        let off = MetricToggles { cer: false, mcd: false, stoi: true };
        assert!(score_utterance("u", (&a, &t), (&a, &t), off).unwrap().cer.is_nan());
    }
}
