//! Flat `key = value` configuration for the command-line pipeline.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ClassifierPosition;
use crate::synth::SyntheticSpec;
use crate::training::TrainingConfig;

/// Everything a pipeline run depends on. Feature analysis parameters are
/// fixed by the feature extractor and are not configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    /// External corpus; when `None` the synthetic corpus written by the
    /// `synth-data` stage is used.
    pub corpus_root: Option<PathBuf>,
    pub synth: SyntheticSpec,
    /// Model and optimizer settings; `input_dim` and `num_classes` are
    /// taken from the data.
    pub training: TrainingConfig,
    pub vocoder_iters: usize,
    pub metric_cer: bool,
    pub metric_mcd: bool,
    pub metric_stoi: bool,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
            corpus_root: None,
            synth: SyntheticSpec::default(),
            training: TrainingConfig::default(),
            vocoder_iters: crate::vocoder::DEFAULT_ITERS,
            metric_cer: true,
            metric_mcd: true,
            metric_stoi: true,
            workers: 1,
        }
    }
}

/// Which stage-relevant group a key belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyGroup {
    Paths,
    Synth,
    Model,
    Vocoder,
    Metrics,
    Runtime,
}

const KEYS: &[(&str, KeyGroup)] = &[
    ("workdir", KeyGroup::Paths),
    ("corpus_root", KeyGroup::Paths),
    ("synth_utterances", KeyGroup::Synth),
    ("synth_min_syllables", KeyGroup::Synth),
    ("synth_max_syllables", KeyGroup::Synth),
    ("synth_lexicon", KeyGroup::Synth),
    ("synth_seed", KeyGroup::Synth),
    ("synth_tempo_min", KeyGroup::Synth),
    ("synth_tempo_max", KeyGroup::Synth),
    ("synth_noise_level", KeyGroup::Synth),
    ("d_model", KeyGroup::Model),
    ("enc_layers", KeyGroup::Model),
    ("dec_layers", KeyGroup::Model),
    ("hidden_units", KeyGroup::Model),
    ("heads", KeyGroup::Model),
    ("fft_kernel", KeyGroup::Model),
    ("postnet_layers", KeyGroup::Model),
    ("postnet_channels", KeyGroup::Model),
    ("postnet_kernel", KeyGroup::Model),
    ("durpred_layers", KeyGroup::Model),
    ("durpred_channels", KeyGroup::Model),
    ("durpred_kernel", KeyGroup::Model),
    ("dropout_main", KeyGroup::Model),
    ("dropout_postnet", KeyGroup::Model),
    ("lambda_tm", KeyGroup::Model),
    ("lambda_recons", KeyGroup::Model),
    ("classifier_position", KeyGroup::Model),
    ("tones_enabled", KeyGroup::Model),
    ("batch_size", KeyGroup::Model),
    ("step_w", KeyGroup::Model),
    ("lr_scale", KeyGroup::Model),
    ("lambda_align", KeyGroup::Model),
    ("epochs", KeyGroup::Model),
    ("refresh_period", KeyGroup::Model),
    ("warm_epochs", KeyGroup::Model),
    ("clip_norm", KeyGroup::Model),
    ("seed", KeyGroup::Model),
    ("vocoder_iters", KeyGroup::Vocoder),
    ("metric_cer", KeyGroup::Metrics),
    ("metric_mcd", KeyGroup::Metrics),
    ("metric_stoi", KeyGroup::Metrics),
    ("workers", KeyGroup::Runtime),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl PipelineConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    /// Sets one key from its text form. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.training;
        let s = &mut self.synth;
        match key {
            "workdir" => self.workdir = PathBuf::from(v),
            "corpus_root" => self.corpus_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth_utterances" => s.n_utterances = parse(key, v)?,
            "synth_min_syllables" => s.min_syllables = parse(key, v)?,
            "synth_max_syllables" => s.max_syllables = parse(key, v)?,
            "synth_lexicon" => {
                s.lexicon = if v.is_empty() {
                    crate::synth::default_lexicon()
                } else {
                    v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
                }
            }
            "synth_seed" => s.seed = parse(key, v)?,
            "synth_tempo_min" => s.tempo_min = parse(key, v)?,
            "synth_tempo_max" => s.tempo_max = parse(key, v)?,
            "synth_noise_level" => s.noise_level = parse(key, v)?,
            "d_model" => t.model.d_model = parse(key, v)?,
            "enc_layers" => t.model.enc_layers = parse(key, v)?,
            "dec_layers" => t.model.dec_layers = parse(key, v)?,
            "hidden_units" => t.model.hidden_units = parse(key, v)?,
            "heads" => t.model.heads = parse(key, v)?,
            "fft_kernel" => t.model.fft_kernel = parse(key, v)?,
            "postnet_layers" => t.model.postnet_layers = parse(key, v)?,
            "postnet_channels" => t.model.postnet_channels = parse(key, v)?,
            "postnet_kernel" => t.model.postnet_kernel = parse(key, v)?,
            "durpred_layers" => t.model.durpred_layers = parse(key, v)?,
            "durpred_channels" => t.model.durpred_channels = parse(key, v)?,
            "durpred_kernel" => t.model.durpred_kernel = parse(key, v)?,
            "dropout_main" => t.model.dropout_main = parse(key, v)?,
            "dropout_postnet" => t.model.dropout_postnet = parse(key, v)?,
            "lambda_tm" => t.model.lambda_tm = parse(key, v)?,
            "lambda_recons" => t.model.lambda_recons = parse(key, v)?,
            "classifier_position" => {
                t.model.classifier_position = v.parse::<ClassifierPosition>().map_err(|e| Error::Config(format!("`{key}`: {e}")))?
            }
            "tones_enabled" => t.model.tones_enabled = parse_bool(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "step_w" => t.step_w = parse(key, v)?,
            "lr_scale" => t.lr_scale = parse(key, v)?,
            "lambda_align" => t.lambda_align = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "refresh_period" => t.refresh_period = parse(key, v)?,
            "warm_epochs" => t.warm_epochs = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "vocoder_iters" => self.vocoder_iters = parse(key, v)?,
            "metric_cer" => self.metric_cer = parse_bool(key, v)?,
            "metric_mcd" => self.metric_mcd = parse_bool(key, v)?,
            "metric_stoi" => self.metric_stoi = parse_bool(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in the same text form [`set`](Self::set) accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.training.model;
        let t = &self.training;
        let s = &self.synth;
        Ok(match key {
            "workdir" => self.workdir.display().to_string(),
            "corpus_root" => self.corpus_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "synth_utterances" => s.n_utterances.to_string(),
            "synth_min_syllables" => s.min_syllables.to_string(),
            "synth_max_syllables" => s.max_syllables.to_string(),
            "synth_lexicon" => s.lexicon.join(","),
            "synth_seed" => s.seed.to_string(),
            "synth_tempo_min" => s.tempo_min.to_string(),
            "synth_tempo_max" => s.tempo_max.to_string(),
            "synth_noise_level" => s.noise_level.to_string(),
            "d_model" => m.d_model.to_string(),
            "enc_layers" => m.enc_layers.to_string(),
            "dec_layers" => m.dec_layers.to_string(),
            "hidden_units" => m.hidden_units.to_string(),
            "heads" => m.heads.to_string(),
            "fft_kernel" => m.fft_kernel.to_string(),
            "postnet_layers" => m.postnet_layers.to_string(),
            "postnet_channels" => m.postnet_channels.to_string(),
            "postnet_kernel" => m.postnet_kernel.to_string(),
            "durpred_layers" => m.durpred_layers.to_string(),
            "durpred_channels" => m.durpred_channels.to_string(),
            "durpred_kernel" => m.durpred_kernel.to_string(),
            "dropout_main" => m.dropout_main.to_string(),
            "dropout_postnet" => m.dropout_postnet.to_string(),
            "lambda_tm" => m.lambda_tm.to_string(),
            "lambda_recons" => m.lambda_recons.to_string(),
            "classifier_position" => m.classifier_position.to_string(),
            "tones_enabled" => m.tones_enabled.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "step_w" => t.step_w.to_string(),
            "lr_scale" => t.lr_scale.to_string(),
            "lambda_align" => t.lambda_align.to_string(),
            "epochs" => t.epochs.to_string(),
            "refresh_period" => t.refresh_period.to_string(),
            "warm_epochs" => t.warm_epochs.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "seed" => t.seed.to_string(),
            "vocoder_iters" => self.vocoder_iters.to_string(),
            "metric_cer" => self.metric_cer.to_string(),
            "metric_mcd" => self.metric_mcd.to_string(),
            "metric_stoi" => self.metric_stoi.to_string(),
            "workers" => self.workers.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Parses the text format: one `key = value` per line, `#` comments.
    /// Relative paths are resolved against `base_dir`.
    pub fn parse_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        if let Some(base) = base_dir {
            if cfg.workdir.is_relative() {
                cfg.workdir = base.join(&cfg.workdir);
            }
            if let Some(root) = cfg.corpus_root.as_mut().filter(|r| r.is_relative()) {
                *root = base.join(&*root);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path.parent())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not `key=value`", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.training.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        if self.vocoder_iters == 0 {
            return Err(Error::Config("vocoder_iters must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(root) = &self.corpus_root {
            if !root.is_dir() {
                return Err(Error::Config(format!("corpus_root {} does not exist", root.display())));
            }
        }
        Ok(())
    }

    /// Canonical text form, every key in declaration order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Hash of the keys in `groups`, so a stage only reruns when a setting
    /// it depends on changes.
    pub fn hash_groups(&self, groups: &[KeyGroup]) -> String {
        let mut h = Sha256::new();
        for (k, g) in KEYS {
            if groups.contains(g) {
                h.update(format!("{k}={}\n", self.get(k).expect("listed key")));
            }
        }
        hex::encode(h.finalize())
    }
}
