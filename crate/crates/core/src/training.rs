//! Epoch loop: Noam schedule, periodic duration refresh, batching and
//! validation-based model selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dtw::{dtw_basic, dtw_refined, path_to_durations, DurationSequence};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::model::{LossBreakdown, Ssrnet, SsrnetConfig, Targets};
use crate::nn::{AdamConfig, CheckpointMeta, Graph, ParamStore};
use crate::toneme::TonemeSet;

/// `d_model^-0.5 * min(step^-0.5, step * step_w^-1.5)`.
pub fn noam_lr(step: u64, step_w: u64, d_model: usize) -> Result<f64> {
    if step < 1 {
        return Err(invalid("noam step must be at least 1"));
    }
    if step_w < 1 || d_model < 1 {
        return Err(invalid("noam warmup and model width must be positive"));
    }
    let s = step as f64;
    let w = step_w as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub model: SsrnetConfig,
    pub batch_size: usize,
    pub step_w: u64,
    /// Multiplier on the Noam rate; 1 is the plain schedule.
    pub lr_scale: f64,
    pub lambda_align: f64,
    pub epochs: usize,
    pub refresh_period: usize,
    pub warm_epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            model: SsrnetConfig::default(),
            batch_size: 8,
            step_w: 4000,
            lr_scale: 1.0,
            lambda_align: 10.0,
            epochs: 100,
            refresh_period: 5,
            warm_epochs: 4,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.step_w == 0 {
            return Err(Error::Config("step_w must be at least 1".into()));
        }
        if !(self.lambda_align >= 0.0) {
            return Err(Error::Config("lambda_align must be non-negative".into()));
        }
        if !(self.lr_scale > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr_scale and clip_norm must be positive".into()));
        }
        if self.refresh_period == 0 {
            return Err(Error::Config("refresh_period must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether cached durations are realigned at the start of `epoch`
    /// (1-based).
    pub fn refreshes_at(&self, epoch: usize) -> bool {
        epoch > self.warm_epochs && epoch.is_multiple_of(self.refresh_period)
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        Ok(self.lr_scale * noam_lr(step, self.step_w, self.model.d_model)?)
    }
}

/// One paired training example. `tonemes` holds class ids of the model's
/// toneme head, one per output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub silent: Matrix,
    pub vocal: Matrix,
    pub mel: Matrix,
    pub tonemes: Vec<usize>,
}

impl Utterance {
    pub fn output_frames(&self) -> usize {
        self.mel.rows()
    }

    fn check(&self) -> Result<()> {
        let m = self.mel.rows();
        if self.silent.rows() == 0 || m == 0 {
            return Err(invalid(format!("utterance {} is empty", self.id)));
        }
        if self.vocal.rows() != m || self.tonemes.len() != m {
            return Err(Error::Shape(format!(
                "utterance {}: {} mel frames, {} vocal frames, {} toneme labels",
                self.id,
                m,
                self.vocal.rows(),
                self.tonemes.len()
            )));
        }
        Ok(())
    }
}

/// Durations from plain feature DTW, used before any model exists.
pub fn initial_durations(u: &Utterance) -> Result<DurationSequence> {
    let path = dtw_basic(&u.silent, &u.vocal)?;
    path_to_durations(&path, u.silent.rows(), u.vocal.rows())
}

/// Maps inventory ids to head classes: the identity when tones are
/// modelled, the toneless merge otherwise.
pub fn class_map(inventory: &TonemeSet, tones_enabled: bool) -> (TonemeSet, Vec<usize>) {
    if tones_enabled {
        (inventory.clone(), (0..inventory.len()).collect())
    } else {
        inventory.toneless()
    }
}

/// Realigns one utterance with the model output at input resolution.
pub fn refresh_one(model: &Ssrnet, u: &Utterance, lambda_align: f64) -> Result<DurationSequence> {
    let bypass = model.bypass_mel(&u.silent)?;
    let path = dtw_refined(&u.silent, &u.vocal, &bypass, &u.mel, lambda_align)?;
    let d = path_to_durations(&path, u.silent.rows(), u.mel.rows())?;
    if d.total() != u.mel.rows() {
        return Err(invalid(format!(
            "refreshed durations of {} sum to {}, expected {}",
            u.id,
            d.total(),
            u.mel.rows()
        )));
    }
    Ok(d)
}

/// Realigns every utterance; the cache is replaced only if all succeed.
pub fn refresh_durations(
    cache: &mut [DurationSequence],
    model: &Ssrnet,
    utterances: &[Utterance],
    lambda_align: f64,
) -> Result<()> {
    let fresh = utterances
        .iter()
        .map(|u| refresh_one(model, u, lambda_align))
        .collect::<Result<Vec<_>>>()?;
    cache.clone_from_slice(&fresh);
    Ok(())
}

/// Mean joint loss over `batch`, built into a single graph so one backward
/// pass yields the batch gradient.
pub fn batch_loss(
    model: &Ssrnet,
    g: &mut Graph,
    batch: &[(&Utterance, &DurationSequence)],
) -> Result<(crate::nn::Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut total = None;
    let mut mean = LossBreakdown::default();
    for (u, d) in batch {
        let out = model.forward(g, &u.silent, d.as_slice())?;
        let t = Targets {
            mel: &u.mel,
            durations: d.as_slice(),
            tonemes: &u.tonemes,
            vocal_features: &u.vocal,
        };
        let (loss, b) = model.total_loss(g, &out, &t)?;
        mean.add_scaled(&b, w);
        let scaled = g.scale(loss, w);
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled),
        });
    }
    Ok((total.expect("non-empty batch"), mean))
}

/// Eval-mode mean loss with the given durations.
pub fn evaluate(model: &Ssrnet, utterances: &[Utterance], durations: &[DurationSequence]) -> Result<LossBreakdown> {
    if utterances.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let mut mean = LossBreakdown::default();
    let w = 1.0 / utterances.len() as f64;
    for (u, d) in utterances.iter().zip(durations) {
        let mut g = Graph::new(false, 0);
        let (_, b) = batch_loss(model, &mut g, &[(u, d)])?;
        mean.add_scaled(&b, w);
    }
    if !mean.total.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps (train mode).
    pub train_total: f64,
    pub val_total: f64,
    pub refreshed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,mae_post,mae_pre,mse_dur,ce_tm,mse_recons,total,lr\n");
        for r in &self.steps {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.step, l.mae_post, l.mae_pre, l.mse_dur, l.ce_tm, l.mse_recons, l.total, r.lr
            );
        }
        s
    }

    pub fn epoch_csv(&self) -> String {
        let mut s = String::from("epoch,train_total,val_total,refreshed\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.9e},{:.9e},{}", e.epoch, e.train_total, e.val_total, e.refreshed as u8);
        }
        s
    }
}

/// Where and how checkpoints are written during training.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl CheckpointSink {
    fn write(&self, name: &str, store: &ParamStore, cfg: &SsrnetConfig, step: u64, epoch: usize) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(name);
        let meta = CheckpointMeta {
            step,
            epoch,
            config_hash: self.config_hash.clone(),
            model_config: serde_json::to_string(cfg)?,
        };
        store.save(&path, &meta)?;
        Ok(path)
    }
}

/// Loads a checkpoint written by [`train`] and rebuilds the model.
pub fn load_checkpoint(path: &Path) -> Result<(Ssrnet, CheckpointMeta)> {
    let (store, meta) = ParamStore::load(path)?;
    let cfg: SsrnetConfig = serde_json::from_str(&meta.model_config)?;
    Ok((Ssrnet::from_params(cfg, &store)?, meta))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss.
    pub best: Ssrnet,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Parameters after the last epoch.
    pub last: Ssrnet,
    pub log: TrainLog,
    pub train_durations: Vec<DurationSequence>,
    pub val_durations: Vec<DurationSequence>,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step
}

/// Trains from scratch. `initial` supplies the pre-training duration cache
/// for train and validation utterances (plain DTW is used when `None`).
pub fn train(
    train_set: &[Utterance],
    val_set: &[Utterance],
    cfg: &TrainingConfig,
    initial: Option<(Vec<DurationSequence>, Vec<DurationSequence>)>,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training needs non-empty train and validation splits"));
    }
    for u in train_set.iter().chain(val_set) {
        u.check()?;
        if let Some(&bad) = u.tonemes.iter().find(|&&c| c >= cfg.model.num_classes) {
            return Err(invalid(format!(
                "utterance {} has toneme class {bad}, model has {}",
                u.id, cfg.model.num_classes
            )));
        }
    }
    let (mut train_d, mut val_d) = match initial {
        Some(v) => v,
        None => (
            train_set.iter().map(initial_durations).collect::<Result<_>>()?,
            val_set.iter().map(initial_durations).collect::<Result<_>>()?,
        ),
    };
    for (u, d) in train_set.iter().zip(&train_d).chain(val_set.iter().zip(&val_d)) {
        if d.len() != u.silent.rows() || d.total() != u.mel.rows() {
            return Err(invalid(format!("duration cache of {} does not match its frames", u.id)));
        }
    }
    if train_d.len() != train_set.len() || val_d.len() != val_set.len() {
        return Err(invalid("duration cache size differs from the corpus"));
    }

    let mut model = Ssrnet::new(cfg.model.clone(), cfg.seed)?;
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let refreshed = cfg.refreshes_at(epoch);
        if refreshed {
            refresh_durations(&mut train_d, &model, train_set, cfg.lambda_align)?;
            refresh_durations(&mut val_d, &model, val_set, cfg.lambda_align)?;
            if let Some(s) = sink {
                s.write(&format!("epoch{epoch:04}.ckpt"), model.params(), &cfg.model, step, epoch)?;
            }
        }
        order.shuffle(&mut shuffle);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = cfg.lr(step)?;
            let batch: Vec<_> = chunk.iter().map(|&i| (&train_set[i], &train_d[i])).collect();
            let mut g = Graph::new(true, step_seed(cfg.seed, step));
            let (loss, b) = batch_loss(&model, &mut g, &batch)?;
            if !b.total.is_finite() || g.non_finite().is_some() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {step} ({})",
                    g.non_finite().unwrap_or("loss")
                )));
            }
            g.backward(loss);
            let store = model.params_mut();
            g.accumulate_into(store);
            let norm = store.clip_grad_norm(cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm at step {step}")));
            }
            store.adam_step(lr, adam)?;
            epoch_sum += b.total * chunk.len() as f64;
            log.steps.push(StepLog { step, epoch, loss: b, lr });
        }
        let val = evaluate(&model, val_set, &val_d)?.total;
        log.epochs.push(EpochLog {
            epoch,
            train_total: epoch_sum / train_set.len() as f64,
            val_total: val,
            refreshed,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val < *v) {
            best = Some((val, epoch, model.params().clone()));
            if let Some(s) = sink {
                s.write("best.ckpt", model.params(), &cfg.model, step, epoch)?;
            }
        }
    }

    let (best_val, best_epoch, best_store) = match best {
        Some(b) => b,
        None => (f64::INFINITY, 0, model.params().clone()),
    };
    Ok(TrainOutcome {
        best: Ssrnet::from_params(cfg.model.clone(), &best_store)?,
        best_epoch,
        best_val,
        last: model,
        log,
        train_durations: train_d,
        val_durations: val_d,
    })
}
