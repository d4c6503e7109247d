//! The silent-speech reconstruction network: source encoder, length
//! regulator, duration predictor, target decoder with postnet, and the two
//! auxiliary heads (toneme classifier, vocal-EMG reconstruction) used only
//! during training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{FEATURE_DIM, MEL_BINS};
use crate::matrix::Matrix;
use crate::nn::{
    positional_encoding, Conv1d, Graph, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tensor,
    Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPosition {
    BeforeDecoder,
    AfterDecoder,
}

impl std::str::FromStr for ClassifierPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before_decoder" => Ok(Self::BeforeDecoder),
            "after_decoder" => Ok(Self::AfterDecoder),
            other => Err(invalid(format!("unknown classifier position `{other}`"))),
        }
    }
}

impl std::fmt::Display for ClassifierPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BeforeDecoder => "before_decoder",
            Self::AfterDecoder => "after_decoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsrnetConfig {
    pub input_dim: usize,
    pub mel_dim: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden_units: usize,
    pub heads: usize,
    pub fft_kernel: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub durpred_layers: usize,
    pub durpred_channels: usize,
    pub durpred_kernel: usize,
    pub dropout_main: f64,
    pub dropout_postnet: f64,
    pub lambda_tm: f64,
    pub lambda_recons: f64,
    pub classifier_position: ClassifierPosition,
    pub tones_enabled: bool,
    /// Output classes of the toneme head.
    pub num_classes: usize,
}

impl Default for SsrnetConfig {
    fn default() -> Self {
        Self {
            input_dim: FEATURE_DIM,
            mel_dim: MEL_BINS,
            d_model: 384,
            enc_layers: 6,
            dec_layers: 6,
            hidden_units: 1536,
            heads: 4,
            fft_kernel: 3,
            postnet_layers: 5,
            postnet_channels: 256,
            postnet_kernel: 5,
            durpred_layers: 2,
            durpred_channels: 384,
            durpred_kernel: 3,
            dropout_main: 0.1,
            dropout_postnet: 0.5,
            lambda_tm: 0.5,
            lambda_recons: 0.5,
            classifier_position: ClassifierPosition::BeforeDecoder,
            tones_enabled: true,
            num_classes: 140,
        }
    }
}

impl SsrnetConfig {
    /// 2+2 layers, width 8, 2 heads, 2x8 postnet: small enough for
    /// finite-difference checks.
    pub fn reduced() -> Self {
        Self {
            d_model: 8,
            enc_layers: 2,
            dec_layers: 2,
            hidden_units: 32,
            heads: 2,
            postnet_layers: 2,
            postnet_channels: 8,
            durpred_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("mel_dim", self.mel_dim),
            ("d_model", self.d_model),
            ("hidden_units", self.hidden_units),
            ("heads", self.heads),
            ("fft_kernel", self.fft_kernel),
            ("postnet_layers", self.postnet_layers),
            ("postnet_channels", self.postnet_channels),
            ("postnet_kernel", self.postnet_kernel),
            ("durpred_layers", self.durpred_layers),
            ("durpred_channels", self.durpred_channels),
            ("durpred_kernel", self.durpred_kernel),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        for (name, p) in [
            ("dropout_main", self.dropout_main),
            ("dropout_postnet", self.dropout_postnet),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        for (name, l) in [
            ("lambda_tm", self.lambda_tm),
            ("lambda_recons", self.lambda_recons),
        ] {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Self-attention and a two-layer convolutional feed-forward, each with a
/// residual connection followed by layer norm.
#[derive(Debug, Clone)]
struct FftBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    norm2: LayerNorm,
    dropout: f64,
}

impl FftBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &SsrnetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            conv1: Conv1d::new(store, &format!("{name}.conv1"), d, cfg.hidden_units, cfg.fft_kernel, rng)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), cfg.hidden_units, d, cfg.fft_kernel, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            dropout: cfg.dropout_main,
        })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let a = self.attn.forward(g, s, x);
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, s, x);
        let h = self.conv1.forward(g, s, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, s, h);
        let h = g.dropout(h, self.dropout);
        let x = g.add(x, h);
        self.norm2.forward(g, s, x)
    }
}

#[derive(Debug, Clone)]
struct DurationPredictor {
    convs: Vec<(Conv1d, LayerNorm)>,
    out: Linear,
    dropout: f64,
}

impl DurationPredictor {
    fn forward(&self, g: &mut Graph, s: &ParamStore, h: Var) -> Var {
        let mut x = h;
        for (conv, norm) in &self.convs {
            x = conv.forward(g, s, x);
            x = g.relu(x);
            x = norm.forward(g, s, x);
            x = g.dropout(x, self.dropout);
        }
        self.out.forward(g, s, x)
    }
}

#[derive(Debug, Clone)]
struct Postnet {
    convs: Vec<Conv1d>,
    dropout: f64,
}

impl Postnet {
    fn forward(&self, g: &mut Graph, s: &ParamStore, mel: Var) -> Var {
        let last = self.convs.len() - 1;
        let mut x = mel;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, s, x);
            if i < last {
                x = g.tanh(x);
            }
            x = g.dropout(x, self.dropout);
        }
        x
    }
}

/// Graph handles produced by one teacher-forced forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    pub mel_pre: Var,
    pub mel_post: Var,
    /// `N x 1` real-valued durations.
    pub durations: Var,
    /// `None` when the toneme term is weighted 0.
    pub toneme_logits: Option<Var>,
    /// `None` when the reconstruction term is weighted 0.
    pub recon: Option<Var>,
}

/// Training targets of one utterance.
#[derive(Debug, Clone)]
pub struct Targets<'a> {
    pub mel: &'a Matrix,
    pub durations: &'a [usize],
    pub tonemes: &'a [usize],
    pub vocal_features: &'a Matrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mae_post: f64,
    pub mae_pre: f64,
    pub mse_dur: f64,
    /// Weighted toneme cross-entropy.
    pub ce_tm: f64,
    /// Weighted vocal-EMG reconstruction error.
    pub mse_recons: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.mae_post += w * other.mae_post;
        self.mae_pre += w * other.mae_pre;
        self.mse_dur += w * other.mse_dur;
        self.ce_tm += w * other.ce_tm;
        self.mse_recons += w * other.mse_recons;
        self.total += w * other.total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Raw duration predictor outputs.
    pub raw_durations: Vec<f64>,
    pub durations: Vec<usize>,
    pub mel: Matrix,
}

/// Row index list that repeats row `i` `d[i]` times.
pub fn regulation_index(d: &[usize]) -> Vec<usize> {
    d.iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
        .collect()
}

/// Repeats frame `i` of `h` `d[i]` times; zero durations drop frames.
pub fn length_regulate(g: &mut Graph, h: Var, d: &[usize]) -> Result<Var> {
    let n = g.value(h).rows();
    if d.len() != n {
        return Err(Error::Shape(format!(
            "{} durations for {n} hidden frames",
            d.len()
        )));
    }
    let index = regulation_index(d);
    if index.is_empty() {
        return Err(invalid("durations sum to zero"));
    }
    Ok(g.gather_rows(h, index))
}

/// Rounds half-up and clamps at zero; an all-zero result keeps one frame at
/// the largest raw output.
pub fn round_durations(raw: &[f64]) -> Vec<usize> {
    let mut d: Vec<usize> = raw
        .iter()
        .map(|&v| (v + 0.5).floor().max(0.0) as usize)
        .collect();
    if !d.is_empty() && d.iter().all(|&v| v == 0) {
        // first index on ties
        let mut argmax = 0;
        for (i, v) in raw.iter().enumerate() {
            if *v > raw[argmax] {
                argmax = i;
            }
        }
        d[argmax] = 1;
    }
    d
}

#[derive(Debug, Clone)]
pub struct Ssrnet {
    cfg: SsrnetConfig,
    store: ParamStore,
    input: Linear,
    encoder: Vec<FftBlock>,
    decoder: Vec<FftBlock>,
    mel_out: Linear,
    postnet: Postnet,
    duration: DurationPredictor,
    toneme_head: Linear,
    recon_head: Linear,
}

impl Ssrnet {
    pub fn new(cfg: SsrnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = cfg.d_model;
        let input = Linear::new(s, "encoder.input", cfg.input_dim, d, &mut rng)?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| FftBlock::new(s, &format!("encoder.block{i}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| FftBlock::new(s, &format!("decoder.block{i}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mel_out = Linear::new(s, "decoder.mel", d, cfg.mel_dim, &mut rng)?;

        let mut convs = Vec::with_capacity(cfg.postnet_layers);
        for i in 0..cfg.postnet_layers {
            let cin = if i == 0 { cfg.mel_dim } else { cfg.postnet_channels };
            let cout = if i + 1 == cfg.postnet_layers { cfg.mel_dim } else { cfg.postnet_channels };
            convs.push(Conv1d::new(s, &format!("postnet.conv{i}"), cin, cout, cfg.postnet_kernel, &mut rng)?);
        }
        let postnet = Postnet {
            convs,
            dropout: cfg.dropout_postnet,
        };

        let mut dp = Vec::with_capacity(cfg.durpred_layers);
        for i in 0..cfg.durpred_layers {
            let cin = if i == 0 { d } else { cfg.durpred_channels };
            dp.push((
                Conv1d::new(s, &format!("duration.conv{i}"), cin, cfg.durpred_channels, cfg.durpred_kernel, &mut rng)?,
                LayerNorm::new(s, &format!("duration.norm{i}"), cfg.durpred_channels)?,
            ));
        }
        let duration = DurationPredictor {
            convs: dp,
            out: Linear::new(s, "duration.out", cfg.durpred_channels, 1, &mut rng)?,
            dropout: cfg.dropout_main,
        };
        let toneme_head = Linear::new(s, "heads.toneme", d, cfg.num_classes, &mut rng)?;
        let recon_head = Linear::new(s, "heads.recon", d, cfg.input_dim, &mut rng)?;

        Ok(Self {
            cfg,
            store,
            input,
            encoder,
            decoder,
            mel_out,
            postnet,
            duration,
            toneme_head,
            recon_head,
        })
    }

    /// Rebuilds the network for `cfg` and loads parameter values by name.
    pub fn from_params(cfg: SsrnetConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.store.load_values_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &SsrnetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroes every postnet weight and bias.
    pub fn zero_postnet(&mut self) {
        for conv in &self.postnet.convs {
            for id in [conv.weight, conv.bias] {
                self.store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn add_positions(g: &mut Graph, x: Var) -> Var {
        let (t, d) = (g.value(x).rows(), g.value(x).cols());
        let pe = g.constant(positional_encoding(t, d));
        g.add(x, pe)
    }

    /// `N x 355` features to `N x d_model` hidden frames.
    pub fn encode(&self, g: &mut Graph, features: &Matrix) -> Result<Var> {
        if features.cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "model expects {}-dim features, got {}",
                self.cfg.input_dim,
                features.cols()
            )));
        }
        if features.rows() == 0 {
            return Err(invalid("empty feature sequence"));
        }
        let s = &self.store;
        let x = g.constant(Tensor::from(features));
        let x = self.input.forward(g, s, x);
        let x = g.relu(x);
        let mut h = Self::add_positions(g, x);
        for block in &self.encoder {
            h = block.forward(g, s, h);
        }
        Ok(h)
    }

    /// `N x 1` real-valued duration predictions.
    pub fn predict_durations(&self, g: &mut Graph, h: Var) -> Var {
        self.duration.forward(g, &self.store, h)
    }

    /// Regulated hidden frames to `(mel_pre, mel_post, decoder_hidden)`.
    pub fn decode(&self, g: &mut Graph, regulated: Var) -> (Var, Var, Var) {
        let s = &self.store;
        let mut h = Self::add_positions(g, regulated);
        for block in &self.decoder {
            h = block.forward(g, s, h);
        }
        let pre = self.mel_out.forward(g, s, h);
        let residual = self.postnet.forward(g, s, pre);
        let post = g.add(pre, residual);
        (pre, post, h)
    }

    /// Toneme logits and reconstructed vocal features from `hidden`.
    pub fn joint_heads(&self, g: &mut Graph, hidden: Var) -> (Var, Var) {
        let logits = self.toneme_head.forward(g, &self.store, hidden);
        let recon = self.recon_head.forward(g, &self.store, hidden);
        (logits, recon)
    }

    /// Teacher-forced pass with ground-truth durations.
    pub fn forward(&self, g: &mut Graph, features: &Matrix, durations: &[usize]) -> Result<ForwardOutputs> {
        let h = self.encode(g, features)?;
        let dur = self.predict_durations(g, h);
        let regulated = length_regulate(g, h, durations)?;
        let (pre, post, dec) = self.decode(g, regulated);
        let head_input = match self.cfg.classifier_position {
            ClassifierPosition::BeforeDecoder => regulated,
            ClassifierPosition::AfterDecoder => dec,
        };
        let toneme_logits = (self.cfg.lambda_tm > 0.0)
            .then(|| self.toneme_head.forward(g, &self.store, head_input));
        let recon = (self.cfg.lambda_recons > 0.0)
            .then(|| self.recon_head.forward(g, &self.store, head_input));
        Ok(ForwardOutputs {
            mel_pre: pre,
            mel_post: post,
            durations: dur,
            toneme_logits,
            recon,
        })
    }

    /// Toneme logits for ground-truth durations (evaluation of the
    /// classifier head), `M x num_classes`.
    pub fn toneme_logits(&self, features: &Matrix, durations: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new(false, 0);
        let h = self.encode(&mut g, features)?;
        let regulated = length_regulate(&mut g, h, durations)?;
        let input = match self.cfg.classifier_position {
            ClassifierPosition::BeforeDecoder => regulated,
            ClassifierPosition::AfterDecoder => self.decode(&mut g, regulated).2,
        };
        let logits = self.toneme_head.forward(&mut g, &self.store, input);
        Ok(g.value(logits).to_matrix())
    }

    /// Eval-mode mel prediction for given durations.
    pub fn mel_for_durations(&self, features: &Matrix, durations: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new(false, 0);
        let h = self.encode(&mut g, features)?;
        let regulated = length_regulate(&mut g, h, durations)?;
        let (_, post, _) = self.decode(&mut g, regulated);
        if let Some(op) = g.non_finite() {
            return Err(Error::NonFinite(format!("model forward ({op})")));
        }
        Ok(g.value(post).to_matrix())
    }

    /// Output at input resolution with the length regulator bypassed
    /// (all durations one), used by refined alignment.
    pub fn bypass_mel(&self, features: &Matrix) -> Result<Matrix> {
        self.mel_for_durations(features, &vec![1; features.rows()])
    }

    /// Inference from silent features alone: predicted durations drive the
    /// length regulator.
    pub fn infer(&self, features: &Matrix) -> Result<Inference> {
        let mut g = Graph::new(false, 0);
        let h = self.encode(&mut g, features)?;
        let dv = self.predict_durations(&mut g, h);
        let raw_durations = g.value(dv).data.clone();
        let durations = round_durations(&raw_durations);
        let regulated = length_regulate(&mut g, h, &durations)?;
        let (_, post, _) = self.decode(&mut g, regulated);
        if let Some(op) = g.non_finite() {
            return Err(Error::NonFinite(format!("model inference ({op})")));
        }
        Ok(Inference {
            raw_durations,
            durations,
            mel: g.value(post).to_matrix(),
        })
    }

    /// Joint loss of one utterance:
    /// `MAE(post, Y) + MAE(pre, Y) + MSE(d_hat, d) + l_tm CE + l_rec MSE(x_hat, x)`.
    pub fn total_loss(&self, g: &mut Graph, out: &ForwardOutputs, t: &Targets<'_>) -> Result<(Var, LossBreakdown)> {
        let m = t.mel.rows();
        let pred_rows = g.value(out.mel_post).rows();
        if pred_rows != m {
            return Err(Error::Shape(format!("predicted {pred_rows} mel frames, target has {m}")));
        }
        let n = g.value(out.durations).rows();
        if t.durations.len() != n {
            return Err(Error::Shape(format!("{} target durations for {n} frames", t.durations.len())));
        }
        let y = Tensor::from(t.mel);
        let mae_post = g.mae(out.mel_post, &y);
        let mae_pre = g.mae(out.mel_pre, &y);
        let d = Tensor::matrix(n, 1, t.durations.iter().map(|&v| v as f64).collect());
        let mse_dur = g.mse(out.durations, &d);
        let mut total = g.add(mae_post, mae_pre);
        total = g.add(total, mse_dur);
        let mut b = LossBreakdown {
            mae_post: g.scalar(mae_post),
            mae_pre: g.scalar(mae_pre),
            mse_dur: g.scalar(mse_dur),
            ..Default::default()
        };
        if let Some(logits) = out.toneme_logits {
            if t.tonemes.len() != m {
                return Err(Error::Shape(format!("{} toneme labels for {m} frames", t.tonemes.len())));
            }
            if let Some(&bad) = t.tonemes.iter().find(|&&id| id >= self.cfg.num_classes) {
                return Err(invalid(format!("toneme id {bad} out of range ({} classes)", self.cfg.num_classes)));
            }
            let ce = g.cross_entropy(logits, t.tonemes);
            let ce = g.scale(ce, self.cfg.lambda_tm);
            b.ce_tm = g.scalar(ce);
            total = g.add(total, ce);
        }
        if let Some(recon) = out.recon {
            if t.vocal_features.rows() != m || t.vocal_features.cols() != self.cfg.input_dim {
                return Err(Error::Shape(format!(
                    "vocal features {}x{} for {m} frames",
                    t.vocal_features.rows(),
                    t.vocal_features.cols()
                )));
            }
            let r = g.mse(recon, &Tensor::from(t.vocal_features));
            let r = g.scale(r, self.cfg.lambda_recons);
            b.mse_recons = g.scalar(r);
            total = g.add(total, r);
        }
        b.total = g.scalar(total);
        Ok((total, b))
    }
}

/// Joint loss from plain matrices, without a model; every term is
/// evaluated exactly as in [`Ssrnet::total_loss`].
#[allow(clippy::too_many_arguments)]
pub fn loss_from_predictions(
    mel_post: &Matrix,
    mel_pre: &Matrix,
    mel_target: &Matrix,
    dur_pred: &[f64],
    dur_target: &[usize],
    toneme_logits: Option<(&Matrix, &[usize], f64)>,
    recon: Option<(&Matrix, &Matrix, f64)>,
) -> Result<LossBreakdown> {
    let m = mel_target.rows();
    if mel_post.rows() != m || mel_pre.rows() != m {
        return Err(Error::Shape("mel predictions and target differ in length".into()));
    }
    if dur_pred.len() != dur_target.len() {
        return Err(Error::Shape("duration prediction and target differ in length".into()));
    }
    let mut g = Graph::new(false, 0);
    let y = Tensor::from(mel_target);
    let post = g.constant(Tensor::from(mel_post));
    let pre = g.constant(Tensor::from(mel_pre));
    let dp = g.constant(Tensor::matrix(dur_pred.len(), 1, dur_pred.to_vec()));
    let dt = Tensor::matrix(dur_target.len(), 1, dur_target.iter().map(|&v| v as f64).collect());
    let mut b = LossBreakdown {
        mae_post: { let v = g.mae(post, &y); g.scalar(v) },
        mae_pre: { let v = g.mae(pre, &y); g.scalar(v) },
        mse_dur: { let v = g.mse(dp, &dt); g.scalar(v) },
        ..Default::default()
    };
    if let Some((logits, ids, w)) = toneme_logits {
        if logits.rows() != m || ids.len() != m {
            return Err(Error::Shape("toneme logits/labels differ from mel length".into()));
        }
        if w > 0.0 {
            let l = g.constant(Tensor::from(logits));
            let ce = g.cross_entropy(l, ids);
            b.ce_tm = w * g.scalar(ce);
        }
    }
    if let Some((pred, target, w)) = recon {
        if pred.rows() != m || target.rows() != m {
            return Err(Error::Shape("reconstruction differs from mel length".into()));
        }
        if w > 0.0 {
            let p = g.constant(Tensor::from(pred));
            let r = g.mse(p, &Tensor::from(target));
            b.mse_recons = w * g.scalar(r);
        }
    }
    b.total = b.mae_post + b.mae_pre + b.mse_dur + b.ce_tm + b.mse_recons;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn tiny() -> SsrnetConfig {
        SsrnetConfig {
            num_classes: 6,
            dropout_main: 0.0,
            dropout_postnet: 0.0,
            ..SsrnetConfig::reduced()
        }
    }

    #[test]
    fn regulation_examples() {
        let labels = ["a", "b", "c", "d"];
        let pick = |d: &[usize]| -> Vec<&str> { regulation_index(d).iter().map(|&i| labels[i]).collect() };
        assert_eq!(pick(&[1, 2, 1, 1]), ["a", "b", "b", "c", "d"]);
        assert_eq!(pick(&[1, 1, 1, 1]), labels);
        assert_eq!(pick(&[0, 3, 0, 2]), ["b", "b", "b", "d", "d"]);

        let mut g = Graph::new(false, 0);
        let h = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]));
        assert!(length_regulate(&mut g, h, &[0, 0]).is_err());
        assert!(length_regulate(&mut g, h, &[1]).is_err());
        let r = length_regulate(&mut g, h, &[2, 1]).unwrap();
        assert_eq!(g.value(r).data, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn duration_rounding() {
        assert_eq!(round_durations(&[1.4, -0.2, 0.5]), vec![1, 0, 1]);
        assert_eq!(round_durations(&[-1.0, -1.0, -1.0]), vec![1, 0, 0]);
        assert_eq!(round_durations(&[-3.0, -0.7, -1.0]), vec![0, 1, 0]);
        assert_eq!(round_durations(&[2.49, 2.5]), vec![2, 3]);
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let model = Ssrnet::new(tiny(), 3).unwrap();
        let x = random_matrix(1, FEATURE_DIM, 1);
        let mut g = Graph::new(false, 0);
        let h = model.encode(&mut g, &x).unwrap();
        assert_eq!((g.value(h).rows(), g.value(h).cols()), (1, 8));

        let x = random_matrix(5, FEATURE_DIM, 2);
        let run = || {
            let mut g = Graph::new(false, 0);
            let h = model.encode(&mut g, &x).unwrap();
            g.value(h).data.clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|v| v.is_finite()));

        let mut g = Graph::new(false, 0);
        assert!(model.encode(&mut g, &random_matrix(3, 30, 0)).is_err());
    }

    #[test]
    fn decoder_shapes_and_zero_postnet() {
        let mut model = Ssrnet::new(tiny(), 4).unwrap();
        let x = random_matrix(4, FEATURE_DIM, 5);
        let mut g = Graph::new(false, 0);
        let out = model.forward(&mut g, &x, &[1, 2, 0, 3]).unwrap();
        for v in [out.mel_pre, out.mel_post] {
            assert_eq!((g.value(v).rows(), g.value(v).cols()), (6, 80));
        }
        assert_eq!(g.value(out.toneme_logits.unwrap()).cols(), 6);
        assert_eq!(g.value(out.recon.unwrap()).cols(), FEATURE_DIM);

        model.zero_postnet();
        let mut g = Graph::new(false, 0);
        let out = model.forward(&mut g, &x, &[1, 2, 0, 3]).unwrap();
        assert_eq!(g.value(out.mel_pre).data, g.value(out.mel_post).data);
    }

    #[test]
    fn heads_are_linear_per_frame() {
        let model = Ssrnet::new(tiny(), 5).unwrap();
        let mut g = Graph::new(false, 0);
        let h = g.constant(Tensor::matrix(3, 8, [vec![0.3; 8], vec![0.3; 8], vec![0.3; 8]].concat()));
        let (logits, _) = model.joint_heads(&mut g, h);
        let t = g.value(logits);
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(t.row(1), t.row(2));
    }

    #[test]
    fn cross_entropy_vanishes_with_confident_logits() {
        let ids = [2usize, 0, 4];
        let mut last = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let mut data = vec![0.0; 3 * 5];
            for (r, &id) in ids.iter().enumerate() {
                data[r * 5 + id] = scale;
            }
            let mut g = Graph::new(false, 0);
            let l = g.constant(Tensor::matrix(3, 5, data));
            let ce = g.cross_entropy(l, &ids);
            let v = g.scalar(ce);
            // closed form: -ln(e^s / (e^s + 4))
            let expected = (4.0 + scale.exp()).ln() - scale;
            assert!((v - expected).abs() < 1e-12);
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn loss_examples() {
        let y = random_matrix(1, 80, 9);
        let plus_one = Matrix::from_vec(1, 80, y.data().iter().map(|v| v + 1.0).collect());
        let b = loss_from_predictions(&plus_one, &y, &y, &[2.0], &[2], None, None).unwrap();
        assert_eq!(b.total, 1.0);

        let zero = loss_from_predictions(&y, &y, &y, &[2.0], &[2], None, None).unwrap();
        assert_eq!(zero.total, 0.0);

        let d = loss_from_predictions(&y, &y, &y, &[2.0, 2.0, 1.0], &[2, 2, 1], None, None).unwrap();
        assert_eq!(d.mse_dur, 0.0);

        let logits = random_matrix(1, 5, 1);
        let rec = random_matrix(1, 4, 2);
        let off = loss_from_predictions(
            &y, &y, &y, &[1.0], &[2],
            Some((&logits, &[3], 0.0)),
            Some((&rec, &Matrix::zeros(1, 4), 0.0)),
        )
        .unwrap();
        assert_eq!((off.ce_tm, off.mse_recons), (0.0, 0.0));
        assert_eq!(off.total, off.mae_post + off.mae_pre + off.mse_dur);
    }

    #[test]
    fn model_loss_matches_matrix_loss() {
        let model = Ssrnet::new(tiny(), 6).unwrap();
        let x = random_matrix(3, FEATURE_DIM, 7);
        let d = [2usize, 0, 2];
        let mel = random_matrix(4, 80, 8);
        let voc = random_matrix(4, FEATURE_DIM, 9);
        let tm = [1usize, 1, 5, 0];
        let t = Targets { mel: &mel, durations: &d, tonemes: &tm, vocal_features: &voc };
        let mut g = Graph::new(false, 0);
        let out = model.forward(&mut g, &x, &d).unwrap();
        let (_, b) = model.total_loss(&mut g, &out, &t).unwrap();
        let m = |v: Var| g.value(v).to_matrix();
        let dur: Vec<f64> = g.value(out.durations).data.clone();
        let check = loss_from_predictions(
            &m(out.mel_post), &m(out.mel_pre), &mel, &dur, &d,
            Some((&m(out.toneme_logits.unwrap()), &tm, 0.5)),
            Some((&m(out.recon.unwrap()), &voc, 0.5)),
        )
        .unwrap();
        assert!((b.total - check.total).abs() < 1e-12);

        let bad = [1usize, 1, 9, 0];
        let t = Targets { tonemes: &bad, ..t };
        assert!(model.total_loss(&mut g, &out, &t).is_err());
    }

    #[test]
    fn heads_off_contribute_nothing() {
        let cfg = SsrnetConfig { lambda_tm: 0.0, lambda_recons: 0.0, ..tiny() };
        let model = Ssrnet::new(cfg, 1).unwrap();
        let x = random_matrix(2, FEATURE_DIM, 1);
        let mel = random_matrix(3, 80, 2);
        let voc = random_matrix(3, FEATURE_DIM, 3);
        let t = Targets { mel: &mel, durations: &[1, 2], tonemes: &[1, 2, 3], vocal_features: &voc };
        let mut g = Graph::new(false, 0);
        let out = model.forward(&mut g, &x, &[1, 2]).unwrap();
        assert!(out.toneme_logits.is_none() && out.recon.is_none());
        let (_, b) = model.total_loss(&mut g, &out, &t).unwrap();
        assert_eq!((b.ce_tm, b.mse_recons), (0.0, 0.0));
        assert_eq!(b.total, b.mae_post + b.mae_pre + b.mse_dur);
    }

    #[test]
    fn inference_length_matches_rounded_durations() {
        let model = Ssrnet::new(tiny(), 2).unwrap();
        let x = random_matrix(7, FEATURE_DIM, 4);
        let inf = model.infer(&x).unwrap();
        assert_eq!(inf.durations, round_durations(&inf.raw_durations));
        assert_eq!(inf.mel.rows(), inf.durations.iter().sum::<usize>());
        assert_eq!(model.infer(&x).unwrap(), inf);
        assert_eq!(model.bypass_mel(&x).unwrap().rows(), 7);
    }

    #[test]
    fn reduced_model_gradients() {
        for position in [ClassifierPosition::BeforeDecoder, ClassifierPosition::AfterDecoder] {
            let cfg = SsrnetConfig { classifier_position: position, input_dim: 6, mel_dim: 4, ..tiny() };
            let mut model = Ssrnet::new(cfg, 11).unwrap();
            let x = random_matrix(3, 6, 12);
            let mel = random_matrix(4, 4, 13);
            let voc = random_matrix(4, 6, 14);
            let d = [1usize, 2, 1];
            let tm = [0usize, 3, 3, 5];
            let mut store = model.params().clone();
            // key biases have identically zero gradient, so floor the denominator
            let rep = gradcheck::check_with_floor(&mut store, 1e-5, Some(6), 1e-4, |s, g| {
                model.params_mut().load_values_from(s).unwrap();
                let out = model.forward(g, &x, &d).unwrap();
                let t = Targets { mel: &mel, durations: &d, tonemes: &tm, vocal_features: &voc };
                model.total_loss(g, &out, &t).unwrap().0
            });
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(SsrnetConfig::default().validate().is_ok());
        assert!(SsrnetConfig { heads: 5, ..SsrnetConfig::default() }.validate().is_err());
        assert!(SsrnetConfig { lambda_tm: -1.0, ..SsrnetConfig::default() }.validate().is_err());
        assert!(SsrnetConfig { dropout_postnet: 1.0, ..SsrnetConfig::default() }.validate().is_err());
        assert_eq!("after_decoder".parse::<ClassifierPosition>().unwrap(), ClassifierPosition::AfterDecoder);
    }
}
