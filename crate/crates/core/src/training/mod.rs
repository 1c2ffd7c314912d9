//! Adaptation objective, optimizer, training loop, backbone pretraining and
//! finite-difference gradient verification.

mod gradcheck;
mod losses;
mod pretrain;
mod step;

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::GradientSet;
use crate::backbone::checkpoint::Checkpoint;
use crate::backbone::{BackboneConfig, BackboneParams, ImageTensor, JointEmbedding, TokenSequence};
use crate::category::{CaaHead, NegativeKind};
use crate::error::{invalid, Error, Result};
use crate::prompts::{encode_prompted_image, encode_prompted_text, init_prompts, PromptParams, MAX_PROMPTS};
use crate::retrieval::{evaluate_pairs, RetrievalReport};
use crate::tensor::{Mat, Scalar};

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GradCheckRow};
pub use losses::{loss_con, loss_con_ratio_form, loss_total};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainOutcome};
pub use step::{compute_gradients, evaluate_losses, LossValues, StepResult};

/// Which components of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub use_dual_prompt: bool,
    pub use_token_weighting: bool,
    pub use_category_loss: bool,
}

impl Toggles {
    pub const NONE: Self = Self::new(false, false, false);
    pub const DP: Self = Self::new(true, false, false);
    pub const DP_CA: Self = Self::new(true, false, true);
    pub const DP_TW: Self = Self::new(true, true, false);
    pub const FULL: Self = Self::new(true, true, true);
    pub const ARMS: [Self; 5] = [Self::NONE, Self::DP, Self::DP_CA, Self::DP_TW, Self::FULL];

    pub const fn new(dp: bool, tw: bool, ca: bool) -> Self {
        Self {
            use_dual_prompt: dp,
            use_token_weighting: tw,
            use_category_loss: ca,
        }
    }

    pub fn arm_name(&self) -> String {
        if !self.use_dual_prompt && !self.use_token_weighting && !self.use_category_loss {
            return "none".into();
        }
        let mut parts = Vec::new();
        if self.use_dual_prompt {
            parts.push("DP");
        }
        if self.use_category_loss {
            parts.push("CA");
        }
        if self.use_token_weighting {
            parts.push("TW");
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub alpha: f64,
    pub q: i64,
    pub k: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shots: usize,
    pub seed: u64,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.2,
            tau: 0.07,
            alpha: 0.5,
            q: 4,
            k: 8,
            lr: 0.002,
            warmup_lr: 1e-5,
            epochs: 50,
            batch_size: 32,
            shots: 16,
            seed: 0,
            toggles: Toggles::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        finite_nonneg("lambda1", self.lambda1)?;
        finite_nonneg("lambda2", self.lambda2)?;
        finite_nonneg("alpha", self.alpha)?;
        finite_nonneg("lr", self.lr)?;
        finite_nonneg("warmup_lr", self.warmup_lr)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.q < 0 {
            return Err(Error::Config(format!("Q must be non-negative, got {}", self.q)));
        }
        if self.k == 0 || self.k > MAX_PROMPTS {
            return Err(Error::Config(format!("k must be in 1..={MAX_PROMPTS}, got {}", self.k)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(())
    }
}

/// Epoch 0 runs at `warmup_lr`; afterwards the rate follows a cosine from
/// `lr` to 0 over the remaining epochs. `step_frac` is the position within
/// the epoch in [0, 1].
pub fn lr_schedule(epoch: usize, step_frac: f64, cfg: &TrainConfig) -> f64 {
    if epoch == 0 {
        return cfg.warmup_lr;
    }
    let span = cfg.epochs.saturating_sub(1).max(1) as f64;
    let t = (((epoch - 1) as f64 + step_frac.clamp(0.0, 1.0)) / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Everything the adaptation stage trains.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState<T: Scalar = f32> {
    pub prompts: Option<PromptParams<T>>,
    pub caa: Option<CaaHead<T>>,
}

impl<T: Scalar> AdaptState<T> {
    pub fn init(cfg: &TrainConfig, backbone: &BackboneConfig) -> Result<Self> {
        let prompts = if cfg.toggles.use_dual_prompt {
            Some(init_prompts(cfg.k, cfg.seed, backbone)?)
        } else {
            None
        };
        let caa = cfg
            .toggles
            .use_category_loss
            .then(|| CaaHead::init(backbone.joint_dim, cfg.seed.wrapping_add(1)));
        Ok(Self { prompts, caa })
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Mat<T>)> {
        let mut out = Vec::new();
        if let Some(p) = &self.prompts {
            out.extend(p.named_tensors());
        }
        if let Some(c) = &self.caa {
            out.extend(c.named_tensors());
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat<T>)> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.prompts {
            out.extend(p.named_tensors_mut());
        }
        if let Some(c) = &mut self.caa {
            out.extend(c.named_tensors_mut());
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AdaptState<U> {
        AdaptState {
            prompts: self.prompts.as_ref().map(PromptParams::cast),
            caa: self.caa.as_ref().map(CaaHead::cast),
        }
    }
}

impl AdaptState<f32> {
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        if let Some(p) = &self.prompts {
            p.write_to(ckpt);
        }
        if let Some(c) = &self.caa {
            c.write_to(ckpt);
        }
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let prompts = if ckpt.contains(crate::prompts::NAME_CONTEXT) {
            Some(PromptParams::read_from(ckpt)?)
        } else {
            None
        };
        let caa = if ckpt.contains(crate::category::NAME_W1) {
            Some(CaaHead::read_from(ckpt)?)
        } else {
            None
        };
        Ok(Self { prompts, caa })
    }
}

/// `p ← p − lr·g` for every trainable tensor. The gradient set must cover
/// exactly the trainable tensors with matching shapes and finite values.
pub fn sgd_step<T: Scalar>(state: &mut AdaptState<T>, grads: &GradientSet<T>, lr: f64) -> Result<()> {
    let names: Vec<&str> = state.named_tensors().iter().map(|(n, _)| *n).collect();
    if let Some(extra) = grads.names().find(|n| !names.contains(n)) {
        return Err(Error::Shape(format!("gradient for unknown tensor {extra}")));
    }
    for (name, p) in state.named_tensors() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
    }
    if let Some(bad) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {bad}")));
    }
    let lr = T::lit(lr);
    for (name, p) in state.named_tensors_mut() {
        p.sub_scaled(grads.get(name).expect("checked above"), lr);
    }
    Ok(())
}

/// One image-caption pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub caption: TokenSequence,
    pub image: ImageTensor,
}

/// A training pair with its typed negative captions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub pair: Pair,
    pub negatives: Vec<(TokenSequence, NegativeKind)>,
}

/// I2T and T2I reports over `pairs` with prompted encoders (plain when `prompts` is `None`).
pub fn evaluate<T: Scalar>(
    backbone: &BackboneParams<T>,
    prompts: Option<&PromptParams<T>>,
    pairs: &[Pair],
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let (images, texts) = encode_pairs(backbone, prompts, pairs)?;
    evaluate_pairs(&images, &texts, ks)
}

type Embedded<T> = Vec<(String, JointEmbedding<T>)>;

pub fn encode_pairs<T: Scalar>(
    backbone: &BackboneParams<T>,
    prompts: Option<&PromptParams<T>>,
    pairs: &[Pair],
) -> Result<(Embedded<T>, Embedded<T>)> {
    let encoded: Vec<(JointEmbedding<T>, JointEmbedding<T>)> = pairs
        .par_iter()
        .map(|p| {
            Ok((
                encode_prompted_image(prompts, &p.image, backbone)?,
                encode_prompted_text(prompts, &p.caption, backbone)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for (p, (i, t)) in pairs.iter().zip(encoded) {
        images.push((p.id.clone(), i));
        texts.push((p.id.clone(), t));
    }
    Ok((images, texts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_con: f64,
    pub loss_cate: f64,
    pub loss_total: f64,
    pub val_r1_i2t: f64,
    pub val_r1_t2i: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,lr,loss_con,loss_cate,loss_total,val_r1_i2t,val_r1_t2i";

pub fn write_metrics_rows<W: Write>(out: &mut W, history: &[EpochMetrics]) -> Result<()> {
    for m in history {
        writeln!(
            out,
            "{},{:.8e},{:.8},{:.8},{:.8},{:.6},{:.6}",
            m.epoch, m.lr, m.loss_con, m.loss_cate, m.loss_total, m.val_r1_i2t, m.val_r1_t2i
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: AdaptState<f32>,
    pub history: Vec<EpochMetrics>,
}

/// Adapts prompts (and the CAA head) on `train` with the backbone frozen.
/// Validation Recall@1 is recorded after every epoch. With nothing
/// trainable the loop is skipped and the history is empty.
pub fn train(
    cfg: &TrainConfig,
    backbone: &BackboneParams<f32>,
    train: &[TrainExample],
    val: &[Pair],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(invalid("adaptation requires a frozen backbone"));
    }
    let mut state = AdaptState::<f32>::init(cfg, &backbone.config)?;
    let mut history = Vec::new();
    if state.num_trainable() == 0 || cfg.epochs == 0 {
        return Ok(TrainOutcome { state, history });
    }
    if train.is_empty() {
        return Err(invalid("empty training split"));
    }
    let steps = train.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64)));
        let mut sums = [0.0f64; 3];
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train[i]).collect();
            let out = compute_gradients(backbone, &state, &batch, cfg, None)?;
            let v = out.losses.to_f64();
            if !(v.total.is_finite() && v.con.is_finite() && v.cate.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, step {s}: con={} cate={} total={}",
                    v.con, v.cate, v.total
                )));
            }
            sums[0] += v.con;
            sums[1] += v.cate;
            sums[2] += v.total;
            sgd_step(&mut state, &out.grads, lr_schedule(epoch, s as f64 / steps as f64, cfg))?;
        }
        let (i2t, t2i) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (a, b) = evaluate(backbone, state.prompts.as_ref(), val, &[1])?;
            (a.r_at(1), b.r_at(1))
        };
        let n = steps as f64;
        history.push(EpochMetrics {
            epoch,
            lr: lr_schedule(epoch, 0.0, cfg),
            loss_con: sums[0] / n,
            loss_cate: sums[1] / n,
            loss_total: sums[2] / n,
            val_r1_i2t: i2t,
            val_r1_t2i: t2i,
        });
    }
    Ok(TrainOutcome { state, history })
}
