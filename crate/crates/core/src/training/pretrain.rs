use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{GradientSet, Tape};
use crate::backbone::{BackboneConfig, BackboneParams, ImageVars, TextVars};
use crate::error::{invalid, Error, Result};
use crate::tensor::Mat;

use super::losses::con_with_grads;
use super::Pair;

/// Full-backbone contrastive pretraining: SGD with momentum and a cosine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.003,
            momentum: 0.9,
            tau: 0.07,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("pretraining batch_size must be at least 2".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("pretrain lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub backbone: BackboneParams<f32>,
    /// Mean contrastive loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn batch_gradients(
    params: &BackboneParams<f32>,
    batch: &[&Pair],
    tau: f64,
) -> Result<(f64, GradientSet<f32>)> {
    let tapes: Vec<_> = batch
        .par_iter()
        .map(|p| {
            let mut tape = Tape::new();
            let tv = TextVars::register(&mut tape, params, true);
            let iv = ImageVars::register(&mut tape, params, true);
            let img = iv.encode(&mut tape, &p.image, None)?;
            let txt = tv.encode(&mut tape, &p.caption, None, None)?;
            Ok((tape, img, txt))
        })
        .collect::<Result<_>>()?;
    let n = batch.len();
    let d = params.config.joint_dim;
    let mut images = Mat::zeros(n, d);
    let mut texts = Mat::zeros(n, d);
    for (i, (tape, img, txt)) in tapes.iter().enumerate() {
        images.row_mut(i).copy_from_slice(tape.value(*img).row(0));
        texts.row_mut(i).copy_from_slice(tape.value(*txt).row(0));
    }
    let con = con_with_grads(&images, &texts, tau, 1.0f32)?;
    let parts: Vec<GradientSet<f32>> = tapes
        .par_iter()
        .enumerate()
        .map(|(i, (tape, img, txt))| {
            tape.backward(&[
                (*img, Mat::row_vector(con.d_images.row(i).to_vec())),
                (*txt, Mat::row_vector(con.d_texts.row(i).to_vec())),
            ])
        })
        .collect();
    let mut grads = GradientSet::new();
    for p in &parts {
        grads.merge(p);
    }
    Ok((con.loss as f64, grads))
}

/// Trains every backbone weight on `base` with the contrastive loss, then
/// freezes the result. Zero epochs return the initialization, frozen.
pub fn pretrain_backbone(base: &[Pair], config: BackboneConfig, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if base.is_empty() {
        return Err(invalid("empty pretraining split"));
    }
    let mut params = BackboneParams::<f32>::init(config, cfg.seed)?;
    let mut velocity: BTreeMap<String, Mat<f32>> = BTreeMap::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let steps = base.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps).max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &base[i]).collect();
            let (loss, grads) = batch_gradients(&params, &batch, cfg.tau)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}, step {s}")));
            }
            if let Some(bad) = grads.first_non_finite() {
                return Err(Error::NonFinite(format!("pretraining gradient of {bad}")));
            }
            sum += loss;
            count += 1;
            let t = (epoch * steps + s) as f64 / total;
            let lr = (cfg.lr * 0.5 * (1.0 + (PI * t).cos())) as f32;
            let mom = cfg.momentum as f32;
            for (name, p) in params.named_tensors_mut() {
                let Some(g) = grads.get(&name) else { continue };
                let v = velocity.entry(name).or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
                for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = mom * *vi + gi;
                }
                p.sub_scaled(v, lr);
            }
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    params.freeze();
    Ok(PretrainOutcome {
        backbone: params,
        epoch_losses,
    })
}
