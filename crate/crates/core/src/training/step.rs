//! One adaptation step: per-sample tapes run in parallel, the batch-level
//! losses are evaluated with closed-form gradients, and those gradients are
//! pushed back through each tape. Reduction happens in batch order.

use rayon::prelude::*;

use crate::autograd::{GradientSet, Tape, Var};
use crate::backbone::{BackboneParams, ImageVars, TextVars};
use crate::category::{cate_sample, CaaVars, CateSample, NegativeKind};
use crate::error::{Error, Result};
use crate::prompts::{encode_prompted_image, PromptVars};
use crate::reweight::{caption_token_features, make_blank_image, weights_from_features, TokenWeights};
use crate::tensor::{Mat, Scalar};

use super::losses::con_with_grads;
use super::{AdaptState, TrainConfig, TrainExample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues<T: Scalar> {
    pub con: T,
    pub cate: T,
    pub total: T,
}

impl<T: Scalar> LossValues<T> {
    pub fn to_f64(&self) -> LossValues<f64> {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        LossValues {
            con: f(self.con),
            cate: f(self.cate),
            total: f(self.total),
        }
    }
}

pub struct StepResult<T: Scalar> {
    pub losses: LossValues<T>,
    pub grads: GradientSet<T>,
    /// Token weights used per sample (`None` when weighting is off).
    pub weights: Vec<Option<TokenWeights<T>>>,
}

struct SampleForward<'a, T: Scalar> {
    tape: Tape<'a, T>,
    image: Var,
    text: Var,
    /// Head outputs for [positive, negatives..].
    cate: Option<Var>,
    kinds: Vec<NegativeKind>,
    weights: Option<TokenWeights<T>>,
}

fn forward_sample<'a, T: Scalar>(
    backbone: &'a BackboneParams<T>,
    state: &'a AdaptState<T>,
    ex: &TrainExample,
    cfg: &TrainConfig,
    blank: Option<&[T]>,
    frozen: Option<&TokenWeights<T>>,
    trainable: bool,
) -> Result<SampleForward<'a, T>> {
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, backbone, false);
    let iv = ImageVars::register(&mut tape, backbone, false);
    let pv = state.prompts.as_ref().map(|p| PromptVars::register(&mut tape, p, trainable));
    let visual = pv.as_ref().map(|p| p.visual(&mut tape));
    let context = pv.as_ref().map(|p| p.context);

    let image = iv.encode(&mut tape, &ex.pair.image, visual)?;
    let weights = if cfg.toggles.use_token_weighting {
        Some(match frozen {
            Some(w) => w.clone(),
            None => {
                let feats = caption_token_features(backbone, state.prompts.as_ref(), &ex.pair.caption)?;
                let blank = blank.expect("blank embedding computed when weighting is on");
                weights_from_features(&feats, tape.value(image).row(0), blank)?
            }
        })
    } else {
        None
    };
    let text = tv.encode(
        &mut tape,
        &ex.pair.caption,
        context,
        weights.as_ref().map(|w| w.normalized.as_slice()),
    )?;

    let mut cate = None;
    let mut kinds = Vec::new();
    if let Some(head) = &state.caa {
        // The category loss scores the prompted, unweighted caption.
        let positive = if weights.is_some() {
            tv.encode(&mut tape, &ex.pair.caption, context, None)?
        } else {
            text
        };
        let mut rows = vec![positive];
        for (seq, kind) in ex.negatives.iter().take(cfg.q.max(0) as usize) {
            rows.push(tv.encode(&mut tape, seq, context, None)?);
            kinds.push(*kind);
        }
        let stacked = tape.concat_rows(&rows);
        let cv = CaaVars::register(&mut tape, head, trainable);
        cate = Some(cv.forward(&mut tape, stacked));
    }
    Ok(SampleForward {
        tape,
        image,
        text,
        cate,
        kinds,
        weights,
    })
}

fn run<T: Scalar>(
    backbone: &BackboneParams<T>,
    state: &AdaptState<T>,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    frozen: Option<&[Option<TokenWeights<T>>]>,
    with_grads: bool,
) -> Result<StepResult<T>> {
    if batch.is_empty() {
        return Err(crate::error::invalid("empty batch"));
    }
    if let Some(f) = frozen {
        if f.len() != batch.len() {
            return Err(Error::Shape(format!("{} frozen weight sets for {} samples", f.len(), batch.len())));
        }
    }
    let blank = if cfg.toggles.use_token_weighting && frozen.is_none() {
        let b = make_blank_image(&backbone.config);
        Some(encode_prompted_image(state.prompts.as_ref(), &b, backbone)?.0)
    } else {
        None
    };
    let forwards: Vec<SampleForward<'_, T>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let fw = frozen.and_then(|f| f[i].as_ref());
            forward_sample(backbone, state, ex, cfg, blank.as_deref(), fw, with_grads)
        })
        .collect::<Result<_>>()?;

    let n = batch.len();
    let width = backbone.config.joint_dim;
    let mut images = Mat::zeros(n, width);
    let mut texts = Mat::zeros(n, width);
    for (i, f) in forwards.iter().enumerate() {
        images.row_mut(i).copy_from_slice(f.tape.value(f.image).row(0));
        texts.row_mut(i).copy_from_slice(f.tape.value(f.text).row(0));
    }
    let nt = T::lit(n as f64);
    let l1 = T::lit(cfg.lambda1);
    let l2 = T::lit(cfg.lambda2);
    let con = con_with_grads(&images, &texts, cfg.tau, l1)?;
    let mut cate_loss = T::zero();
    let mut cate_grads = Vec::with_capacity(n);
    for (i, f) in forwards.iter().enumerate() {
        match f.cate {
            Some(v) => {
                let g = cate_sample(
                    &CateSample {
                        texts: f.tape.value(v),
                        kinds: &f.kinds,
                        image: images.row(i),
                    },
                    cfg.alpha,
                    cfg.tau,
                    l2 / nt,
                )?;
                cate_loss = cate_loss + g.loss;
                cate_grads.push(Some(g));
            }
            None => cate_grads.push(None),
        }
    }
    let cate = cate_loss / nt;
    let losses = LossValues {
        con: con.loss,
        cate,
        total: l1 * con.loss + l2 * cate,
    };

    let mut grads = GradientSet::new();
    if with_grads {
        let parts: Vec<GradientSet<T>> = forwards
            .par_iter()
            .zip(cate_grads.par_iter())
            .enumerate()
            .map(|(i, (f, cg))| {
                let mut d_image = Mat::row_vector(con.d_images.row(i).to_vec());
                let mut seeds = Vec::with_capacity(3);
                if let (Some(v), Some(g)) = (f.cate, cg) {
                    for (o, &x) in d_image.data_mut().iter_mut().zip(&g.d_image) {
                        *o = *o + x;
                    }
                    seeds.push((v, g.d_texts.clone()));
                }
                seeds.push((f.image, d_image));
                seeds.push((f.text, Mat::row_vector(con.d_texts.row(i).to_vec())));
                f.tape.backward(&seeds)
            })
            .collect();
        for p in &parts {
            grads.merge(p);
        }
    }
    Ok(StepResult {
        losses,
        grads,
        weights: forwards.into_iter().map(|f| f.weights).collect(),
    })
}

/// Losses and gradients of the trainable state for one batch. Token
/// weights are computed fresh unless `frozen` supplies them; either way
/// they are treated as constants.
pub fn compute_gradients<T: Scalar>(
    backbone: &BackboneParams<T>,
    state: &AdaptState<T>,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    frozen: Option<&[Option<TokenWeights<T>>]>,
) -> Result<StepResult<T>> {
    let out = run(backbone, state, batch, cfg, frozen, true)?;
    if let Some(bad) = out.grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {bad}")));
    }
    Ok(out)
}

/// Loss values only.
pub fn evaluate_losses<T: Scalar>(
    backbone: &BackboneParams<T>,
    state: &AdaptState<T>,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    frozen: Option<&[Option<TokenWeights<T>>]>,
) -> Result<LossValues<T>> {
    Ok(run(backbone, state, batch, cfg, frozen, false)?.losses)
}
