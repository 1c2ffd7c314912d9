//! Forward passes of both towers, recorded on a [`Tape`] so that the same code
//! serves plain inference, prompt adaptation and pretraining.

use std::ops::Range;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{dot, l2_norm, Mat, Scalar};

use super::{BackboneParams, Block, ImageTensor, JointEmbedding, TextTower, TokenSequence, VisionTower};

pub(crate) struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BlockVars {
    fn register<'a, T: Scalar>(tape: &mut Tape<'a, T>, prefix: &str, b: &'a Block<T>, trainable: bool) -> Self {
        let mut leaf = |name: &str, m: &'a Mat<T>| tape.leaf(&format!("{prefix}.{name}"), m, trainable);
        Self {
            ln1_g: leaf("ln1_g", &b.ln1_g),
            ln1_b: leaf("ln1_b", &b.ln1_b),
            wq: leaf("wq", &b.wq),
            bq: leaf("bq", &b.bq),
            wk: leaf("wk", &b.wk),
            bk: leaf("bk", &b.bk),
            wv: leaf("wv", &b.wv),
            bv: leaf("bv", &b.bv),
            wo: leaf("wo", &b.wo),
            bo: leaf("bo", &b.bo),
            ln2_g: leaf("ln2_g", &b.ln2_g),
            ln2_b: leaf("ln2_b", &b.ln2_b),
            w1: leaf("w1", &b.w1),
            b1: leaf("b1", &b.b1),
            w2: leaf("w2", &b.w2),
            b2: leaf("b2", &b.b2),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, heads: usize) -> Var {
        let width = tape.value(x).cols();
        let head_dim = width / heads;
        let inv_sqrt = T::one() / T::from_usize(head_dim).unwrap().sqrt();

        let h = tape.layer_norm(x, self.ln1_g, self.ln1_b);
        let q = tape.matmul(h, self.wq);
        let q = tape.add_row(q, self.bq);
        let k = tape.matmul(h, self.wk);
        let k = tape.add_row(k, self.bk);
        let v = tape.matmul(h, self.wv);
        let v = tape.add_row(v, self.bv);
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = tape.slice_cols(q, i * head_dim, head_dim);
            let kh = tape.slice_cols(k, i * head_dim, head_dim);
            let vh = tape.slice_cols(v, i * head_dim, head_dim);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, inv_sqrt);
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh));
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let o = tape.matmul(o, self.wo);
        let o = tape.add_row(o, self.bo);
        let x = tape.add(x, o);

        let h = tape.layer_norm(x, self.ln2_g, self.ln2_b);
        let f = tape.matmul(h, self.w1);
        let f = tape.add_row(f, self.b1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, self.w2);
        let f = tape.add_row(f, self.b2);
        tape.add(x, f)
    }
}

/// Where the pieces of an assembled caption sequence sit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct TextLayout {
    pub prompt_len: usize,
    pub eos_index: usize,
    pub words: Range<usize>,
}

pub(crate) struct TextVars<'a, T: Scalar> {
    tower: &'a TextTower<T>,
    heads: usize,
    max_prompts: usize,
    token_embedding: Var,
    blocks: Vec<BlockVars>,
    ln_g: Var,
    ln_b: Var,
    projection: Var,
}

impl<'a, T: Scalar> TextVars<'a, T> {
    pub fn register(tape: &mut Tape<'a, T>, params: &'a BackboneParams<T>, trainable: bool) -> Self {
        let t = &params.text;
        let token_embedding = tape.leaf("text.token_embedding", &t.token_embedding, trainable);
        let blocks = t
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BlockVars::register(tape, &format!("text.block{i}"), b, trainable))
            .collect();
        Self {
            tower: t,
            heads: params.config.heads,
            max_prompts: params.config.max_prompts,
            token_embedding,
            blocks,
            ln_g: tape.leaf("text.ln_g", &t.ln_g, trainable),
            ln_b: tape.leaf("text.ln_b", &t.ln_b, trainable),
            projection: tape.leaf("text.projection", &t.projection, trainable),
        }
    }

    /// `[prompt rows, token embeddings (optionally scaled per word)] + positions`.
    /// Tokens keep positions `0..n` whatever the prompt length.
    /// `word_weights` scales only the caption words; BOS, EOS and prompts are untouched.
    pub fn embed(
        &self,
        tape: &mut Tape<'a, T>,
        seq: &TokenSequence,
        prompt: Option<Var>,
        word_weights: Option<&[T]>,
    ) -> Result<(Var, TextLayout)> {
        let ids: Vec<usize> = seq.content().iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.tower.token_embedding.rows()) {
            return Err(invalid(format!("token id {bad} outside the embedding table")));
        }
        let mut tokens = tape.gather(self.token_embedding, &ids);
        if let Some(w) = word_weights {
            if w.len() != seq.num_words() {
                return Err(Error::Shape(format!(
                    "{} token weights for {} caption words",
                    w.len(),
                    seq.num_words()
                )));
            }
            let mut factors = Vec::with_capacity(ids.len());
            factors.push(T::one());
            factors.extend_from_slice(w);
            factors.push(T::one());
            tokens = tape.scale_rows(tokens, factors);
        }
        let prompt_len = prompt.map_or(0, |p| tape.value(p).rows());
        let x = match prompt {
            Some(p) if prompt_len > 0 => tape.concat_rows(&[p, tokens]),
            _ => tokens,
        };
        let slots = self.tower.positions.rows() - self.max_prompts;
        let x = add_positions(tape, x, &self.tower.positions, 0, prompt_len, slots)?;
        Ok((
            x,
            TextLayout {
                prompt_len,
                eos_index: prompt_len + seq.eos_index(),
                words: prompt_len + 1..prompt_len + 1 + seq.num_words(),
            },
        ))
    }

    /// Final-layer representations (after the closing layer norm).
    pub fn hidden(&self, tape: &mut Tape<'a, T>, x: Var) -> Result<Var> {
        let len = tape.value(x).rows();
        if len > self.tower.positions.rows() {
            return Err(Error::SequenceTooLong {
                len,
                max: self.tower.positions.rows(),
            });
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, self.heads);
        }
        Ok(tape.layer_norm(h, self.ln_g, self.ln_b))
    }

    /// The EOS representation, projected and normalized (1×joint).
    pub fn pooled(&self, tape: &mut Tape<'a, T>, hidden: Var, eos_index: usize) -> Var {
        let row = tape.slice_rows(hidden, eos_index, 1);
        let proj = tape.matmul(row, self.projection);
        tape.normalize_rows(proj)
    }

    /// Projected, normalized representations of the caption word positions.
    pub fn token_features(&self, tape: &mut Tape<'a, T>, hidden: Var, words: Range<usize>) -> Var {
        let rows = tape.slice_rows(hidden, words.start, words.len());
        let proj = tape.matmul(rows, self.projection);
        tape.normalize_rows(proj)
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'a, T>,
        seq: &TokenSequence,
        prompt: Option<Var>,
        word_weights: Option<&[T]>,
    ) -> Result<Var> {
        let (x, layout) = self.embed(tape, seq, prompt, word_weights)?;
        let h = self.hidden(tape, x)?;
        Ok(self.pooled(tape, h, layout.eos_index))
    }
}

pub(crate) struct ImageVars<'a, T: Scalar> {
    tower: &'a VisionTower<T>,
    heads: usize,
    patch: usize,
    patch_weight: Var,
    patch_bias: Var,
    cls: Var,
    blocks: Vec<BlockVars>,
    ln_g: Var,
    ln_b: Var,
    projection: Var,
    config: &'a super::BackboneConfig,
}

impl<'a, T: Scalar> ImageVars<'a, T> {
    pub fn register(tape: &mut Tape<'a, T>, params: &'a BackboneParams<T>, trainable: bool) -> Self {
        let v = &params.vision;
        let blocks = v
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BlockVars::register(tape, &format!("vision.block{i}"), b, trainable))
            .collect();
        Self {
            tower: v,
            heads: params.config.heads,
            patch: params.config.patch_size,
            patch_weight: tape.leaf("vision.patch_weight", &v.patch_weight, trainable),
            patch_bias: tape.leaf("vision.patch_bias", &v.patch_bias, trainable),
            cls: tape.leaf("vision.cls", &v.cls, trainable),
            blocks,
            ln_g: tape.leaf("vision.ln_g", &v.ln_g, trainable),
            ln_b: tape.leaf("vision.ln_b", &v.ln_b, trainable),
            projection: tape.leaf("vision.projection", &v.projection, trainable),
            config: &params.config,
        }
    }

    /// `[CLS, prompts.., patch embeddings] + positions`.
    pub fn embed(&self, tape: &mut Tape<'a, T>, image: &ImageTensor, prompts: Option<Var>) -> Result<Var> {
        image.check_dims(self.config)?;
        let patches = tape.constant(image.patchify(self.patch));
        let e = tape.matmul(patches, self.patch_weight);
        let e = tape.add_row(e, self.patch_bias);
        let k = prompts.map_or(0, |p| tape.value(p).rows());
        let x = match prompts {
            Some(p) if k > 0 => tape.concat_rows(&[self.cls, p, e]),
            _ => tape.concat_rows(&[self.cls, e]),
        };
        let slots = self.tower.positions.rows() - self.config.max_prompts;
        add_positions(tape, x, &self.tower.positions, 1, k, slots)
    }

    pub fn encode_embedded(&self, tape: &mut Tape<'a, T>, x: Var) -> Result<Var> {
        let len = tape.value(x).rows();
        if len > self.tower.positions.rows() {
            return Err(Error::SequenceTooLong {
                len,
                max: self.tower.positions.rows(),
            });
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, self.heads);
        }
        let h = tape.layer_norm(h, self.ln_g, self.ln_b);
        let cls = tape.slice_rows(h, 0, 1);
        let proj = tape.matmul(cls, self.projection);
        Ok(tape.normalize_rows(proj))
    }

    pub fn encode(&self, tape: &mut Tape<'a, T>, image: &ImageTensor, prompts: Option<Var>) -> Result<Var> {
        let x = self.embed(tape, image, prompts)?;
        self.encode_embedded(tape, x)
    }
}

/// Adds positional encodings to rows laid out as `[lead.., prompts.., content..]`.
/// Lead and content rows keep the positions they would have without prompts;
/// prompts take the slots from `content_slots` on, so inserting them never
/// moves what the encoder saw during pretraining.
fn add_positions<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    table: &Mat<T>,
    lead: usize,
    prompts: usize,
    content_slots: usize,
) -> Result<Var> {
    let len = tape.value(x).rows();
    let content = len - lead - prompts;
    if lead + content > content_slots || content_slots + prompts > table.rows() {
        return Err(Error::SequenceTooLong {
            len,
            max: table.rows(),
        });
    }
    let order = (0..lead)
        .chain(content_slots..content_slots + prompts)
        .chain(lead..lead + content);
    let cols = table.cols();
    let mut data = Vec::with_capacity(len * cols);
    for r in order {
        data.extend_from_slice(table.row(r));
    }
    let pe = tape.constant(Mat::from_vec(len, cols, data)?);
    Ok(tape.add(x, pe))
}

/// An input sequence after embedding and positional encoding, ready for a tower.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSequence<T: Scalar = f32> {
    pub values: Mat<T>,
    /// Number of prompt vectors in the sequence.
    pub prompt_len: usize,
    /// Row whose final representation is pooled (EOS for text, CLS for images).
    pub pool_index: usize,
    /// Caption word rows (text) or patch rows (images).
    pub content: Range<usize>,
}

impl<T: Scalar> EmbeddedSequence<T> {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

pub(crate) fn text_sequence_from_tape<T: Scalar>(
    tape: &Tape<'_, T>,
    x: Var,
    layout: &TextLayout,
) -> EmbeddedSequence<T> {
    EmbeddedSequence {
        values: tape.value(x).clone(),
        prompt_len: layout.prompt_len,
        pool_index: layout.eos_index,
        content: layout.words.clone(),
    }
}

/// Embeds a caption with no prompt prefix.
pub fn embed_caption<T: Scalar>(params: &BackboneParams<T>, seq: &TokenSequence) -> Result<EmbeddedSequence<T>> {
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, params, false);
    let (x, layout) = tv.embed(&mut tape, seq, None, None)?;
    Ok(text_sequence_from_tape(&tape, x, &layout))
}

/// Runs the text tower and returns the projected, normalized EOS representation.
pub fn encode_text<T: Scalar>(params: &BackboneParams<T>, seq: &EmbeddedSequence<T>) -> Result<JointEmbedding<T>> {
    check_finite(&seq.values, "text sequence")?;
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, params, false);
    let x = tape.constant_ref(&seq.values);
    let h = tv.hidden(&mut tape, x)?;
    let out = tv.pooled(&mut tape, h, seq.pool_index);
    Ok(JointEmbedding(tape.value(out).row(0).to_vec()))
}

/// Projected, normalized final-layer features of every caption word
/// (prompt, BOS, EOS and PAD positions excluded).
pub fn token_features<T: Scalar>(
    params: &BackboneParams<T>,
    seq: &EmbeddedSequence<T>,
) -> Result<Vec<JointEmbedding<T>>> {
    check_finite(&seq.values, "text sequence")?;
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, params, false);
    let x = tape.constant_ref(&seq.values);
    let h = tv.hidden(&mut tape, x)?;
    let f = tv.token_features(&mut tape, h, seq.content.clone());
    let m = tape.value(f);
    Ok((0..m.rows()).map(|r| JointEmbedding(m.row(r).to_vec())).collect())
}

/// `[CLS, prompts.., patches] + positions` for an image.
pub fn assemble_sequence_image<T: Scalar>(
    params: &BackboneParams<T>,
    image: &ImageTensor,
    visual_prompts: Option<&Mat<T>>,
) -> Result<EmbeddedSequence<T>> {
    if let Some(p) = visual_prompts {
        if p.cols() != params.config.vision_width {
            return Err(Error::Shape(format!(
                "visual prompts have width {}, encoder width is {}",
                p.cols(),
                params.config.vision_width
            )));
        }
    }
    let mut tape = Tape::new();
    let iv = ImageVars::register(&mut tape, params, false);
    let prompts = visual_prompts.map(|p| tape.constant_ref(p));
    let x = iv.embed(&mut tape, image, prompts)?;
    let k = visual_prompts.map_or(0, Mat::rows);
    let values = tape.value(x).clone();
    let n = values.rows();
    Ok(EmbeddedSequence {
        values,
        prompt_len: k,
        pool_index: 0,
        content: 1 + k..n,
    })
}

pub fn encode_embedded_image<T: Scalar>(
    params: &BackboneParams<T>,
    seq: &EmbeddedSequence<T>,
) -> Result<JointEmbedding<T>> {
    let mut tape = Tape::new();
    let iv = ImageVars::register(&mut tape, params, false);
    let x = tape.constant_ref(&seq.values);
    let out = iv.encode_embedded(&mut tape, x)?;
    Ok(JointEmbedding(tape.value(out).row(0).to_vec()))
}

/// Encodes an image, optionally with visual prompts between CLS and the patches.
pub fn encode_image<T: Scalar>(
    params: &BackboneParams<T>,
    image: &ImageTensor,
    visual_prompts: Option<&Mat<T>>,
) -> Result<JointEmbedding<T>> {
    let seq = assemble_sequence_image(params, image, visual_prompts)?;
    encode_embedded_image(params, &seq)
}

/// `exp(cos(a, b))`, with explicit norm division.
pub fn score<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    Ok(cosine(a, b)?.exp())
}

pub(crate) fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite("score input".into()));
    }
    if na == T::zero() || nb == T::zero() {
        return Err(invalid("zero-norm vector has no direction"));
    }
    Ok(dot(a, b) / (na * nb))
}

fn check_finite<T: Scalar>(m: &Mat<T>, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{tokenize, BackboneConfig, Vocab};
    use super::*;

    fn small() -> (BackboneParams<f64>, Vocab) {
        let vocab = Vocab::from_words(["a", "red", "cat", "on", "mat"]);
        let cfg = BackboneConfig::with_vocab(vocab.len());
        (BackboneParams::init(cfg, 3).unwrap(), vocab)
    }

    #[test]
    fn text_embedding_is_unit_and_deterministic() {
        let (p, v) = small();
        let seq = embed_caption(&p, &tokenize("a red cat", &v, 32)).unwrap();
        let a = encode_text(&p, &seq).unwrap();
        let b = encode_text(&p, &seq).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-5);
        assert_eq!(a.0.len(), 32);
    }

    #[test]
    fn token_feature_count_matches_words() {
        let (p, v) = small();
        let seq = embed_caption(&p, &tokenize("a red cat on a mat", &v, 32)).unwrap();
        let f = token_features(&p, &seq).unwrap();
        assert_eq!(f.len(), 6);
        for t in &f {
            assert!((t.norm() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn overlong_sequence_rejected() {
        let (p, _) = small();
        let values = Mat::zeros(p.config.text_positions() + 1, p.config.text_width);
        let seq = EmbeddedSequence {
            values,
            prompt_len: 0,
            pool_index: 0,
            content: 1..2,
        };
        assert!(matches!(encode_text(&p, &seq), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn image_prompts_change_embedding() {
        let (p, _) = small();
        let img = ImageTensor::zeros(32, 32, 3);
        let plain = encode_image(&p, &img, None).unwrap();
        assert!((plain.norm() - 1.0).abs() < 1e-5);
        let prompts = Mat::from_fn(2, 48, |r, c| ((r * 48 + c) as f64 * 0.37).sin());
        let prompted = encode_image(&p, &img, Some(&prompts)).unwrap();
        assert_ne!(plain, prompted);
        let seq = assemble_sequence_image(&p, &img, Some(&prompts)).unwrap();
        assert_eq!(seq.len(), 1 + 2 + 64);
    }

    #[test]
    fn prompts_do_not_shift_content_positions() {
        // Table row r is filled with r, so each output row names its slot.
        let table = Mat::from_fn(10, 2, |r, _| r as f64);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::zeros(6, 2));
        let y = add_positions(&mut tape, x, &table, 1, 2, 7).unwrap();
        let slots: Vec<f64> = (0..6).map(|r| tape.value(y).row(r)[0]).collect();
        assert_eq!(slots, vec![0.0, 7.0, 8.0, 1.0, 2.0, 3.0]);
        let x = tape.constant(Mat::zeros(5, 2));
        assert!(add_positions(&mut tape, x, &table, 1, 4, 7).is_err());
    }

    #[test]
    fn image_dims_checked() {
        let (p, _) = small();
        assert!(encode_image(&p, &ImageTensor::zeros(16, 16, 3), None).is_err());
    }

    #[test]
    fn score_values() {
        let e = std::f64::consts::E;
        assert!((score(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - e).abs() < 1e-12);
        assert!((score::<f64>(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        let s = 0.5f64.sqrt();
        assert!((score(&[1.0, 0.0], &[s, s]).unwrap() - 2.02812).abs() < 1e-5);
        // Unnormalized inputs are accepted.
        assert!((score::<f64>(&[3.0, 0.0], &[2.0, 2.0]).unwrap() - 2.02812).abs() < 1e-5);
        assert!(score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
