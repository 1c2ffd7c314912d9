//! Token re-weighting. Each caption word is weighted by how much its
//! similarity to the image changes when the image is swapped for a blank one:
//! `ΔS_j = S(t_j, I′_blank) − S(t_j, I′)`, `w_j = |ΔS_j| / Σ_k |ΔS_k|`.

use std::io::Write;

use crate::autograd::Tape;
use crate::backbone::{cosine, score, BackboneConfig, BackboneParams, ImageTensor, JointEmbedding, TextVars, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::prompts::{encode_prompted_image, PromptParams};
use crate::tensor::{Mat, Scalar};

/// Below this total the raw magnitudes carry no usable signal.
pub const FALLBACK_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenWeights<T: Scalar = f32> {
    pub raw: Vec<T>,
    pub normalized: Vec<T>,
    pub uniform_fallback: bool,
}

impl<T: Scalar> TokenWeights<T> {
    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn uniform(n: usize) -> Self {
        let w = T::one() / T::lit(n as f64);
        Self {
            raw: vec![T::zero(); n],
            normalized: vec![w; n],
            uniform_fallback: true,
        }
    }
}

/// All-zero image with the configured dimensions.
pub fn make_blank_image(cfg: &BackboneConfig) -> ImageTensor {
    ImageTensor::zeros(cfg.image_size, cfg.image_size, cfg.channels)
}

/// `score(token, blank) − score(token, img)` with the exp-cosine score.
pub fn delta_s<T: Scalar>(token: &[T], img: &[T], blank: &[T]) -> Result<T> {
    Ok(score(token, blank)? - score(token, img)?)
}

/// Normalizes magnitudes into a probability vector, falling back to uniform
/// when their total is below [`FALLBACK_THRESHOLD`].
pub fn normalize_weights<T: Scalar>(raw: Vec<T>) -> Result<TokenWeights<T>> {
    if raw.is_empty() {
        return Err(invalid("caption has no content tokens"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("token weight magnitudes".into()));
    }
    if raw.iter().any(|&v| v < T::zero()) {
        return Err(invalid("token weight magnitudes must be non-negative"));
    }
    let total: T = raw.iter().copied().sum();
    if total.to_f64().unwrap_or(0.0) < FALLBACK_THRESHOLD {
        let mut w = TokenWeights::uniform(raw.len());
        w.raw = raw;
        return Ok(w);
    }
    let normalized = raw.iter().map(|&v| v / total).collect();
    Ok(TokenWeights {
        raw,
        normalized,
        uniform_fallback: false,
    })
}

/// Weights from precomputed word features (one unit row per word) and the
/// prompted embeddings of the image and the blank image.
pub fn weights_from_features<T: Scalar>(features: &Mat<T>, img: &[T], blank: &[T]) -> Result<TokenWeights<T>> {
    let raw = (0..features.rows())
        .map(|r| delta_s(features.row(r), img, blank).map(|d| d.abs()))
        .collect::<Result<Vec<_>>>()?;
    normalize_weights(raw)
}

/// Final-layer features of the caption words, computed with the text prompt prefix.
pub fn caption_token_features<T: Scalar>(
    backbone: &BackboneParams<T>,
    prompts: Option<&PromptParams<T>>,
    seq: &TokenSequence,
) -> Result<Mat<T>> {
    if seq.num_words() == 0 {
        return Err(invalid("caption has no content tokens"));
    }
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, backbone, false);
    let prompt = prompts.map(|p| tape.constant_ref(&p.context));
    let (x, layout) = tv.embed(&mut tape, seq, prompt, None)?;
    let h = tv.hidden(&mut tape, x)?;
    let f = tv.token_features(&mut tape, h, layout.words);
    Ok(tape.value(f).clone())
}

/// Weights for `seq` against `image`, with both images passed through the
/// same visual prompts. The result is a constant: nothing differentiates
/// through it.
pub fn token_weights<T: Scalar>(
    backbone: &BackboneParams<T>,
    prompts: Option<&PromptParams<T>>,
    seq: &TokenSequence,
    image: &ImageTensor,
) -> Result<TokenWeights<T>> {
    let features = caption_token_features(backbone, prompts, seq)?;
    let img = encode_prompted_image(prompts, image, backbone)?;
    let blank = encode_prompted_image(prompts, &make_blank_image(&backbone.config), backbone)?;
    weights_from_features(&features, img.as_slice(), blank.as_slice())
}

/// T′_w: the caption re-encoded with every word embedding scaled by its
/// weight before positions are added. Context vectors stay unscaled.
pub fn encode_weighted_text<T: Scalar>(
    backbone: &BackboneParams<T>,
    prompts: Option<&PromptParams<T>>,
    seq: &TokenSequence,
    weights: &TokenWeights<T>,
) -> Result<JointEmbedding<T>> {
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, backbone, false);
    let prompt = prompts.map(|p| tape.constant_ref(&p.context));
    let out = tv.encode(&mut tape, seq, prompt, Some(&weights.normalized))?;
    Ok(JointEmbedding(tape.value(out).row(0).to_vec()))
}

/// Cosine between the prompted blank image and `img`; < 1 means the blank is
/// a distinct baseline for that image.
pub fn blank_cosine<T: Scalar>(blank: &JointEmbedding<T>, img: &JointEmbedding<T>) -> Result<T> {
    cosine(blank.as_slice(), img.as_slice())
}

pub const WEIGHTS_CSV_HEADER: &str = "caption_id,token,raw,normalized";

/// One CSV row per caption word.
pub fn write_weight_rows<W: Write, T: Scalar>(
    out: &mut W,
    caption_id: &str,
    words: &[&str],
    weights: &TokenWeights<T>,
) -> Result<()> {
    if words.len() != weights.len() {
        return Err(Error::Shape(format!("{} words for {} weights", words.len(), weights.len())));
    }
    for (j, w) in words.iter().enumerate() {
        writeln!(
            out,
            "{caption_id},{},{:.8},{:.8}",
            w.replace(',', ""),
            weights.raw[j].to_f64().unwrap_or(f64::NAN),
            weights.normalized[j].to_f64().unwrap_or(f64::NAN)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{embed_caption, encode_text, tokenize, EmbeddedSequence, Vocab};
    use crate::prompts::init_prompts;

    #[test]
    fn hand_examples() {
        let w = normalize_weights(vec![0.3f64, 0.1]).unwrap();
        assert!((w.normalized[0] - 0.75).abs() < 1e-12);
        assert!((w.normalized[1] - 0.25).abs() < 1e-12);
        let w = normalize_weights(vec![0.2f64, 0.2]).unwrap();
        assert_eq!(w.normalized, vec![0.5, 0.5]);
        let w = normalize_weights(vec![0.0f64; 3]).unwrap();
        assert!(w.uniform_fallback);
        assert_eq!(w.normalized, vec![1.0 / 3.0; 3]);
        assert!(normalize_weights(Vec::<f64>::new()).is_err());
    }

    #[test]
    fn delta_s_scalar_trace() {
        let d = delta_s(&[1.0f64, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - (1.0 - std::f64::consts::E)).abs() < 1e-12);
        assert!((d + 1.71828).abs() < 1e-5);
        assert_eq!(delta_s(&[0.6f64, 0.8], &[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let eq = delta_s(&[s, s], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(eq.abs() < 1e-15);
        let t = [0.3f64, -0.2, 0.9];
        let (a, b) = ([0.1f64, 0.5, -0.4], [-0.7f64, 0.2, 0.1]);
        assert_eq!(delta_s(&t, &a, &b).unwrap(), -delta_s(&t, &b, &a).unwrap());
    }

    #[test]
    fn blank_image_is_zero() {
        let b = make_blank_image(&BackboneConfig::default());
        assert_eq!((b.height(), b.width(), b.channels()), (32, 32, 3));
        assert!(b.pixels().iter().all(|&v| v == 0.0));
    }

    fn setup() -> (Vocab, BackboneParams<f64>, PromptParams<f64>) {
        let vocab = Vocab::from_words(["a", "red", "cat", "on", "grass"]);
        let bb = BackboneParams::<f64>::init(BackboneConfig::with_vocab(vocab.len()), 4).unwrap();
        let p = init_prompts(4, 2, &bb.config).unwrap();
        (vocab, bb, p)
    }

    #[test]
    fn weights_for_real_caption() {
        let (vocab, bb, p) = setup();
        let seq = tokenize("a red cat on grass", &vocab, 32);
        let mut img = ImageTensor::zeros(32, 32, 3);
        for y in 0..16 {
            for x in 0..16 {
                img.set(y, x, 0, 0.9);
            }
        }
        let w = token_weights(&bb, Some(&p), &seq, &img).unwrap();
        assert_eq!(w.len(), 5);
        let total: f64 = w.normalized.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(w.normalized.iter().all(|&v| v >= 0.0));
        // Blank against itself gives ΔS = 0 everywhere.
        let blank = make_blank_image(&bb.config);
        let w0 = token_weights(&bb, Some(&p), &seq, &blank).unwrap();
        assert!(w0.uniform_fallback);
        let empty = tokenize("", &vocab, 32);
        assert!(token_weights(&bb, Some(&p), &empty, &img).is_err());
    }

    #[test]
    fn single_token_weighting_is_identity() {
        let (vocab, bb, p) = setup();
        let seq = tokenize("cat", &vocab, 32);
        let w = normalize_weights(vec![0.37f64]).unwrap();
        let weighted = encode_weighted_text(&bb, Some(&p), &seq, &w).unwrap();
        let plain = crate::prompts::encode_prompted_text(Some(&p), &seq, &bb).unwrap();
        assert_eq!(weighted, plain);
    }

    #[test]
    fn uniform_weights_scale_literally() {
        // Straight-line oracle: scale the plain embedded rows by hand.
        let (vocab, bb, _) = setup();
        let seq = tokenize("a red cat", &vocab, 32);
        let w = TokenWeights::<f64>::uniform(3);
        let weighted = encode_weighted_text(&bb, None, &seq, &w).unwrap();
        let plain = embed_caption(&bb, &seq).unwrap();
        let mut values = plain.values.clone();
        for r in 1..4 {
            for c in 0..values.cols() {
                let tok = seq.content()[r] as usize;
                let v = bb.text.token_embedding.get(tok, c) / 3.0 + bb.text.positions.get(r, c);
                values.set(r, c, v);
            }
        }
        let oracle = encode_text(&bb, &EmbeddedSequence { values, ..plain.clone() }).unwrap();
        for (a, b) in weighted.0.iter().zip(&oracle.0) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(weighted, encode_text(&bb, &plain).unwrap());
    }

    #[test]
    fn weight_length_mismatch() {
        let (vocab, bb, p) = setup();
        let seq = tokenize("a red cat", &vocab, 32);
        let w = TokenWeights::<f64>::uniform(2);
        assert!(encode_weighted_text(&bb, Some(&p), &seq, &w).is_err());
    }

    #[test]
    fn csv_rows() {
        let w = normalize_weights(vec![0.3f64, 0.1]).unwrap();
        let mut buf = Vec::new();
        write_weight_rows(&mut buf, "x-001", &["red", "cat"], &w).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "x-001,red,0.30000000,0.75000000\nx-001,cat,0.10000000,0.25000000\n");
    }
}
