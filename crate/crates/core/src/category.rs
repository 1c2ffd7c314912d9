//! Category-aware augmentation: typed negative captions, the two-layer CAA
//! head, and the weighted category-sensitive loss.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::checkpoint::Checkpoint;
use crate::backbone::{gaussian, JointEmbedding};
use crate::dataset::{caption_from_attributes, CaptionRecord, Taxonomy, ATTRIBUTE_KEYS};
use crate::error::{invalid, Error, Result};
use crate::tensor::{cosine_with_grads, l2_norm, Mat, Scalar};

pub const NAME_W1: &str = "caa.W1";
pub const NAME_B1: &str = "caa.b1";
pub const NAME_W2: &str = "caa.W2";
pub const NAME_B2: &str = "caa.b2";
const INIT_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    CategorySwap,
    AttributeSwap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionKind {
    Positive,
    Negative(NegativeKind),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeCaption {
    pub source_id: String,
    pub kind: NegativeKind,
    pub text: String,
}

/// `q` negatives for `record`, alternating category swaps (first) and
/// attribute swaps. Siblings and attribute edits are drawn without
/// repetition until the alternatives run out.
pub fn gen_negatives(record: &CaptionRecord, taxonomy: &Taxonomy, q: i64, seed: u64) -> Result<Vec<NegativeCaption>> {
    if q < 0 {
        return Err(invalid(format!("Q must be non-negative, got {q}")));
    }
    if q == 0 {
        return Ok(Vec::new());
    }
    let mut siblings = taxonomy.siblings(&record.subcategory);
    if siblings.is_empty() {
        return Err(Error::Dataset(format!(
            "{} has no sibling subcategory to swap in",
            record.subcategory
        )));
    }
    taxonomy.check_attributes(&record.attributes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    siblings.shuffle(&mut rng);
    let mut edits: Vec<(&str, &String)> = ATTRIBUTE_KEYS
        .iter()
        .flat_map(|&k| {
            taxonomy.schema[k]
                .iter()
                .filter(move |v| **v != record.attributes[k])
                .map(move |v| (k, v))
        })
        .collect();
    // Pick the key first, then the value, so every key is equally likely.
    let mut edit_order = Vec::with_capacity(edits.len());
    while !edits.is_empty() {
        let key = *ATTRIBUTE_KEYS
            .iter()
            .filter(|k| edits.iter().any(|(ek, _)| ek == *k))
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .expect("non-empty");
        let options: Vec<usize> = (0..edits.len()).filter(|&i| edits[i].0 == *key).collect();
        let pick = *options.choose(&mut rng).expect("non-empty");
        edit_order.push(edits.remove(pick));
    }
    let mut out = Vec::with_capacity(q as usize);
    let (mut ci, mut ai) = (0, 0);
    for j in 0..q as usize {
        let (kind, text) = if j % 2 == 0 {
            let sib = siblings[ci % siblings.len()];
            ci += 1;
            (
                NegativeKind::CategorySwap,
                caption_from_attributes(sib, &record.meta_category, &record.attributes),
            )
        } else {
            let (key, value) = edit_order[ai % edit_order.len()];
            ai += 1;
            let mut attrs = record.attributes.clone();
            attrs.insert(key.to_string(), value.clone());
            (
                NegativeKind::AttributeSwap,
                caption_from_attributes(&record.subcategory, &record.meta_category, &attrs),
            )
        };
        out.push(NegativeCaption {
            source_id: record.id.clone(),
            kind,
            text,
        });
    }
    Ok(out)
}

pub fn negatives_to_jsonl(negs: &[NegativeCaption]) -> Result<String> {
    let mut s = String::new();
    for n in negs {
        s.push_str(&serde_json::to_string(n)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn negatives_from_jsonl(text: &str) -> Result<Vec<NegativeCaption>> {
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?)
}

/// Reads the cache at `path`, or generates negatives for `records` and writes it.
pub fn load_or_generate_negatives(
    path: &Path,
    records: &[CaptionRecord],
    taxonomy: &Taxonomy,
    q: i64,
    seed: u64,
) -> Result<Vec<NegativeCaption>> {
    let expected = generate_all(records, taxonomy, q, seed)?;
    if let Ok(text) = fs::read_to_string(path) {
        let cached = negatives_from_jsonl(&text)?;
        if cached == expected {
            return Ok(cached);
        }
    }
    fs::write(path, negatives_to_jsonl(&expected)?)?;
    Ok(expected)
}

/// Negatives for every record; record `i` uses seed `seed + i`.
pub fn generate_all(records: &[CaptionRecord], taxonomy: &Taxonomy, q: i64, seed: u64) -> Result<Vec<NegativeCaption>> {
    let mut all = Vec::new();
    for (i, r) in records.iter().enumerate() {
        all.extend(gen_negatives(r, taxonomy, q, seed.wrapping_add(i as u64))?);
    }
    Ok(all)
}

/// `normalize(W2·relu(W1·t + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaaHead<T: Scalar = f32> {
    pub w1: Mat<T>,
    pub b1: Mat<T>,
    pub w2: Mat<T>,
    pub b2: Mat<T>,
}

impl<T: Scalar> CaaHead<T> {
    /// Near-identity layers, zero biases.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w1 = gaussian(dim, dim, INIT_NOISE, &mut rng);
        let mut w2 = gaussian(dim, dim, INIT_NOISE, &mut rng);
        for i in 0..dim {
            w1.set(i, i, w1.get(i, i) + T::one());
            w2.set(i, i, w2.get(i, i) + T::one());
        }
        Self {
            w1,
            b1: Mat::zeros(1, dim),
            w2,
            b2: Mat::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn named_tensors(&self) -> [(&'static str, &Mat<T>); 4] {
        [(NAME_W1, &self.w1), (NAME_B1, &self.b1), (NAME_W2, &self.w2), (NAME_B2, &self.b2)]
    }

    pub fn named_tensors_mut(&mut self) -> [(&'static str, &mut Mat<T>); 4] {
        [
            (NAME_W1, &mut self.w1),
            (NAME_B1, &mut self.b1),
            (NAME_W2, &mut self.w2),
            (NAME_B2, &mut self.b2),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> CaaHead<U> {
        CaaHead {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

impl CaaHead<f32> {
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        for (name, m) in self.named_tensors() {
            ckpt.insert_mat(name, m);
        }
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            w1: ckpt.get_mat(NAME_W1)?,
            b1: ckpt.get_mat(NAME_B1)?,
            w2: ckpt.get_mat(NAME_W2)?,
            b2: ckpt.get_mat(NAME_B2)?,
        })
    }
}

pub fn caa_forward<T: Scalar>(head: &CaaHead<T>, t: &JointEmbedding<T>) -> Result<JointEmbedding<T>> {
    if t.0.len() != head.dim() {
        return Err(Error::Shape(format!("CAA head width {} for input {}", head.dim(), t.0.len())));
    }
    if t.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CAA input".into()));
    }
    let mut tape = Tape::new();
    let vars = CaaVars::register(&mut tape, head, false);
    let x = tape.constant(Mat::row_vector(t.0.clone()));
    let y = vars.forward(&mut tape, x);
    Ok(JointEmbedding(tape.value(y).row(0).to_vec()))
}

pub(crate) struct CaaVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl CaaVars {
    pub fn register<'a, T: Scalar>(tape: &mut Tape<'a, T>, head: &'a CaaHead<T>, trainable: bool) -> Self {
        Self {
            w1: tape.leaf(NAME_W1, &head.w1, trainable),
            b1: tape.leaf(NAME_B1, &head.b1, trainable),
            w2: tape.leaf(NAME_W2, &head.w2, trainable),
            b2: tape.leaf(NAME_B2, &head.b2, trainable),
        }
    }

    /// Row-wise head over `x` (n × dim).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = tape.matmul_nt(x, self.w1);
        let h = tape.add_row(h, self.b1);
        let h = tape.relu(h);
        let y = tape.matmul_nt(h, self.w2);
        let y = tape.add_row(y, self.b2);
        tape.normalize_rows(y)
    }
}

/// `1 + α` when the caption names the right category (the positive and
/// attribute swaps), `1` for category swaps.
pub fn category_weight(kind: CaptionKind, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    Ok(match kind {
        CaptionKind::Positive | CaptionKind::Negative(NegativeKind::AttributeSwap) => 1.0 + alpha,
        CaptionKind::Negative(NegativeKind::CategorySwap) => 1.0,
    })
}

/// One sample of the category loss: the head outputs for the positive
/// caption (row 0) and its negatives (rows 1..), and the image embedding.
pub struct CateSample<'s, T: Scalar> {
    pub texts: &'s Mat<T>,
    pub kinds: &'s [NegativeKind],
    pub image: &'s [T],
}

/// Per-sample loss and gradients with respect to the head outputs and the image.
pub struct CateGrad<T: Scalar> {
    pub loss: T,
    pub d_texts: Mat<T>,
    pub d_image: Vec<T>,
}

/// `−log(w⁺e^{l⁺} / (w⁺e^{l⁺} + Σ_j w_j e^{l_j}))` with `l = cos/τ`, for one sample.
/// `scale` multiplies the returned gradients (e.g. λ2/N).
pub fn cate_sample<T: Scalar>(s: &CateSample<'_, T>, alpha: f64, tau: f64, scale: T) -> Result<CateGrad<T>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    let n = s.texts.rows();
    if n != s.kinds.len() + 1 {
        return Err(Error::Shape(format!("{} head outputs for {} negatives", n, s.kinds.len())));
    }
    let dim = s.image.len();
    let mut d_texts = Mat::zeros(n, s.texts.cols());
    let mut d_image = vec![T::zero(); dim];
    if n == 1 {
        category_weight(CaptionKind::Positive, alpha)?;
        return Ok(CateGrad {
            loss: T::zero(),
            d_texts,
            d_image,
        });
    }
    if l2_norm(s.image) == T::zero() || (0..n).any(|r| l2_norm(s.texts.row(r)) == T::zero()) {
        return Err(invalid("zero-norm embedding in category loss"));
    }
    let inv_tau = T::lit(1.0 / tau);
    let mut logw = Vec::with_capacity(n);
    logw.push(T::lit(category_weight(CaptionKind::Positive, alpha)?.ln()));
    for &k in s.kinds {
        logw.push(T::lit(category_weight(CaptionKind::Negative(k), alpha)?.ln()));
    }
    let mut grads = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for r in 0..n {
        let (c, dt, di) = cosine_with_grads(s.texts.row(r), s.image);
        z.push(c * inv_tau + logw[r]);
        grads.push((dt, di));
    }
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let denom: T = z.iter().map(|&v| (v - m).exp()).sum();
    let loss = -(z[0] - m) + denom.ln();
    for r in 0..n {
        let p = (z[r] - m).exp() / denom;
        let g = (if r == 0 { p - T::one() } else { p }) * inv_tau * scale;
        let (dt, di) = &grads[r];
        for (o, &v) in d_texts.row_mut(r).iter_mut().zip(dt) {
            *o = v * g;
        }
        for (o, &v) in d_image.iter_mut().zip(di) {
            *o = *o + v * g;
        }
    }
    Ok(CateGrad { loss, d_texts, d_image })
}

/// Mean of the per-sample category loss over a batch. Each sample holds
/// the head outputs for its positive and negatives, their kinds, and the image.
pub fn loss_cate<T: Scalar>(samples: &[CateSample<'_, T>], alpha: f64, tau: f64) -> Result<T> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut total = T::zero();
    for s in samples {
        total = total + cate_sample(s, alpha, tau, T::one())?.loss;
    }
    Ok(total / T::lit(samples.len() as f64))
}
