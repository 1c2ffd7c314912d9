use crate::backbone::JointEmbedding;
use crate::error::{invalid, Error, Result};
use crate::tensor::{cosine_with_grads, l2_norm, Mat, Scalar};

pub(crate) struct ConGrad<T: Scalar> {
    pub loss: T,
    pub d_images: Mat<T>,
    pub d_texts: Mat<T>,
}

fn check_batch<T: Scalar>(images: &Mat<T>, texts: &Mat<T>, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    if images.rows() == 0 {
        return Err(invalid("empty batch"));
    }
    if images.shape() != texts.shape() {
        return Err(Error::Shape(format!(
            "{:?} image embeddings vs {:?} text embeddings",
            images.shape(),
            texts.shape()
        )));
    }
    for m in [images, texts] {
        if !m.is_finite() {
            return Err(Error::NonFinite("embeddings".into()));
        }
        if (0..m.rows()).any(|r| l2_norm(m.row(r)) == T::zero()) {
            return Err(invalid("zero-norm embedding"));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE with `logit_ij = cos(I_i, T_j)/τ`:
/// `−(1/N) Σ_i [log softmax_row(i)_i + log softmax_col(i)_i]`.
/// Gradients are multiplied by `scale`.
pub(crate) fn con_with_grads<T: Scalar>(images: &Mat<T>, texts: &Mat<T>, tau: f64, scale: T) -> Result<ConGrad<T>> {
    check_batch(images, texts, tau)?;
    let n = images.rows();
    let inv_tau = T::lit(1.0 / tau);
    let mut cos = Mat::zeros(n, n);
    let mut parts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (c, di, dt) = cosine_with_grads(images.row(i), texts.row(j));
            cos.set(i, j, c * inv_tau);
            parts.push((di, dt));
        }
    }
    let row_p = softmax_lines(&cos, false);
    let col_p = softmax_lines(&cos, true);
    let mut loss = T::zero();
    for i in 0..n {
        loss = loss - log_softmax_at(&cos, i, false) - log_softmax_at(&cos, i, true);
    }
    let nn = T::lit(n as f64);
    loss = loss / nn;
    let mut d_images = Mat::zeros(n, images.cols());
    let mut d_texts = Mat::zeros(n, texts.cols());
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { T::one() } else { T::zero() };
            let g = (row_p.get(i, j) - delta + col_p.get(i, j) - delta) / nn * inv_tau * scale;
            let (di, dt) = &parts[i * n + j];
            for (o, &v) in d_images.row_mut(i).iter_mut().zip(di) {
                *o = *o + v * g;
            }
            for (o, &v) in d_texts.row_mut(j).iter_mut().zip(dt) {
                *o = *o + v * g;
            }
        }
    }
    Ok(ConGrad {
        loss,
        d_images,
        d_texts,
    })
}

/// Row softmax, or column softmax when `by_col`.
fn softmax_lines<T: Scalar>(l: &Mat<T>, by_col: bool) -> Mat<T> {
    let n = l.rows();
    let at = |a: usize, b: usize| if by_col { l.get(b, a) } else { l.get(a, b) };
    let mut out = Mat::zeros(n, n);
    for a in 0..n {
        let m = (0..n).map(|b| at(a, b)).fold(T::neg_infinity(), T::max);
        let z: T = (0..n).map(|b| (at(a, b) - m).exp()).sum();
        for b in 0..n {
            let p = (at(a, b) - m).exp() / z;
            if by_col {
                out.set(b, a, p);
            } else {
                out.set(a, b, p);
            }
        }
    }
    out
}

fn log_softmax_at<T: Scalar>(l: &Mat<T>, i: usize, by_col: bool) -> T {
    let n = l.rows();
    let at = |b: usize| if by_col { l.get(b, i) } else { l.get(i, b) };
    let m = (0..n).map(at).fold(T::neg_infinity(), T::max);
    let z: T = (0..n).map(|b| (at(b) - m).exp()).sum();
    at(i) - m - z.ln()
}

fn stack<T: Scalar>(embs: &[JointEmbedding<T>]) -> Result<Mat<T>> {
    let d = embs.first().map_or(0, |e| e.0.len());
    if embs.iter().any(|e| e.0.len() != d) {
        return Err(Error::Shape("embeddings of different widths".into()));
    }
    Mat::from_vec(embs.len(), d, embs.iter().flat_map(|e| e.0.iter().copied()).collect())
}

/// Contrastive loss over paired image and (weighted) text embeddings.
pub fn loss_con<T: Scalar>(images: &[JointEmbedding<T>], texts: &[JointEmbedding<T>], tau: f64) -> Result<T> {
    if images.len() != texts.len() {
        return Err(Error::Shape(format!("{} images vs {} texts", images.len(), texts.len())));
    }
    if images.is_empty() {
        return Err(invalid("empty batch"));
    }
    Ok(con_with_grads(&stack(images)?, &stack(texts)?, tau, T::zero())?.loss)
}

pub fn loss_total(lcon: f64, lcate: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * lcon + lambda2 * lcate
}

/// Contrastive loss written with `S/τ` inside the ratio, `S = exp(cos)`.
/// `τ` cancels, so the value does not depend on it; kept as a reference
/// for why the implementation puts `τ` inside the exponent instead.
pub fn loss_con_ratio_form(images: &[JointEmbedding<f64>], texts: &[JointEmbedding<f64>], tau: f64) -> Result<f64> {
    let (im, tx) = (stack(images)?, stack(texts)?);
    check_batch(&im, &tx, tau)?;
    let n = im.rows();
    let s = Mat::from_fn(n, n, |i, j| {
        crate::backbone::score(im.row(i), tx.row(j)).unwrap_or(f64::NAN) / tau
    });
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s.get(i, j)).sum();
        let col: f64 = (0..n).map(|j| s.get(j, i)).sum();
        total -= (s.get(i, i) / row).ln() + (s.get(i, i) / col).ln();
    }
    Ok(total / n as f64)
}
