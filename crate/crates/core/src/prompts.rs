//! Trainable prompt state: text context vectors and the affine map that
//! derives the visual prompts from them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::checkpoint::Checkpoint;
use crate::backbone::{
    assemble_sequence_image, encode_image, encode_text, gaussian, text_sequence_from_tape, BackboneConfig,
    BackboneParams, EmbeddedSequence, ImageTensor, JointEmbedding, TextVars, TokenSequence,
};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Mat, Scalar};

pub const MAX_PROMPTS: usize = 16;
const INIT_STD: f64 = 0.02;

pub const NAME_CONTEXT: &str = "prompt.V";
pub const NAME_F_WEIGHT: &str = "prompt.F_weight";
pub const NAME_F_BIAS: &str = "prompt.F_bias";

#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams<T: Scalar = f32> {
    /// k × text_width context vectors.
    pub context: Mat<T>,
    /// vision_width × text_width
    pub f_weight: Mat<T>,
    /// 1 × vision_width
    pub f_bias: Mat<T>,
}

impl<T: Scalar> PromptParams<T> {
    pub fn k(&self) -> usize {
        self.context.rows()
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.k() == 0 {
            return Err(invalid("prompt length k must be at least 1"));
        }
        if self.context.cols() != cfg.text_width
            || self.f_weight.shape() != (cfg.vision_width, cfg.text_width)
            || self.f_bias.shape() != (1, cfg.vision_width)
        {
            return Err(Error::Shape("prompt parameters do not match backbone widths".into()));
        }
        if !(self.context.is_finite() && self.f_weight.is_finite() && self.f_bias.is_finite()) {
            return Err(Error::NonFinite("prompt parameters".into()));
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> [(&'static str, &Mat<T>); 3] {
        [
            (NAME_CONTEXT, &self.context),
            (NAME_F_WEIGHT, &self.f_weight),
            (NAME_F_BIAS, &self.f_bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> [(&'static str, &mut Mat<T>); 3] {
        [
            (NAME_CONTEXT, &mut self.context),
            (NAME_F_WEIGHT, &mut self.f_weight),
            (NAME_F_BIAS, &mut self.f_bias),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> PromptParams<U> {
        PromptParams {
            context: self.context.cast(),
            f_weight: self.f_weight.cast(),
            f_bias: self.f_bias.cast(),
        }
    }
}

/// Context vectors and projection weights ~ N(0, 0.02²); projection bias zero.
pub fn init_prompts<T: Scalar>(k: usize, seed: u64, cfg: &BackboneConfig) -> Result<PromptParams<T>> {
    if k == 0 || k > MAX_PROMPTS.min(cfg.max_prompts) {
        return Err(invalid(format!(
            "prompt length k={k} outside 1..={}",
            MAX_PROMPTS.min(cfg.max_prompts)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PromptParams {
        context: gaussian(k, cfg.text_width, INIT_STD, &mut rng),
        f_weight: gaussian(cfg.vision_width, cfg.text_width, INIT_STD, &mut rng),
        f_bias: Mat::zeros(1, cfg.vision_width),
    })
}

/// `e_i = F_weight · v_i + F_bias` for every context vector (k × vision_width).
pub fn project_visual<T: Scalar>(p: &PromptParams<T>) -> Mat<T> {
    let mut tape = Tape::new();
    let vars = PromptVars::register(&mut tape, p, false);
    let e = vars.visual(&mut tape);
    tape.value(e).clone()
}

/// `[v_1..v_k, caption tokens] + positions`; `None` gives the plain caption.
pub fn assemble_text_prompt<T: Scalar>(
    p: Option<&PromptParams<T>>,
    seq: &TokenSequence,
    backbone: &BackboneParams<T>,
) -> Result<EmbeddedSequence<T>> {
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, backbone, false);
    let prompt = p.map(|p| tape.constant_ref(&p.context));
    let (x, layout) = tv.embed(&mut tape, seq, prompt, None)?;
    Ok(text_sequence_from_tape(&tape, x, &layout))
}

/// `[CLS, e_1..e_k, patches] + positions` with `e = F(V)`; `None` gives the plain image.
pub fn assemble_image_prompt<T: Scalar>(
    p: Option<&PromptParams<T>>,
    image: &ImageTensor,
    backbone: &BackboneParams<T>,
) -> Result<EmbeddedSequence<T>> {
    let visual = p.map(project_visual);
    assemble_sequence_image(backbone, image, visual.as_ref())
}

/// T′: the caption encoded with the text prompt prefix (plain caption for `None`).
pub fn encode_prompted_text<T: Scalar>(
    p: Option<&PromptParams<T>>,
    seq: &TokenSequence,
    backbone: &BackboneParams<T>,
) -> Result<JointEmbedding<T>> {
    encode_text(backbone, &assemble_text_prompt(p, seq, backbone)?)
}

/// I′: the image encoded with the projected visual prompts (plain image for `None`).
pub fn encode_prompted_image<T: Scalar>(
    p: Option<&PromptParams<T>>,
    image: &ImageTensor,
    backbone: &BackboneParams<T>,
) -> Result<JointEmbedding<T>> {
    let visual = p.map(project_visual);
    encode_image(backbone, image, visual.as_ref())
}

impl PromptParams<f32> {
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        for (name, m) in self.named_tensors() {
            ckpt.insert_mat(name, m);
        }
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            context: ckpt.get_mat(NAME_CONTEXT)?,
            f_weight: ckpt.get_mat(NAME_F_WEIGHT)?,
            f_bias: ckpt.get_mat(NAME_F_BIAS)?,
        })
    }
}

/// Prompt tensors registered on a tape.
pub(crate) struct PromptVars {
    pub context: Var,
    f_weight: Var,
    f_bias: Var,
}

impl PromptVars {
    pub fn register<'a, T: Scalar>(tape: &mut Tape<'a, T>, p: &'a PromptParams<T>, trainable: bool) -> Self {
        Self {
            context: tape.leaf(NAME_CONTEXT, &p.context, trainable),
            f_weight: tape.leaf(NAME_F_WEIGHT, &p.f_weight, trainable),
            f_bias: tape.leaf(NAME_F_BIAS, &p.f_bias, trainable),
        }
    }

    pub fn visual<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Var {
        let e = tape.matmul_nt(self.context, self.f_weight);
        tape.add_row(e, self.f_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{encode_embedded_image, tokenize, Vocab};

    fn cfg() -> BackboneConfig {
        BackboneConfig::with_vocab(12)
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a: PromptParams<f32> = init_prompts(8, 5, &cfg()).unwrap();
        let b: PromptParams<f32> = init_prompts(8, 5, &cfg()).unwrap();
        let c: PromptParams<f32> = init_prompts(8, 6, &cfg()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.context, c.context);
        assert_eq!(a.context.shape(), (8, 32));
        assert_eq!(a.f_weight.shape(), (48, 32));
        assert!(a.f_bias.data().iter().all(|&v| v == 0.0));
        assert!(init_prompts::<f32>(0, 1, &cfg()).is_err());
        assert!(init_prompts::<f32>(17, 1, &cfg()).is_err());
    }

    #[test]
    fn identity_projection() {
        // With equal widths and F = I, b = 0 the visual prompts are the context vectors.
        let v = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        let p = PromptParams {
            context: v.clone(),
            f_weight: Mat::identity(4),
            f_bias: Mat::zeros(1, 4),
        };
        assert_eq!(project_visual(&p), v);
    }

    #[test]
    fn constant_projection() {
        let b = Mat::row_vector(vec![0.5, -1.0, 2.0]);
        let p = PromptParams {
            context: Mat::from_fn(4, 2, |r, c| (r + c) as f64),
            f_weight: Mat::zeros(3, 2),
            f_bias: b.clone(),
        };
        let e = project_visual(&p);
        for r in 0..4 {
            assert_eq!(e.row(r), b.row(0));
        }
    }

    #[test]
    fn projection_matches_naive_loops() {
        let p: PromptParams<f64> = init_prompts(5, 9, &cfg()).unwrap();
        let mut p = p;
        p.f_bias = Mat::from_fn(1, 48, |_, c| c as f64 * 0.01);
        let e = project_visual(&p);
        for i in 0..5 {
            for o in 0..48 {
                let mut acc = p.f_bias.get(0, o);
                for j in 0..32 {
                    acc += p.f_weight.get(o, j) * p.context.get(i, j);
                }
                assert!((e.get(i, o) - acc).abs() <= 1e-6);
            }
        }
        assert_eq!(project_visual(&p), e);
    }

    #[test]
    fn text_prompt_lengths_and_effect() {
        let vocab = Vocab::from_words(["a", "red", "cat"]);
        let bb = BackboneParams::<f64>::init(BackboneConfig::with_vocab(vocab.len()), 2).unwrap();
        let seq = tokenize("a red cat", &vocab, 32);
        let plain = assemble_text_prompt(None, &seq, &bb).unwrap();
        assert_eq!(plain.len(), 5);
        let p: PromptParams<f64> = init_prompts(8, 1, &bb.config).unwrap();
        let prompted = assemble_text_prompt(Some(&p), &seq, &bb).unwrap();
        assert_eq!(prompted.len(), 13);
        assert_eq!(prompted.prompt_len, 8);
        assert_eq!(prompted.content, 9..12);
        assert_ne!(encode_text(&bb, &plain).unwrap(), encode_text(&bb, &prompted).unwrap());
    }

    #[test]
    fn image_prompt_length_and_sensitivity() {
        let bb = BackboneParams::<f64>::init(cfg(), 2).unwrap();
        let img = ImageTensor::zeros(32, 32, 3);
        assert_eq!(assemble_image_prompt(None, &img, &bb).unwrap().len(), 65);
        let mut p: PromptParams<f64> = init_prompts(4, 3, &bb.config).unwrap();
        let seq = assemble_image_prompt(Some(&p), &img, &bb).unwrap();
        assert_eq!(seq.len(), 1 + 4 + 64);
        let before = encode_embedded_image(&bb, &seq).unwrap();
        let h = 1e-4;
        let v = p.context.get(0, 0);
        p.context.set(0, 0, v + h);
        let after = encode_embedded_image(&bb, &assemble_image_prompt(Some(&p), &img, &bb).unwrap()).unwrap();
        let diff: f64 = before.0.iter().zip(&after.0).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "perturbing V must move the image embedding through F");
    }
}
