//! Miniature frozen dual encoder: a word-level text transformer and a
//! patch-based vision transformer projecting into a shared joint space.

pub mod checkpoint;
mod encoder;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::tensor::{l2_norm, Mat, Scalar};

pub use encoder::{
    assemble_sequence_image, embed_caption, encode_embedded_image, encode_image, encode_text,
    score, token_features, EmbeddedSequence,
};
pub(crate) use encoder::{cosine, text_sequence_from_tape, ImageVars, TextVars};
pub use tokenizer::{tokenize, TokenSequence, Vocab};

const TEXT_POS_SCALE: f64 = 0.1;
const VISION_POS_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub text_width: usize,
    pub vision_width: usize,
    pub joint_dim: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub max_len: usize,
    pub max_prompts: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            text_width: 32,
            vision_width: 48,
            joint_dim: 32,
            text_layers: 2,
            vision_layers: 2,
            heads: 4,
            mlp_ratio: 2,
            image_size: 32,
            channels: 3,
            patch_size: 4,
            max_len: 32,
            max_prompts: 16,
        }
    }
}

impl BackboneConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("text_width", self.text_width),
            ("vision_width", self.vision_width),
            ("joint_dim", self.joint_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.max_len < 2 {
            return Err(invalid("max_len must be at least 2"));
        }
        if self.text_width % self.heads != 0 || self.vision_width % self.heads != 0 {
            return Err(invalid("widths must be divisible by the head count"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(invalid("image_size must be a multiple of patch_size"));
        }
        if self.vocab_size < tokenizer::NUM_SPECIAL as usize {
            return Err(invalid("vocab_size must cover the special tokens"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn text_positions(&self) -> usize {
        self.max_len + self.max_prompts
    }

    pub fn vision_positions(&self) -> usize {
        1 + self.max_prompts + self.num_patches()
    }

    /// Dimensions as stored in checkpoint metadata.
    pub fn to_dims(&self) -> Vec<usize> {
        vec![
            self.vocab_size,
            self.text_width,
            self.vision_width,
            self.joint_dim,
            self.text_layers,
            self.vision_layers,
            self.heads,
            self.mlp_ratio,
            self.image_size,
            self.channels,
            self.patch_size,
            self.max_len,
            self.max_prompts,
        ]
    }

    pub fn from_dims(d: &[usize]) -> Result<Self> {
        if d.len() != 13 {
            return Err(Error::Checkpoint(format!(
                "config metadata has {} entries, expected 13",
                d.len()
            )));
        }
        let cfg = Self {
            vocab_size: d[0],
            text_width: d[1],
            vision_width: d[2],
            joint_dim: d[3],
            text_layers: d[4],
            vision_layers: d[5],
            heads: d[6],
            mlp_ratio: d[7],
            image_size: d[8],
            channels: d[9],
            patch_size: d[10],
            max_len: d[11],
            max_prompts: d[12],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Unit-norm vector in the joint image-text space.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding<T = f32>(pub Vec<T>);

impl<T: Scalar> JointEmbedding<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.0)
    }

    pub fn cast<U: Scalar>(&self) -> JointEmbedding<U> {
        JointEmbedding(
            self.0
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        )
    }
}

/// H×W×C image with values in [0, 1], stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn from_pixels(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let w = self.width;
        let ch = self.channels;
        self.pixels[(y * w + x) * ch + c] = v.clamp(0.0, 1.0);
    }

    pub fn check_dims(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.height != cfg.image_size || self.width != cfg.image_size || self.channels != cfg.channels {
            return Err(Error::Shape(format!(
                "image is {}x{}x{}, encoder expects {}x{}x{}",
                self.height, self.width, self.channels, cfg.image_size, cfg.image_size, cfg.channels
            )));
        }
        Ok(())
    }

    /// Non-overlapping `patch`×`patch` tiles in row-major order, each flattened (y, x, c).
    pub fn patchify<T: Scalar>(&self, patch: usize) -> Mat<T> {
        let per_row = self.width / patch;
        let n = per_row * (self.height / patch);
        let dim = patch * patch * self.channels;
        let mut out = Mat::zeros(n, dim);
        for p in 0..n {
            let (py, px) = (p / per_row, p % per_row);
            let row = out.row_mut(p);
            let mut i = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..self.channels {
                        row[i] = T::from_f32(self.get(py * patch + dy, px * patch + dx, c)).unwrap();
                        i += 1;
                    }
                }
            }
        }
        out
    }
}

/// Pre-norm transformer block weights. Linear maps act on row vectors (`x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Scalar> {
    pub ln1_g: Mat<T>,
    pub ln1_b: Mat<T>,
    pub wq: Mat<T>,
    pub bq: Mat<T>,
    pub wk: Mat<T>,
    pub bk: Mat<T>,
    pub wv: Mat<T>,
    pub bv: Mat<T>,
    pub wo: Mat<T>,
    pub bo: Mat<T>,
    pub ln2_g: Mat<T>,
    pub ln2_b: Mat<T>,
    pub w1: Mat<T>,
    pub b1: Mat<T>,
    pub w2: Mat<T>,
    pub b2: Mat<T>,
}

impl<T: Scalar> Block<T> {
    fn init(width: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let std_in = 1.0 / (width as f64).sqrt();
        let std_out = std_in / (2.0 * layers as f64).sqrt();
        let std_hidden = 1.0 / (hidden as f64).sqrt() / (2.0 * layers as f64).sqrt();
        Self {
            ln1_g: ones(width),
            ln1_b: Mat::zeros(1, width),
            wq: gaussian(width, width, std_in, rng),
            bq: Mat::zeros(1, width),
            wk: gaussian(width, width, std_in, rng),
            bk: Mat::zeros(1, width),
            wv: gaussian(width, width, std_in, rng),
            bv: Mat::zeros(1, width),
            wo: gaussian(width, width, std_out, rng),
            bo: Mat::zeros(1, width),
            ln2_g: ones(width),
            ln2_b: Mat::zeros(1, width),
            w1: gaussian(width, hidden, std_in, rng),
            b1: Mat::zeros(1, hidden),
            w2: gaussian(hidden, width, std_hidden, rng),
            b2: Mat::zeros(1, width),
        }
    }

    fn fields(&self) -> [(&'static str, &Mat<T>); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Mat<T>); 16] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            ln1_g: self.ln1_g.cast(),
            ln1_b: self.ln1_b.cast(),
            wq: self.wq.cast(),
            bq: self.bq.cast(),
            wk: self.wk.cast(),
            bk: self.bk.cast(),
            wv: self.wv.cast(),
            bv: self.bv.cast(),
            wo: self.wo.cast(),
            bo: self.bo.cast(),
            ln2_g: self.ln2_g.cast(),
            ln2_b: self.ln2_b.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextTower<T: Scalar> {
    pub token_embedding: Mat<T>,
    /// Fixed sinusoidal encodings, one row per position.
    pub positions: Mat<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_g: Mat<T>,
    pub ln_b: Mat<T>,
    /// width → joint
    pub projection: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTower<T: Scalar> {
    /// patch_dim → width
    pub patch_weight: Mat<T>,
    pub patch_bias: Mat<T>,
    pub cls: Mat<T>,
    pub positions: Mat<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_g: Mat<T>,
    pub ln_b: Mat<T>,
    pub projection: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T: Scalar = f32> {
    pub config: BackboneConfig,
    pub text: TextTower<T>,
    pub vision: VisionTower<T>,
    frozen: bool,
}

impl<T: Scalar> BackboneParams<T> {
    /// Seeded random initialization; deterministic for a given (config, seed).
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let text = TextTower {
            token_embedding: gaussian(c.vocab_size, c.text_width, 1.0, &mut rng),
            positions: sinusoidal(c.text_positions(), c.text_width, TEXT_POS_SCALE),
            blocks: (0..c.text_layers)
                .map(|_| Block::init(c.text_width, c.text_width * c.mlp_ratio, c.text_layers, &mut rng))
                .collect(),
            ln_g: ones(c.text_width),
            ln_b: Mat::zeros(1, c.text_width),
            projection: gaussian(c.text_width, c.joint_dim, 1.0 / (c.text_width as f64).sqrt(), &mut rng),
        };
        let vision = VisionTower {
            patch_weight: gaussian(c.patch_dim(), c.vision_width, 1.0 / (c.patch_dim() as f64).sqrt(), &mut rng),
            patch_bias: Mat::zeros(1, c.vision_width),
            cls: gaussian(1, c.vision_width, 1.0, &mut rng),
            positions: sinusoidal(c.vision_positions(), c.vision_width, VISION_POS_SCALE),
            blocks: (0..c.vision_layers)
                .map(|_| {
                    Block::init(c.vision_width, c.vision_width * c.mlp_ratio, c.vision_layers, &mut rng)
                })
                .collect(),
            ln_g: ones(c.vision_width),
            ln_b: Mat::zeros(1, c.vision_width),
            projection: gaussian(
                c.vision_width,
                c.joint_dim,
                1.0 / (c.vision_width as f64).sqrt(),
                &mut rng,
            ),
        };
        Ok(Self {
            config,
            text,
            vision,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = vec![
            ("text.token_embedding".to_string(), &self.text.token_embedding),
            ("text.positions".to_string(), &self.text.positions),
        ];
        for (i, b) in self.text.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, m)| (format!("text.block{i}.{n}"), m)));
        }
        out.push(("text.ln_g".into(), &self.text.ln_g));
        out.push(("text.ln_b".into(), &self.text.ln_b));
        out.push(("text.projection".into(), &self.text.projection));
        out.push(("vision.patch_weight".into(), &self.vision.patch_weight));
        out.push(("vision.patch_bias".into(), &self.vision.patch_bias));
        out.push(("vision.cls".into(), &self.vision.cls));
        out.push(("vision.positions".into(), &self.vision.positions));
        for (i, b) in self.vision.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, m)| (format!("vision.block{i}.{n}"), m)));
        }
        out.push(("vision.ln_g".into(), &self.vision.ln_g));
        out.push(("vision.ln_b".into(), &self.vision.ln_b));
        out.push(("vision.projection".into(), &self.vision.projection));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = vec![
            ("text.token_embedding".to_string(), &mut self.text.token_embedding),
            ("text.positions".to_string(), &mut self.text.positions),
        ];
        for (i, b) in self.text.blocks.iter_mut().enumerate() {
            out.extend(b.fields_mut().into_iter().map(|(n, m)| (format!("text.block{i}.{n}"), m)));
        }
        out.push(("text.ln_g".into(), &mut self.text.ln_g));
        out.push(("text.ln_b".into(), &mut self.text.ln_b));
        out.push(("text.projection".into(), &mut self.text.projection));
        out.push(("vision.patch_weight".into(), &mut self.vision.patch_weight));
        out.push(("vision.patch_bias".into(), &mut self.vision.patch_bias));
        out.push(("vision.cls".into(), &mut self.vision.cls));
        out.push(("vision.positions".into(), &mut self.vision.positions));
        for (i, b) in self.vision.blocks.iter_mut().enumerate() {
            out.extend(b.fields_mut().into_iter().map(|(n, m)| (format!("vision.block{i}.{n}"), m)));
        }
        out.push(("vision.ln_g".into(), &mut self.vision.ln_g));
        out.push(("vision.ln_b".into(), &mut self.vision.ln_b));
        out.push(("vision.projection".into(), &mut self.vision.projection));
        out
    }

    /// Names of the tensors that gradient descent may touch during pretraining.
    /// Positional tables are fixed.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !n.ends_with(".positions"))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> BackboneParams<U> {
        BackboneParams {
            config: self.config.clone(),
            text: TextTower {
                token_embedding: self.text.token_embedding.cast(),
                positions: self.text.positions.cast(),
                blocks: self.text.blocks.iter().map(Block::cast).collect(),
                ln_g: self.text.ln_g.cast(),
                ln_b: self.text.ln_b.cast(),
                projection: self.text.projection.cast(),
            },
            vision: VisionTower {
                patch_weight: self.vision.patch_weight.cast(),
                patch_bias: self.vision.patch_bias.cast(),
                cls: self.vision.cls.cast(),
                positions: self.vision.positions.cast(),
                blocks: self.vision.blocks.iter().map(Block::cast).collect(),
                ln_g: self.vision.ln_g.cast(),
                ln_b: self.vision.ln_b.cast(),
                projection: self.vision.projection.cast(),
            },
            frozen: self.frozen,
        }
    }
}

pub(crate) fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat::from_fn(rows, cols, |_, _| T::lit(normal.sample(rng)))
}

fn ones<T: Scalar>(n: usize) -> Mat<T> {
    Mat::from_fn(1, n, |_, _| T::one())
}

/// `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(..)`, times `scale`.
pub fn sinusoidal<T: Scalar>(positions: usize, width: usize, scale: f64) -> Mat<T> {
    Mat::from_fn(positions, width, |p, c| {
        let i = (c / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / width as f64);
        let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        T::lit(scale * v)
    })
}
