use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};

use super::taxonomy::{Attributes, Taxonomy, BACKGROUND, COLOR, POSITION, SIZE};

pub const MAX_SHIFT: i32 = 2;
pub const MAX_BRIGHTNESS: f32 = 0.05;
/// Motif pixels are darkened by this factor.
const MOTIF_SHADE: f32 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderConfig {
    pub size: usize,
    /// Disable for clean masks in tests.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { size: 32, jitter: true }
    }
}

const RGB: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.60, 0.15, 0.75],
    [1.00, 0.55, 0.05],
    [1.00, 0.50, 0.75],
    [0.10, 0.85, 0.90],
];

fn index_of(taxonomy: &Taxonomy, key: &str, attrs: &Attributes) -> Result<usize> {
    let v = attrs
        .get(key)
        .ok_or_else(|| Error::Dataset(format!("attribute {key} missing")))?;
    taxonomy.schema[key]
        .iter()
        .position(|x| x == v)
        .ok_or_else(|| Error::Dataset(format!("unknown {key} value {v:?}")))
}

fn radius(size_idx: usize, n_sizes: usize, image: usize) -> f32 {
    // small/medium/large map to 3.5/5.5/7.5 at 32 px.
    let unit = image as f32 / 32.0;
    let t = if n_sizes > 1 { size_idx as f32 / (n_sizes - 1) as f32 } else { 0.5 };
    (3.5 + 4.0 * t) * unit
}

/// Whether offset (dx, dy) from the shape centre is inside shape family `shape`.
fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape % 10 {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= 0.85 * r && ay <= 0.85 * r,
        2 => ax + ay <= r,
        3 => dy <= 0.8 * r && dy >= -r && ax <= (dy + r) * 0.55,
        4 => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        6 => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0,
        7 => (dx / (0.55 * r)).powi(2) + (dy / r).powi(2) <= 1.0,
        8 => ax <= 0.9 * r && ay <= 0.9 * r && ax + ay <= 1.25 * r,
        _ => (ax - ay).abs() <= r / 2.5 && ax.max(ay) <= r,
    }
}

/// Motif code → stripe orientation and period, measured from the shape centre.
fn motif_on(motif: usize, dx: i32, dy: i32) -> bool {
    let band = ((motif / 4) % 3) as i32;
    let period = 2 + band;
    // The band shift keeps periods apart on shapes only a few pixels thick.
    let v = band + match motif % 4 {
        0 => dy,
        1 => dx,
        2 => dx + dy,
        // Offset by one: with period 2 the two diagonals would otherwise coincide.
        _ => dx - dy + 1,
    };
    v.rem_euclid(period) == 0
}

fn background(kind: usize, x: usize, y: usize) -> f32 {
    match kind % 4 {
        0 => 0.45,
        1 => {
            if (y / 2) % 2 == 0 {
                0.3
            } else {
                0.6
            }
        }
        2 => {
            if (x / 4 + y / 4) % 2 == 0 {
                0.3
            } else {
                0.6
            }
        }
        _ => {
            if x % 6 < 2 && y % 6 < 2 {
                0.75
            } else {
                0.4
            }
        }
    }
}

/// Foreground mask of the rendering, row-major, before colouring.
pub fn foreground_mask(
    taxonomy: &Taxonomy,
    sub: &str,
    attrs: &Attributes,
    image_seed: u64,
    cfg: RenderConfig,
) -> Result<Vec<bool>> {
    Ok(layout(taxonomy, sub, attrs, image_seed, cfg)?.mask)
}

struct Layout {
    mask: Vec<bool>,
    cx: i32,
    cy: i32,
    motif: usize,
    color: usize,
    background: usize,
    brightness: f32,
}

fn layout(taxonomy: &Taxonomy, sub: &str, attrs: &Attributes, image_seed: u64, cfg: RenderConfig) -> Result<Layout> {
    let (meta, subcat) = taxonomy
        .find(sub)
        .ok_or_else(|| Error::Dataset(format!("unknown subcategory {sub:?}")))?;
    taxonomy.check_attributes(attrs)?;
    let color = index_of(taxonomy, COLOR, attrs)?;
    let size = index_of(taxonomy, SIZE, attrs)?;
    let bg = index_of(taxonomy, BACKGROUND, attrs)?;
    let pos = index_of(taxonomy, POSITION, attrs)?;
    let s = cfg.size;
    let (mut jx, mut jy, mut brightness) = (0, 0, 1.0);
    if cfg.jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
        jx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
        jy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
        brightness = 1.0 + rng.random_range(-MAX_BRIGHTNESS..=MAX_BRIGHTNESS);
    }
    let q = s as i32 / 4;
    let cx = if pos % 2 == 0 { q } else { 3 * q } + jx;
    let cy = if pos < 2 { q } else { 3 * q } + jy;
    let r = radius(size, taxonomy.schema[SIZE].len(), s);
    let mut mask = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            mask[y * s + x] = inside(meta.shape, x as f32 - cx as f32, y as f32 - cy as f32, r);
        }
    }
    Ok(Layout {
        mask,
        cx,
        cy,
        motif: subcat.motif,
        color,
        background: bg,
        brightness,
    })
}

/// Deterministic rendering of one record. The meta-category picks the shape,
/// the subcategory a faint stripe motif inside it, and the attributes pick
/// colour, footprint, quadrant, and background texture.
pub fn render_image(
    taxonomy: &Taxonomy,
    sub: &str,
    attrs: &Attributes,
    image_seed: u64,
    cfg: RenderConfig,
) -> Result<ImageTensor> {
    let l = layout(taxonomy, sub, attrs, image_seed, cfg)?;
    let s = cfg.size;
    let rgb = RGB[l.color % RGB.len()];
    let mut img = ImageTensor::zeros(s, s, 3);
    for y in 0..s {
        for x in 0..s {
            let px = if l.mask[y * s + x] {
                let shade = if motif_on(l.motif, x as i32 - l.cx, y as i32 - l.cy) {
                    MOTIF_SHADE
                } else {
                    1.0
                };
                rgb.map(|c| c * shade)
            } else {
                [background(l.background, x, y); 3]
            };
            for (c, v) in px.iter().enumerate() {
                img.set(y, x, c, v * l.brightness);
            }
        }
    }
    Ok(img)
}

/// Binary PPM (P6) encoding.
pub fn to_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                out.push((img.get(y, x, c.min(img.channels() - 1)) * 255.0).round() as u8);
            }
        }
    }
    out
}

#[cfg(test)]
mod motif_tests {
    use super::*;
    use crate::dataset::taxonomy::gen_taxonomy;

    #[test]
    fn motifs_distinct_for_every_shape_and_size() {
        let mut t = gen_taxonomy(1, 12, 0).unwrap();
        for (i, s) in t.metas[0].subcategories.iter_mut().enumerate() {
            s.motif = i;
        }
        for shape in 0..crate::dataset::taxonomy::SHAPE_FAMILIES {
            t.metas[0].shape = shape;
            for size in ["small", "medium", "large"] {
                let a = Attributes::from([
                    (SIZE.into(), size.into()),
                    (COLOR.into(), "red".into()),
                    (BACKGROUND.into(), "plain".into()),
                    (POSITION.into(), "top-left".into()),
                ]);
                let cfg = RenderConfig { size: 32, jitter: false };
                let imgs: Vec<_> = (0..12)
                    .map(|m| render_image(&t, &format!("meta0_sub{m}"), &a, 5, cfg).unwrap())
                    .collect();
                for i in 0..12 {
                    for j in i + 1..12 {
                        assert_ne!(imgs[i], imgs[j], "shape {shape} {size}: motifs {i} and {j}");
                    }
                }
            }
        }
    }
}
