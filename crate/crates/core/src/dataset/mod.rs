//! Procedural image-caption dataset with a meta-category / subcategory
//! taxonomy, attribute captions, and few-shot splitting.

mod render;
mod taxonomy;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::error::{invalid, Error, Result};

pub use render::{foreground_mask, render_image, to_ppm, RenderConfig, MAX_BRIGHTNESS, MAX_SHIFT};
pub use taxonomy::{
    default_schema, gen_taxonomy, Attributes, MetaCategory, Subcategory, Taxonomy, ATTRIBUTE_KEYS, BACKGROUND,
    BACKGROUNDS, COLOR, COLORS, MOTIFS, POSITION, POSITIONS, SHAPE_FAMILIES, SIZE, SIZES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    PretrainBase,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::PretrainBase => "pretrain_base",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub split: Split,
    pub meta_category: String,
    pub subcategory: String,
    pub attributes: Attributes,
    pub caption: String,
    pub image_seed: u64,
}

impl CaptionRecord {
    pub fn attr(&self, key: &str) -> &str {
        self.attributes.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn render(&self, taxonomy: &Taxonomy) -> Result<ImageTensor> {
        render_image(taxonomy, &self.subcategory, &self.attributes, self.image_seed, RenderConfig::default())
    }

    /// The record's caption template evaluated on its own fields.
    pub fn expected_caption(&self) -> String {
        caption_for(
            self.attr(SIZE),
            self.attr(COLOR),
            &self.subcategory,
            &self.meta_category,
            self.attr(BACKGROUND),
            self.attr(POSITION),
        )
    }
}

pub fn caption_for(size: &str, color: &str, sub: &str, meta: &str, background: &str, position: &str) -> String {
    format!("a {size} {color} {sub}, a type of {meta}, on a {background} background in the {position}")
}

pub fn caption_from_attributes(sub: &str, meta: &str, attrs: &Attributes) -> String {
    let get = |k: &str| attrs.get(k).map(String::as_str).unwrap_or("");
    caption_for(get(SIZE), get(COLOR), sub, meta, get(BACKGROUND), get(POSITION))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedCaption {
    pub subcategory: String,
    pub meta_category: String,
    pub attributes: Attributes,
}

/// Inverse of [`caption_for`].
pub fn parse_caption(caption: &str) -> Result<ParsedCaption> {
    let bad = || Error::Dataset(format!("caption does not match template: {caption:?}"));
    let w: Vec<&str> = caption.split(' ').collect();
    let fixed = [(0, "a"), (4, "a"), (5, "type"), (6, "of"), (8, "on"), (9, "a"), (11, "background"), (12, "in"), (13, "the")];
    if w.len() != 15 || fixed.iter().any(|&(i, s)| w[i] != s) {
        return Err(bad());
    }
    let sub = w[3].strip_suffix(',').ok_or_else(bad)?;
    let meta = w[7].strip_suffix(',').ok_or_else(bad)?;
    let attributes = Attributes::from([
        (SIZE.to_string(), w[1].to_string()),
        (COLOR.to_string(), w[2].to_string()),
        (BACKGROUND.to_string(), w[10].to_string()),
        (POSITION.to_string(), w[14].to_string()),
    ]);
    Ok(ParsedCaption {
        subcategory: sub.to_string(),
        meta_category: meta.to_string(),
        attributes,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub base_metas: usize,
    pub downstream_metas: usize,
    pub subs_per_meta: usize,
    pub per_sub: usize,
    pub taxonomy_seed: u64,
    pub dataset_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            base_metas: 5,
            downstream_metas: 5,
            subs_per_meta: 4,
            per_sub: 40,
            taxonomy_seed: 7,
            dataset_seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<CaptionRecord>,
    /// Set when `per_sub` exceeded the number of distinct attribute tuples.
    pub duplicate_attributes: bool,
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Records for every subcategory. The first `base_metas` meta-categories go
/// to the pretraining split; downstream records are marked `test` until
/// [`few_shot_split`] assigns them.
pub fn gen_dataset(taxonomy: &Taxonomy, per_sub: usize, base_metas: usize, seed: u64) -> Result<Manifest> {
    if per_sub == 0 {
        return Err(invalid("per_sub must be at least 1"));
    }
    if base_metas > taxonomy.metas.len() {
        return Err(invalid("more base meta-categories than the taxonomy has"));
    }
    taxonomy.validate()?;
    let combos = taxonomy.attribute_combinations();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut duplicate = false;
    for (mi, meta) in taxonomy.metas.iter().enumerate() {
        let split = if mi < base_metas { Split::PretrainBase } else { Split::Test };
        for sub in &meta.subcategories {
            let mut order: Vec<usize> = (0..combos.len()).collect();
            order.shuffle(&mut rng);
            if per_sub > combos.len() {
                duplicate = true;
            }
            for i in 0..per_sub {
                let attrs = combos[order[i % order.len()]].clone();
                let idx = records.len() as u64;
                records.push(CaptionRecord {
                    id: format!("{}-{i:03}", sub.name),
                    split,
                    meta_category: meta.name.clone(),
                    subcategory: sub.name.clone(),
                    caption: caption_from_attributes(&sub.name, &meta.name, &attrs),
                    attributes: attrs,
                    image_seed: mix(seed, idx),
                });
            }
        }
    }
    Ok(Manifest {
        records,
        duplicate_attributes: duplicate,
    })
}

pub fn generate(cfg: &DatasetConfig) -> Result<(Taxonomy, Manifest)> {
    let taxonomy = gen_taxonomy(cfg.base_metas + cfg.downstream_metas, cfg.subs_per_meta, cfg.taxonomy_seed)?;
    let manifest = gen_dataset(&taxonomy, cfg.per_sub, cfg.base_metas, cfg.dataset_seed)?;
    Ok((taxonomy, manifest))
}

/// Per downstream subcategory: `shots` seeded picks go to train, a quarter of
/// the remainder (rounded down) to val, the rest to test. Base records keep
/// their split; manifest order is preserved.
pub fn few_shot_split(records: &[CaptionRecord], shots: usize, seed: u64) -> Result<Vec<CaptionRecord>> {
    if shots == 0 {
        return Err(invalid("shots must be at least 1"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.split == Split::PretrainBase {
            continue;
        }
        let g = groups.entry(r.subcategory.as_str()).or_default();
        if g.is_empty() {
            order.push(r.subcategory.as_str());
        }
        g.push(i);
    }
    let mut out = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sub in order {
        let mut idx = groups[sub].clone();
        if idx.len() <= shots {
            return Err(Error::Dataset(format!(
                "subcategory {sub} has {} records, need more than {shots}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_val = (idx.len() - shots) / 4;
        for (j, &i) in idx.iter().enumerate() {
            out[i].split = if j < shots {
                Split::Train
            } else if j < shots + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

pub fn select(records: &[CaptionRecord], split: Split) -> Vec<CaptionRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

pub fn to_jsonl(records: &[CaptionRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn from_jsonl(text: &str) -> Result<Vec<CaptionRecord>> {
    let records: Vec<CaptionRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let mut ids = BTreeSet::new();
    for r in &records {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate record id {}", r.id)));
        }
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    fs::write(path, to_jsonl(records)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    from_jsonl(&text)
}

pub fn write_taxonomy(path: &Path, taxonomy: &Taxonomy) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, taxonomy)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let t: Taxonomy = serde_json::from_str(&text)?;
    t.validate()?;
    Ok(t)
}

/// Writes `<id>.ppm` for every record into `dir`.
pub fn export_ppm(dir: &Path, taxonomy: &Taxonomy, records: &[CaptionRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in records {
        fs::write(dir.join(format!("{}.ppm", r.id)), to_ppm(&r.render(taxonomy)?))?;
    }
    Ok(())
}

/// Rendered images for `records`, in order.
pub fn render_all(taxonomy: &Taxonomy, records: &[CaptionRecord]) -> Result<Vec<ImageTensor>> {
    use rayon::prelude::*;
    records.par_iter().map(|r| r.render(taxonomy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{tokenize, Vocab};

    #[test]
    fn template_trace() {
        assert_eq!(
            caption_for("medium", "red", "bengal", "cat", "plain", "top-left"),
            "a medium red bengal, a type of cat, on a plain background in the top-left"
        );
    }

    #[test]
    fn captions_fit_the_tokenizer() {
        let t = gen_taxonomy(10, 4, 0).unwrap();
        let vocab = Vocab::from_words(t.caption_words());
        for m in &t.metas {
            for s in &m.subcategories {
                for a in t.attribute_combinations() {
                    let cap = caption_from_attributes(&s.name, &m.name, &a);
                    let seq = tokenize(&cap, &vocab, 32);
                    assert_eq!(seq.num_words(), cap.split_whitespace().count());
                    assert!(seq.words().iter().all(|&id| id != crate::backbone::tokenizer::UNK));
                }
            }
        }
    }

    #[test]
    fn parse_inverts_template() {
        let (t, m) = generate(&DatasetConfig::default()).unwrap();
        for r in &m.records {
            assert_eq!(r.caption, r.expected_caption());
            let p = parse_caption(&r.caption).unwrap();
            assert_eq!(p.subcategory, r.subcategory);
            assert_eq!(p.meta_category, r.meta_category);
            assert_eq!(p.attributes, r.attributes);
            t.check_attributes(&p.attributes).unwrap();
        }
        assert!(parse_caption("a red cat").is_err());
    }

    #[test]
    fn small_counts_and_determinism() {
        let t = gen_taxonomy(1, 2, 0).unwrap();
        let m = gen_dataset(&t, 1, 0, 3).unwrap();
        assert_eq!(m.records.len(), 2);
        let (_, a) = generate(&DatasetConfig::default()).unwrap();
        let (_, b) = generate(&DatasetConfig::default()).unwrap();
        assert_eq!(to_jsonl(&a.records).unwrap(), to_jsonl(&b.records).unwrap());
        assert_eq!(a.records.len(), 10 * 4 * 40);
        assert!(!a.duplicate_attributes);
        assert!(gen_dataset(&t, 0, 0, 3).is_err());
        assert!(gen_dataset(&t, 400, 0, 3).unwrap().duplicate_attributes);
    }

    #[test]
    fn base_and_downstream_disjoint() {
        let (_, m) = generate(&DatasetConfig::default()).unwrap();
        let base: BTreeSet<_> = m
            .records
            .iter()
            .filter(|r| r.split == Split::PretrainBase)
            .map(|r| r.meta_category.clone())
            .collect();
        let down: BTreeSet<_> = m
            .records
            .iter()
            .filter(|r| r.split != Split::PretrainBase)
            .map(|r| r.meta_category.clone())
            .collect();
        assert_eq!(base.len(), 5);
        assert_eq!(down.len(), 5);
        assert!(base.is_disjoint(&down));
    }

    #[test]
    fn split_counts() {
        let (_, m) = generate(&DatasetConfig::default()).unwrap();
        let s = few_shot_split(&m.records, 16, 5).unwrap();
        let mut per: BTreeMap<(&str, Split), usize> = BTreeMap::new();
        for r in &s {
            *per.entry((r.subcategory.as_str(), r.split)).or_default() += 1;
        }
        for ((_, split), n) in per {
            match split {
                Split::Train => assert_eq!(n, 16),
                Split::Val => assert_eq!(n, 6),
                Split::Test => assert_eq!(n, 18),
                Split::PretrainBase => assert_eq!(n, 40),
            }
        }
        assert_eq!(s, few_shot_split(&m.records, 16, 5).unwrap());
        assert!(few_shot_split(&m.records, 40, 5).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let t = gen_taxonomy(2, 2, 1).unwrap();
        let m = gen_dataset(&t, 3, 1, 2).unwrap();
        let text = to_jsonl(&m.records).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"id\":\"meta0_sub0-000\",\"split\":\"pretrain_base\""));
        assert_eq!(from_jsonl(&text).unwrap(), m.records);
    }
}
