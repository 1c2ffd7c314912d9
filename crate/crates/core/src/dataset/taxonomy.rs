use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "pink", "cyan"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const BACKGROUNDS: [&str; 4] = ["plain", "striped", "checkered", "dotted"];
pub const POSITIONS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

pub const COLOR: &str = "color";
pub const SIZE: &str = "size";
pub const BACKGROUND: &str = "background";
pub const POSITION: &str = "position";
/// Canonical attribute order, used when enumerating combinations.
pub const ATTRIBUTE_KEYS: [&str; 4] = [COLOR, SIZE, BACKGROUND, POSITION];

/// Number of distinct shape families the renderer knows.
pub const SHAPE_FAMILIES: usize = 10;
/// Number of distinct subcategory motifs the renderer knows.
pub const MOTIFS: usize = 12;

pub type Attributes = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subcategory {
    pub name: String,
    /// Motif code rendered inside the foreground shape.
    pub motif: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaCategory {
    pub name: String,
    /// Shape family drawn for every subcategory of this meta-category.
    pub shape: usize,
    pub subcategories: Vec<Subcategory>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub metas: Vec<MetaCategory>,
    pub schema: BTreeMap<String, Vec<String>>,
}

pub fn default_schema() -> BTreeMap<String, Vec<String>> {
    let owned = |vals: &[&str]| vals.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        (COLOR.to_string(), owned(&COLORS)),
        (SIZE.to_string(), owned(&SIZES)),
        (BACKGROUND.to_string(), owned(&BACKGROUNDS)),
        (POSITION.to_string(), owned(&POSITIONS)),
    ])
}

/// `n_meta` meta-categories named `meta{i}`, each with `n_sub` subcategories
/// named `meta{i}_sub{j}`. The seed permutes shape families across
/// meta-categories and motifs across siblings.
pub fn gen_taxonomy(n_meta: usize, n_sub: usize, seed: u64) -> Result<Taxonomy> {
    if n_meta == 0 {
        return Err(invalid("need at least one meta-category"));
    }
    if n_sub < 2 {
        return Err(invalid("every meta-category needs at least two subcategories"));
    }
    if n_sub > MOTIFS {
        return Err(invalid(format!("at most {MOTIFS} subcategories per meta-category")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes: Vec<usize> = (0..SHAPE_FAMILIES).collect();
    shapes.shuffle(&mut rng);
    let metas = (0..n_meta)
        .map(|i| {
            let mut motifs: Vec<usize> = (0..MOTIFS).collect();
            motifs.shuffle(&mut rng);
            MetaCategory {
                name: format!("meta{i}"),
                shape: shapes[i % SHAPE_FAMILIES],
                subcategories: (0..n_sub)
                    .map(|j| Subcategory {
                        name: format!("meta{i}_sub{j}"),
                        motif: motifs[j],
                    })
                    .collect(),
            }
        })
        .collect();
    let t = Taxonomy {
        metas,
        schema: default_schema(),
    };
    t.validate()?;
    Ok(t)
}

impl Taxonomy {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.metas {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Dataset(format!("duplicate name {}", m.name)));
            }
            for s in &m.subcategories {
                if !seen.insert(s.name.as_str()) {
                    return Err(Error::Dataset(format!("duplicate name {}", s.name)));
                }
            }
        }
        for key in ATTRIBUTE_KEYS {
            match self.schema.get(key) {
                Some(vals) if vals.len() >= 2 => {}
                _ => return Err(Error::Dataset(format!("attribute {key} needs at least two values"))),
            }
        }
        Ok(())
    }

    /// Meta-category owning `sub`, with the subcategory itself.
    pub fn find(&self, sub: &str) -> Option<(&MetaCategory, &Subcategory)> {
        self.metas
            .iter()
            .find_map(|m| m.subcategories.iter().find(|s| s.name == sub).map(|s| (m, s)))
    }

    pub fn meta(&self, name: &str) -> Option<&MetaCategory> {
        self.metas.iter().find(|m| m.name == name)
    }

    /// Other subcategories of the same meta-category.
    pub fn siblings(&self, sub: &str) -> Vec<&str> {
        match self.find(sub) {
            Some((m, _)) => m
                .subcategories
                .iter()
                .filter(|s| s.name != sub)
                .map(|s| s.name.as_str())
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn num_subcategories(&self) -> usize {
        self.metas.iter().map(|m| m.subcategories.len()).sum()
    }

    /// Every attribute combination in schema order (color, size, background, position).
    pub fn attribute_combinations(&self) -> Vec<Attributes> {
        let mut combos = vec![Attributes::new()];
        for key in ATTRIBUTE_KEYS {
            let vals = &self.schema[key];
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    vals.iter().map(move |v| {
                        let mut c = c.clone();
                        c.insert(key.to_string(), v.clone());
                        c
                    })
                })
                .collect();
        }
        combos
    }

    pub fn check_attributes(&self, attrs: &Attributes) -> Result<()> {
        for key in ATTRIBUTE_KEYS {
            let v = attrs
                .get(key)
                .ok_or_else(|| Error::Dataset(format!("attribute {key} missing")))?;
            if !self.schema[key].contains(v) {
                return Err(Error::Dataset(format!("unknown {key} value {v:?}")));
            }
        }
        if attrs.len() != ATTRIBUTE_KEYS.len() {
            return Err(Error::Dataset("unexpected attribute keys".into()));
        }
        Ok(())
    }

    /// Every word any caption over this taxonomy can contain.
    pub fn caption_words(&self) -> Vec<String> {
        let mut texts = Vec::new();
        let first = |key: &str| self.schema[key][0].clone();
        for m in &self.metas {
            for s in &m.subcategories {
                texts.push(super::caption_for(
                    &first(SIZE),
                    &first(COLOR),
                    &s.name,
                    &m.name,
                    &first(BACKGROUND),
                    &first(POSITION),
                ));
            }
        }
        for (_, vals) in &self.schema {
            texts.extend(vals.iter().cloned());
        }
        let mut words: Vec<String> = texts
            .iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        words.sort();
        words.dedup();
        words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_taxonomy() {
        let t = gen_taxonomy(1, 2, 0).unwrap();
        assert_eq!(t.metas.len(), 1);
        assert_eq!(t.siblings("meta0_sub0"), vec!["meta0_sub1"]);
    }

    #[test]
    fn sizes_and_determinism() {
        let a = gen_taxonomy(5, 4, 9).unwrap();
        assert_eq!(a.num_subcategories(), 20);
        assert_eq!(a, gen_taxonomy(5, 4, 9).unwrap());
        assert_eq!(a.attribute_combinations().len(), 8 * 3 * 4 * 4);
        assert!(gen_taxonomy(3, 1, 0).is_err());
        assert!(gen_taxonomy(0, 3, 0).is_err());
    }

    #[test]
    fn sibling_motifs_are_distinct() {
        let t = gen_taxonomy(10, 4, 1).unwrap();
        for m in &t.metas {
            let mut motifs: Vec<_> = m.subcategories.iter().map(|s| s.motif).collect();
            motifs.sort();
            motifs.dedup();
            assert_eq!(motifs.len(), 4);
        }
    }
}
