use std::collections::{BTreeMap, HashSet};

use dcar_core::dataset::{
    few_shot_split, gen_dataset, gen_taxonomy, generate, parse_caption, select, DatasetConfig, Split,
};
use proptest::prelude::*;

fn small_config() -> DatasetConfig {
    DatasetConfig {
        base_metas: 2,
        downstream_metas: 2,
        subs_per_meta: 3,
        per_sub: 12,
        ..Default::default()
    }
}

#[test]
fn default_manifest_counts() {
    let cfg = DatasetConfig::default();
    let (tax, m) = generate(&cfg).unwrap();
    assert_eq!(tax.metas.len(), 10);
    assert_eq!(m.records.len(), 10 * 4 * 40);
    assert_eq!(select(&m.records, Split::PretrainBase).len(), 800);
    assert!(!m.duplicate_attributes);
}

#[test]
fn ids_unique_and_captions_parse_back() {
    let (_, m) = generate(&small_config()).unwrap();
    let ids: HashSet<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids.len(), m.records.len());
    for r in &m.records {
        let p = parse_caption(&r.caption).unwrap();
        assert_eq!(p.subcategory, r.subcategory);
        assert_eq!(p.meta_category, r.meta_category);
        assert_eq!(p.attributes, r.attributes);
    }
}

#[test]
fn attribute_tuples_unique_within_subcategory() {
    let (_, m) = generate(&DatasetConfig::default()).unwrap();
    let mut seen: BTreeMap<&str, HashSet<String>> = BTreeMap::new();
    for r in &m.records {
        assert!(seen.entry(&r.subcategory).or_default().insert(format!("{:?}", r.attributes)));
    }
}

#[test]
fn base_and_downstream_categories_disjoint() {
    let (_, m) = generate(&DatasetConfig::default()).unwrap();
    let base: HashSet<&str> = m
        .records
        .iter()
        .filter(|r| r.split == Split::PretrainBase)
        .map(|r| r.meta_category.as_str())
        .collect();
    assert!(m
        .records
        .iter()
        .filter(|r| r.split != Split::PretrainBase)
        .all(|r| !base.contains(r.meta_category.as_str())));
}

#[test]
fn siblings_with_identical_attributes_render_differently() {
    let tax = gen_taxonomy(3, 4, 5).unwrap();
    let m = gen_dataset(&tax, 1, 0, 9).unwrap();
    for meta in &tax.metas {
        let subs: Vec<_> = m.records.iter().filter(|r| r.meta_category == meta.name).collect();
        for a in &subs {
            for b in &subs {
                if a.subcategory == b.subcategory {
                    continue;
                }
                let mut twin = (*b).clone();
                twin.attributes = a.attributes.clone();
                twin.image_seed = a.image_seed;
                let ia = a.render(&tax).unwrap();
                let ib = twin.render(&tax).unwrap();
                let differing = ia.pixels().iter().zip(ib.pixels()).filter(|(x, y)| x != y).count();
                assert!(differing > 0, "{} and {} render identically", a.subcategory, b.subcategory);
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small_config()).unwrap();
    let b = generate(&small_config()).unwrap();
    assert_eq!(a, b);
    let c = generate(&DatasetConfig {
        dataset_seed: 12,
        ..small_config()
    })
    .unwrap();
    assert_ne!(a.1, c.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn few_shot_split_partitions_each_subcategory(shots in 1usize..12, seed in any::<u64>()) {
        let (_, m) = generate(&small_config()).unwrap();
        let out = few_shot_split(&m.records, shots, seed).unwrap();
        prop_assert_eq!(out.len(), m.records.len());
        let mut per: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
        for (before, after) in m.records.iter().zip(&out) {
            prop_assert_eq!(&before.id, &after.id);
            if before.split == Split::PretrainBase {
                prop_assert_eq!(after.split, Split::PretrainBase);
                continue;
            }
            let c = per.entry(&after.subcategory).or_default();
            match after.split {
                Split::Train => c[0] += 1,
                Split::Val => c[1] += 1,
                Split::Test => c[2] += 1,
                Split::PretrainBase => prop_assert!(false, "downstream record moved to base"),
            }
        }
        for c in per.values() {
            prop_assert_eq!(c[0], shots);
            prop_assert_eq!(c[1], (12 - shots) / 4);
            prop_assert_eq!(c[0] + c[1] + c[2], 12);
        }
    }

    #[test]
    fn too_many_shots_rejected(extra in 0usize..4) {
        let (_, m) = generate(&small_config()).unwrap();
        prop_assert!(few_shot_split(&m.records, 12 + extra, 0).is_err());
    }
}
