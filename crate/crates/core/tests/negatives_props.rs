use dcar_core::category::{gen_negatives, generate_all, negatives_from_jsonl, negatives_to_jsonl, NegativeKind};
use dcar_core::dataset::{gen_dataset, gen_taxonomy, parse_caption, CaptionRecord, Taxonomy};
use proptest::prelude::*;

fn fixture() -> (Taxonomy, Vec<CaptionRecord>) {
    let tax = gen_taxonomy(3, 4, 21).unwrap();
    let records = gen_dataset(&tax, 5, 1, 4).unwrap().records;
    (tax, records)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negatives_are_typed_correctly(idx in 0usize..60, q in 0i64..12, seed in any::<u64>()) {
        let (tax, records) = fixture();
        let r = &records[idx % records.len()];
        let negs = gen_negatives(r, &tax, q, seed).unwrap();
        prop_assert_eq!(negs.len(), q as usize);
        let siblings = tax.siblings(&r.subcategory);
        for (j, n) in negs.iter().enumerate() {
            prop_assert_eq!(&n.source_id, &r.id);
            let p = parse_caption(&n.text).unwrap();
            prop_assert_eq!(&p.meta_category, &r.meta_category);
            match n.kind {
                NegativeKind::CategorySwap => {
                    prop_assert_eq!(j % 2, 0);
                    prop_assert!(siblings.contains(&p.subcategory.as_str()));
                    prop_assert_eq!(&p.attributes, &r.attributes);
                }
                NegativeKind::AttributeSwap => {
                    prop_assert_eq!(j % 2, 1);
                    prop_assert_eq!(&p.subcategory, &r.subcategory);
                    let changed = p.attributes.iter().filter(|(k, v)| r.attributes[*k] != **v).count();
                    prop_assert_eq!(changed, 1);
                }
            }
            prop_assert_ne!(&n.text, &r.caption);
        }
    }

    #[test]
    fn negatives_are_deterministic(seed in any::<u64>()) {
        let (tax, records) = fixture();
        let a = generate_all(&records[..6], &tax, 4, seed).unwrap();
        let b = generate_all(&records[..6], &tax, 4, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(negatives_from_jsonl(&negatives_to_jsonl(&a).unwrap()).unwrap(), a);
    }
}

#[test]
fn siblings_are_not_repeated_before_exhaustion() {
    let (tax, records) = fixture();
    let r = &records[0];
    let n_sib = tax.siblings(&r.subcategory).len();
    let negs = gen_negatives(r, &tax, 2 * n_sib as i64, 5).unwrap();
    let mut swaps: Vec<&str> = negs
        .iter()
        .filter(|n| n.kind == NegativeKind::CategorySwap)
        .map(|n| n.text.as_str())
        .collect();
    swaps.sort();
    swaps.dedup();
    assert_eq!(swaps.len(), n_sib);
}

#[test]
fn negative_q_rejected() {
    let (tax, records) = fixture();
    assert!(gen_negatives(&records[0], &tax, -1, 0).is_err());
}
