use std::collections::HashMap;

use dcar_core::backbone::JointEmbedding;
use dcar_core::retrieval::{evaluate_pairs, rank_of, recall_at_k, topk, Direction, SimilarityMatrix};
use proptest::prelude::*;

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Counts hits by sorting each row best-first with a stable sort.
fn sort_oracle(scores: &[f64], n_q: usize, n_e: usize, gt: &[usize], k: usize) -> usize {
    (0..n_q)
        .filter(|&q| {
            let row = &scores[q * n_e..(q + 1) * n_e];
            let mut order: Vec<usize> = (0..n_e).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            order.iter().take(k).any(|&e| e == gt[q])
        })
        .count()
}

fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(nq, ne)| {
        (
            Just(nq),
            Just(ne),
            // Coarse values so ties are common.
            prop::collection::vec((-4i32..=4).prop_map(|v| v as f64 / 4.0), nq * ne),
            prop::collection::vec(0..ne, nq),
        )
    })
}

proptest! {
    #[test]
    fn recall_matches_sort_oracle((nq, ne, scores, gt) in matrix_strategy(), k in 1usize..15) {
        let q = ids("q", nq);
        let e = ids("e", ne);
        let truth: HashMap<String, String> = (0..nq).map(|i| (q[i].clone(), e[gt[i]].clone())).collect();
        let m = SimilarityMatrix::new(scores.clone(), q, e).unwrap();
        let r = recall_at_k(&m, &truth, &[k], Direction::ImageToText).unwrap();
        let hits = sort_oracle(&scores, nq, ne, &gt, k.min(ne));
        prop_assert_eq!(r.hits[&k], hits);
        prop_assert_eq!(r.r_at(k), hits as f64 / nq as f64);
    }

    #[test]
    fn recall_non_decreasing_and_complete((nq, ne, scores, gt) in matrix_strategy()) {
        let q = ids("q", nq);
        let e = ids("e", ne);
        let truth: HashMap<String, String> = (0..nq).map(|i| (q[i].clone(), e[gt[i]].clone())).collect();
        let m = SimilarityMatrix::new(scores, q, e).unwrap();
        let ks: Vec<usize> = (1..=ne).collect();
        let r = recall_at_k(&m, &truth, &ks, Direction::TextToImage).unwrap();
        for w in ks.windows(2) {
            prop_assert!(r.r_at(w[0]) <= r.r_at(w[1]));
        }
        prop_assert_eq!(r.r_at(ne), 1.0);
    }

    #[test]
    fn topk_matches_stable_sort(row in prop::collection::vec((-8i32..=8).prop_map(|v| v as f64), 1..30), k in 1usize..30) {
        let k = k.min(row.len());
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        prop_assert_eq!(topk(&row, k).unwrap(), order[..k].to_vec());
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(rank_of(&row, i), pos);
        }
    }

    #[test]
    fn transpose_swaps_directions(vals in prop::collection::vec(-1.0f64..1.0, 12)) {
        let m = SimilarityMatrix::new(vals, ids("a", 3), ids("b", 4)).unwrap();
        let t = m.transpose();
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(m.get(i, j), t.get(j, i));
            }
        }
        prop_assert_eq!(t.transpose(), m);
    }
}

#[test]
fn topk_rejects_bad_k() {
    assert!(topk(&[1.0, 2.0], 0).is_err());
    assert!(topk(&[1.0, 2.0], 3).is_err());
}

#[test]
fn identical_embeddings_retrieve_perfectly() {
    let embs: Vec<(String, JointEmbedding<f64>)> = (0..6)
        .map(|i| {
            let mut v = vec![0.0; 6];
            v[i] = 1.0;
            (format!("p{i}"), JointEmbedding(v))
        })
        .collect();
    let (i2t, t2i) = evaluate_pairs(&embs, &embs, &[1, 5, 10]).unwrap();
    for r in [&i2t, &t2i] {
        assert_eq!(r.r_at(1), 1.0);
        assert_eq!(r.r_at(10), 1.0);
        assert_eq!(r.n_entries, 6);
    }
}

#[test]
fn missing_ground_truth_is_an_error() {
    let m = SimilarityMatrix::new(vec![0.0; 4], ids("q", 2), ids("e", 2)).unwrap();
    let truth = HashMap::from([("q0".to_string(), "e0".to_string())]);
    assert!(recall_at_k(&m, &truth, &[1], Direction::ImageToText).is_err());
}
