use dcar_core::backbone::JointEmbedding;
use dcar_core::category::{category_weight, loss_cate, CaptionKind, CateSample, NegativeKind};
use dcar_core::tensor::Mat;
use dcar_core::training::{loss_con, loss_con_ratio_form, loss_total};
use proptest::prelude::*;

fn unit_rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n).prop_filter("non-zero rows", |rows| {
        rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3)
    })
}

fn embs(rows: &[Vec<f64>]) -> Vec<JointEmbedding<f64>> {
    rows.iter().map(|r| JointEmbedding(r.clone())).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Direct evaluation of the symmetric temperature softmax loss.
fn con_oracle(im: &[Vec<f64>], tx: &[Vec<f64>], tau: f64) -> f64 {
    let n = im.len();
    let l: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cos(&im[i], &tx[j]) / tau).collect()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| l[i][j].exp()).sum();
        let col: f64 = (0..n).map(|j| l[j][i].exp()).sum();
        total += (row.ln() - l[i][i]) + (col.ln() - l[i][i]);
    }
    total / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn con_matches_direct_formula(
        (im, tx) in (2usize..7).prop_flat_map(|n| (unit_rows(n, 5), unit_rows(n, 5))),
        tau in 0.05f64..2.0,
    ) {
        let got = loss_con(&embs(&im), &embs(&tx), tau).unwrap();
        let want = con_oracle(&im, &tx, tau);
        prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn con_permutation_equivariant(
        (im, tx, perm) in (2usize..8).prop_flat_map(|n| {
            (unit_rows(n, 4), unit_rows(n, 4), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }),
    ) {
        let a = loss_con(&embs(&im), &embs(&tx), 0.07).unwrap();
        let pim: Vec<_> = perm.iter().map(|&i| im[i].clone()).collect();
        let ptx: Vec<_> = perm.iter().map(|&i| tx[i].clone()).collect();
        let b = loss_con(&embs(&pim), &embs(&ptx), 0.07).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ratio_form_ignores_tau((im, tx) in (2usize..6).prop_flat_map(|n| (unit_rows(n, 4), unit_rows(n, 4)))) {
        let (im, tx) = (embs(&im), embs(&tx));
        let base = loss_con_ratio_form(&im, &tx, 1.0).unwrap();
        for tau in [0.05, 20.0] {
            prop_assert!((loss_con_ratio_form(&im, &tx, tau).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn cate_alpha_zero_is_unweighted(
        rows in unit_rows(5, 4),
        image in prop::collection::vec(0.1f64..1.0, 4),
        kinds in prop::collection::vec(prop::bool::ANY, 4),
        tau in 0.05f64..1.0,
    ) {
        let kinds: Vec<NegativeKind> = kinds
            .into_iter()
            .map(|b| if b { NegativeKind::CategorySwap } else { NegativeKind::AttributeSwap })
            .collect();
        let texts = Mat::from_vec(5, 4, rows.concat()).unwrap();
        let got = loss_cate(&[CateSample { texts: &texts, kinds: &kinds, image: &image }], 0.0, tau).unwrap();
        let l: Vec<f64> = rows.iter().map(|r| cos(r, &image) / tau).collect();
        let denom: f64 = l.iter().map(|v| v.exp()).sum();
        let want = -(l[0].exp() / denom).ln();
        prop_assert!((got - want).abs() < 1e-7);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn cate_decreases_with_alpha_for_category_swaps(rows in unit_rows(4, 4), image in prop::collection::vec(0.1f64..1.0, 4)) {
        let kinds = [NegativeKind::CategorySwap; 3];
        let texts = Mat::from_vec(4, 4, rows.concat()).unwrap();
        let loss = |alpha| loss_cate(&[CateSample { texts: &texts, kinds: &kinds, image: &image }], alpha, 0.07).unwrap();
        let (l0, l5, l1) = (loss(0.0), loss(0.5), loss(1.0));
        prop_assert!(l0 > l5 && l5 > l1, "{l0} {l5} {l1}");
    }

    #[test]
    fn total_is_linear(lcon in 0.0f64..10.0, lcate in 0.0f64..10.0, l1 in 0.0f64..1.0) {
        prop_assert_eq!(loss_total(lcon, lcate, l1, 0.0), l1 * lcon);
        prop_assert!((loss_total(lcon, lcate, l1, 1.0 - l1) - (l1 * lcon + (1.0 - l1) * lcate)).abs() < 1e-12);
    }
}

#[test]
fn single_pair_and_empty_negatives_are_zero() {
    let one = embs(&[vec![0.3, -0.2, 0.9]]);
    let other = embs(&[vec![-0.5, 0.1, 0.4]]);
    assert_eq!(loss_con(&one, &other, 0.07).unwrap(), 0.0);
    let texts = Mat::from_vec(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
    let image = [1.0, 0.0, 0.0];
    let l = loss_cate(&[CateSample { texts: &texts, kinds: &[], image: &image }], 0.5, 0.07).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn category_weights() {
    assert_eq!(category_weight(CaptionKind::Positive, 0.5).unwrap(), 1.5);
    assert_eq!(category_weight(CaptionKind::Negative(NegativeKind::AttributeSwap), 0.5).unwrap(), 1.5);
    assert_eq!(category_weight(CaptionKind::Negative(NegativeKind::CategorySwap), 0.5).unwrap(), 1.0);
    assert!(category_weight(CaptionKind::Positive, -0.1).is_err());
}

#[test]
fn temperature_form_depends_on_tau() {
    let im = embs(&[vec![1.0, 0.2], vec![0.1, 1.0], vec![-0.7, 0.4]]);
    let tx = embs(&[vec![0.9, 0.1], vec![0.3, 0.8], vec![-0.2, 0.9]]);
    let a = loss_con(&im, &tx, 0.05).unwrap();
    let b = loss_con(&im, &tx, 1.0).unwrap();
    assert!((a - b).abs() > 1e-3);
}
