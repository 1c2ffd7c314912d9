use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{tokenize, BackboneConfig, BackboneParams, Vocab};
use crate::category::gen_negatives;
use crate::dataset::{gen_dataset, gen_taxonomy};
use crate::error::{invalid, Result};

use super::step::{compute_gradients, evaluate_losses};
use super::{AdaptState, Pair, TrainConfig, TrainExample};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Batch size (at most 4).
    pub n: usize,
    /// Prompt length (at most 4).
    pub k: usize,
    /// Coordinates sampled from each trainable tensor.
    pub per_tensor: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n: 4,
            k: 4,
            per_tensor: 40,
            epsilon: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param: BTreeMap<String, f64>,
    pub rows: Vec<GradCheckRow>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient of the total loss with central
/// differences in 64-bit on a small synthetic batch. Token weights are
/// held at their forward values for the perturbed evaluations.
pub fn grad_check(cfg: &TrainConfig, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    if gc.n == 0 || gc.n > 4 || gc.k == 0 || gc.k > 4 {
        return Err(invalid("grad check runs on N ≤ 4 samples and k ≤ 4 prompts"));
    }
    if !(gc.epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    let cfg = TrainConfig {
        k: gc.k,
        ..cfg.clone()
    };
    cfg.validate()?;

    let taxonomy = gen_taxonomy(2, 3, gc.seed)?;
    let records = gen_dataset(&taxonomy, 2, 0, gc.seed)?.records;
    let vocab = Vocab::from_words(taxonomy.caption_words());
    let mut bcfg = BackboneConfig::with_vocab(vocab.len());
    bcfg.max_prompts = gc.k;
    let mut backbone = BackboneParams::<f64>::init(bcfg, gc.seed)?;
    backbone.freeze();
    let examples: Vec<TrainExample> = records
        .iter()
        .step_by(records.len() / gc.n)
        .take(gc.n)
        .enumerate()
        .map(|(i, r)| {
            let negatives = gen_negatives(r, &taxonomy, cfg.q, gc.seed + i as u64)?
                .into_iter()
                .map(|n| (tokenize(&n.text, &vocab, backbone.config.max_len), n.kind))
                .collect();
            Ok(TrainExample {
                pair: Pair {
                    id: r.id.clone(),
                    caption: tokenize(&r.caption, &vocab, backbone.config.max_len),
                    image: r.render(&taxonomy)?,
                },
                negatives,
            })
        })
        .collect::<Result<_>>()?;
    let batch: Vec<&TrainExample> = examples.iter().collect();

    let state = AdaptState::<f64>::init(&cfg, &backbone.config)?;
    let analytic = compute_gradients(&backbone, &state, &batch, &cfg, None)?;
    let frozen = analytic.weights.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ 0xC0FFEE);
    let mut rows = Vec::new();
    let names: Vec<(&'static str, usize)> = state.named_tensors().iter().map(|(n, m)| (*n, m.len())).collect();
    for (name, len) in names {
        let picks = sample(&mut rng, len, gc.per_tensor.min(len)).into_vec();
        let grad = analytic.grads.get(name).expect("gradient for every trainable tensor");
        for idx in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = state.clone();
                for (n, m) in s.named_tensors_mut() {
                    if n == name {
                        m.data_mut()[idx] += delta;
                    }
                }
                Ok(evaluate_losses(&backbone, &s, &batch, &cfg, Some(&frozen))?.total)
            };
            let numeric = (eval(gc.epsilon)? - eval(-gc.epsilon)?) / (2.0 * gc.epsilon);
            let a = grad.data()[idx];
            rows.push(GradCheckRow {
                name: name.to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    let mut per_param: BTreeMap<String, f64> = BTreeMap::new();
    for r in &rows {
        let e = per_param.entry(r.name.clone()).or_insert(0.0);
        *e = e.max(r.rel_err);
    }
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_param,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Toggles;

    #[test]
    fn full_objective_passes_on_a_sample() {
        let gc = GradCheckConfig { per_tensor: 6, ..Default::default() };
        let t = std::time::Instant::now();
        let r = grad_check(&TrainConfig::default(), &gc).unwrap();
        eprintln!("grad check {:?} in {:?}", r.per_param, t.elapsed());
        assert_eq!(r.per_param.len(), 7);
        assert!(r.max_rel_err < 1e-4, "{:?}", r.per_param);
    }

    #[test]
    fn nothing_trainable_is_vacuous() {
        let cfg = TrainConfig { toggles: Toggles::NONE, ..Default::default() };
        let r = grad_check(&cfg, &GradCheckConfig::default()).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn relative_error_formula() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }
}
