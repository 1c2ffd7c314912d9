//! Similarity matrices, top-k selection and Recall@K.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use crate::backbone::{cosine, JointEmbedding};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "I2T",
            Direction::TextToImage => "T2I",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// Row-major `query_ids.len() × entry_ids.len()` cosines.
    pub scores: Vec<f64>,
    pub query_ids: Vec<String>,
    pub entry_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(scores: Vec<f64>, query_ids: Vec<String>, entry_ids: Vec<String>) -> Result<Self> {
        if scores.len() != query_ids.len() * entry_ids.len() {
            return Err(Error::Shape(format!(
                "{} scores for {}×{} ids",
                scores.len(),
                query_ids.len(),
                entry_ids.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("similarity scores".into()));
        }
        Ok(Self {
            scores,
            query_ids,
            entry_ids,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_entries(&self) -> usize {
        self.entry_ids.len()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let n = self.n_entries();
        &self.scores[q * n..(q + 1) * n]
    }

    pub fn get(&self, q: usize, e: usize) -> f64 {
        self.scores[q * self.n_entries() + e]
    }

    /// Entries become queries.
    pub fn transpose(&self) -> Self {
        let (nq, ne) = (self.n_queries(), self.n_entries());
        let scores = (0..ne)
            .flat_map(|e| (0..nq).map(move |q| (q, e)))
            .map(|(q, e)| self.get(q, e))
            .collect();
        Self {
            scores,
            query_ids: self.entry_ids.clone(),
            entry_ids: self.query_ids.clone(),
        }
    }
}

/// Cosine between every query and every entry.
pub fn similarity_matrix<T: crate::tensor::Scalar>(
    queries: &[(String, JointEmbedding<T>)],
    entries: &[(String, JointEmbedding<T>)],
) -> Result<SimilarityMatrix> {
    if queries.is_empty() || entries.is_empty() {
        return Err(invalid("similarity needs at least one query and one entry"));
    }
    let mut scores = Vec::with_capacity(queries.len() * entries.len());
    for (_, q) in queries {
        for (_, e) in entries {
            scores.push(cosine(q.as_slice(), e.as_slice())?.to_f64().unwrap_or(f64::NAN));
        }
    }
    SimilarityMatrix::new(
        scores,
        queries.iter().map(|(id, _)| id.clone()).collect(),
        entries.iter().map(|(id, _)| id.clone()).collect(),
    )
}

/// Indices of the `k` largest values, best first; equal values keep index order.
pub fn topk(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return Err(invalid(format!("k={k} outside 1..={}", row.len())));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// 0-based rank of entry `target` in `row` under the top-k ordering.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall: BTreeMap<usize, f64>,
    /// Hits per K; `recall[K] = hits[K] / n_queries`.
    pub hits: BTreeMap<usize, usize>,
    pub n_queries: usize,
    pub n_entries: usize,
}

impl RetrievalReport {
    pub fn r_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Fraction of queries whose ground-truth entry ranks within the top K.
/// K values above the entry count are clamped to it.
pub fn recall_at_k(
    m: &SimilarityMatrix,
    ground_truth: &HashMap<String, String>,
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(invalid("K values must be positive"));
    }
    let entry_index: HashMap<&str, usize> = m.entry_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut ranks = Vec::with_capacity(m.n_queries());
    for (q, qid) in m.query_ids.iter().enumerate() {
        let gt = ground_truth
            .get(qid)
            .and_then(|e| entry_index.get(e.as_str()))
            .ok_or_else(|| Error::InvalidArgument(format!("query {qid} has no ground-truth entry")))?;
        ranks.push(rank_of(m.row(q), *gt));
    }
    let mut recall = BTreeMap::new();
    let mut hits = BTreeMap::new();
    for &k in ks {
        let kk = k.min(m.n_entries());
        let h = ranks.iter().filter(|&&r| r < kk).count();
        hits.insert(k, h);
        recall.insert(k, h as f64 / m.n_queries() as f64);
    }
    Ok(RetrievalReport {
        direction,
        recall,
        hits,
        n_queries: m.n_queries(),
        n_entries: m.n_entries(),
    })
}

/// Both directions for paired image/text embeddings sharing ids.
pub fn evaluate_pairs<T: crate::tensor::Scalar>(
    images: &[(String, JointEmbedding<T>)],
    texts: &[(String, JointEmbedding<T>)],
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let m = similarity_matrix(images, texts)?;
    let gt: HashMap<String, String> = images.iter().map(|(id, _)| (id.clone(), id.clone())).collect();
    let i2t = recall_at_k(&m, &gt, ks, Direction::ImageToText)?;
    let t2i = recall_at_k(&m.transpose(), &gt, ks, Direction::TextToImage)?;
    Ok((i2t, t2i))
}

pub const REPORT_CSV_HEADER: &str = "direction,K,recall,n_queries,n_entries";

pub fn write_report_rows<W: Write>(out: &mut W, reports: &[RetrievalReport]) -> Result<()> {
    for r in reports {
        for (k, v) in &r.recall {
            writeln!(out, "{},{k},{v:.6},{},{}", r.direction, r.n_queries, r.n_entries)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    fn diag_gt(n: usize) -> HashMap<String, String> {
        ids(n).into_iter().map(|i| (i.clone(), i)).collect()
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk(&[0.5, 0.5], 1).unwrap(), vec![0]);
        assert!(topk(&[0.5], 0).is_err());
        assert!(topk(&[0.5], 2).is_err());
    }

    #[test]
    fn identity_basis() {
        let basis: Vec<(String, JointEmbedding<f64>)> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 1.0;
                (format!("x{i}"), JointEmbedding(v))
            })
            .collect();
        let m = similarity_matrix(&basis, &basis).unwrap();
        for q in 0..3 {
            for e in 0..3 {
                assert_eq!(m.get(q, e), if q == e { 1.0 } else { 0.0 });
            }
        }
        let r = recall_at_k(&m, &diag_gt(3), &[1], Direction::ImageToText).unwrap();
        assert_eq!(r.r_at(1), 1.0);
    }

    #[test]
    fn anti_diagonal_worst_case() {
        let n = 4;
        let scores = (0..n * n).map(|i| if i / n == i % n { -1.0 } else { 1.0 }).collect();
        let m = SimilarityMatrix::new(scores, ids(n), ids(n)).unwrap();
        let r = recall_at_k(&m, &diag_gt(n), &[1, n], Direction::ImageToText).unwrap();
        assert_eq!(r.r_at(1), 0.0);
        assert_eq!(r.r_at(n), 1.0);
    }

    #[test]
    fn missing_ground_truth() {
        let m = SimilarityMatrix::new(vec![1.0], ids(1), ids(1)).unwrap();
        assert!(recall_at_k(&m, &HashMap::new(), &[1], Direction::ImageToText).is_err());
    }

    #[test]
    fn rank_agrees_with_topk() {
        let row = [0.3, 0.7, 0.3, 0.1, 0.7];
        for t in 0..row.len() {
            let r = rank_of(&row, t);
            assert_eq!(topk(&row, row.len()).unwrap()[r], t);
        }
    }

    #[test]
    fn csv_rows() {
        let m = SimilarityMatrix::new(vec![1.0, 0.0, 0.0, 1.0], ids(2), ids(2)).unwrap();
        let r = recall_at_k(&m, &diag_gt(2), &[1, 5], Direction::TextToImage).unwrap();
        let mut buf = Vec::new();
        write_report_rows(&mut buf, &[r]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "T2I,1,1.000000,2,2\nT2I,5,1.000000,2,2\n");
    }
}
