//! Exhaustive cosine retrieval over a candidate pool and the Recall@K /
//! Rmean metrics.
//!
//! Ranks are 1-based and count only candidates scoring strictly higher than
//! the target, so exact ties resolve in the target's favour.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::composers::ComposerKind;
use crate::datasets::EmbeddingTable;
use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::tensorgrad::{dot, DenseVec};

/// Anything that can embed candidates and composed queries.
pub trait RetrievalModel: Sync {
    fn composer_kind(&self) -> ComposerKind;
    fn embed_candidate(&self, features: &DenseVec) -> Result<Embedding>;
    fn embed_query(&self, reference: &DenseVec, text: &DenseVec) -> Result<Embedding>;
}

impl<M: RetrievalModel + ?Sized> RetrievalModel for &M {
    fn composer_kind(&self) -> ComposerKind {
        (**self).composer_kind()
    }

    fn embed_candidate(&self, features: &DenseVec) -> Result<Embedding> {
        (**self).embed_candidate(features)
    }

    fn embed_query(&self, reference: &DenseVec, text: &DenseVec) -> Result<Embedding> {
        (**self).embed_query(reference, text)
    }
}

/// Ordered candidate ids with their embeddings.
#[derive(Clone, Debug)]
pub struct CandidateIndex {
    ids: Vec<String>,
    embeddings: Vec<Embedding>,
    position: HashMap<String, usize>,
}

impl CandidateIndex {
    pub fn new(ids: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput(
                "candidate index must be non-empty".into(),
            ));
        }
        if ids.len() != embeddings.len() {
            return Err(Error::shape("candidate index", ids.len(), embeddings.len()));
        }
        let dim = embeddings[0].dim();
        if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(Error::shape("candidate index", dim, e.dim()));
        }
        let mut position = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if position.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate candidate id `{id}`")));
            }
        }
        Ok(Self {
            ids,
            embeddings,
            position,
        })
    }

    /// Encodes every row of `table` with the model's candidate encoder.
    pub fn encode<M: RetrievalModel + ?Sized>(model: &M, table: &EmbeddingTable) -> Result<Self> {
        let embeddings = table
            .rows()
            .iter()
            .map(|f| model.embed_candidate(f))
            .collect::<Result<_>>()?;
        Self::new(table.ids().to_vec(), embeddings)
    }

    /// Encodes the listed ids, in order, looking features up in `table`.
    pub fn encode_subset<M: RetrievalModel + ?Sized>(
        model: &M,
        table: &EmbeddingTable,
        ids: &[String],
    ) -> Result<Self> {
        let embeddings = ids
            .iter()
            .map(|id| {
                let f = table.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
                model.embed_candidate(f)
            })
            .collect::<Result<_>>()?;
        Self::new(ids.to_vec(), embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn contains(&self, id: &str) -> bool {
        self.position.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    pub fn score_all(&self, q: &Embedding) -> Result<Vec<f64>> {
        if q.dim() != self.dim() {
            return Err(Error::shape("score_all", self.dim(), q.dim()));
        }
        Ok(self
            .embeddings
            .iter()
            .map(|e| dot(q.as_slice(), e.as_slice()))
            .collect())
    }

    /// `1 + |{c : score(c) > score(target)}|`.
    pub fn rank_of(&self, q: &Embedding, target_id: &str) -> Result<usize> {
        let t = self
            .position(target_id)
            .ok_or_else(|| Error::UnknownId(target_id.to_owned()))?;
        let scores = self.score_all(q)?;
        let target = scores[t];
        Ok(1 + scores.iter().filter(|&&s| s > target).count())
    }

    /// The `k` best candidates by descending score; ties keep index order.
    pub fn top_k(&self, q: &Embedding, k: usize) -> Result<Vec<(String, f64)>> {
        let scores = self.score_all(q)?;
        // Max-heap on "worse", so the root is the weakest of the kept k.
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        for (index, &score) in scores.iter().enumerate() {
            heap.push(Ranked { score, index });
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut kept = heap.into_sorted_vec();
        kept.truncate(k);
        Ok(kept
            .into_iter()
            .map(|r| (self.ids[r.index].clone(), r.score))
            .collect())
    }

    pub fn rank_result(
        &self,
        query_id: &str,
        q: &Embedding,
        target_id: &str,
        k: usize,
    ) -> Result<RankResult> {
        Ok(RankResult {
            query_id: query_id.to_owned(),
            rank: self.rank_of(q, target_id)?,
            top_k: self.top_k(q, k)?,
        })
    }
}

/// Orders by descending score, then ascending index: `a < b` when `a` ranks
/// ahead of `b`.
#[derive(Clone, Copy, Debug)]
struct Ranked {
    score: f64,
    index: usize,
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    pub query_id: String,
    pub rank: usize,
    pub top_k: Vec<(String, f64)>,
}

pub fn score_all(q: &Embedding, index: &CandidateIndex) -> Result<Vec<f64>> {
    index.score_all(q)
}

pub fn rank_of(q: &Embedding, index: &CandidateIndex, target_id: &str) -> Result<usize> {
    index.rank_of(q, target_id)
}

/// Fraction of ranks `<= k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidInput("recall over no queries".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn rmean(recalls: &[f64]) -> Result<f64> {
    if recalls.is_empty() {
        return Err(Error::InvalidInput("rmean of no recalls".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Two decimals, as in published recall tables.
pub fn format_percent(value: f64) -> String {
    format!("{value:.2}")
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput(
            "spearman needs at least two points".into(),
        ));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("spearman of a constant sequence".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub k: usize,
    /// Percentage in `[0, 100]`.
    pub value: f64,
}

/// Recall@K rows plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub rmean: f64,
    pub queries: usize,
}

pub const TIE_POLICY: &str = "ties-favour-target";

impl MetricsReport {
    /// Builds R@K rows for one split from per-query ranks.
    pub fn from_ranks(split: &str, ranks: &[usize], ks: &[usize]) -> Result<Self> {
        if ks.is_empty() {
            return Err(Error::InvalidInput("no K values".into()));
        }
        let rows = ks
            .iter()
            .map(|&k| {
                Ok(MetricRow {
                    split: split.to_owned(),
                    k,
                    value: 100.0 * recall_at_k(ranks, k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rmean = rmean(&rows.iter().map(|r| r.value).collect::<Vec<_>>())?;
        Ok(Self {
            rows,
            rmean,
            queries: ranks.len(),
        })
    }

    pub fn recall(&self, split: &str, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.k == k)
            .map(|r| r.value)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# metrics v1 tie_policy={TIE_POLICY} queries={}\n",
            self.queries
        );
        for r in &self.rows {
            let _ = writeln!(out, "{}\tR@{}\t{}", r.split, r.k, format_percent(r.value));
        }
        let _ = writeln!(out, "Rmean\t{}", format_percent(self.rmean));
        out
    }

    /// Same content as [`Self::to_text`], as JSON with values rounded to the
    /// reported two decimals.
    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        map.insert("version".into(), 1.into());
        map.insert("tie_policy".into(), TIE_POLICY.into());
        map.insert("queries".into(), self.queries.into());
        for r in &self.rows {
            map.insert(
                format!("{}/R@{}", r.split, r.k),
                serde_json::Value::String(format_percent(r.value)),
            );
        }
        map.insert("Rmean".into(), format_percent(self.rmean).into());
        let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(map))
            .expect("metrics serialise");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(x: &[f64]) -> Embedding {
        Embedding::normalize(x).unwrap()
    }

    fn index(rows: &[&[f64]]) -> CandidateIndex {
        CandidateIndex::new(
            (0..rows.len()).map(|i| format!("c{i}")).collect(),
            rows.iter().map(|r| e(r)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn score_examples() {
        let idx = index(&[&[1.0, 2.0], &[0.5, -1.0]]);
        assert!((score_all(&e(&[1.0, 2.0]), &idx).unwrap()[0] - 1.0).abs() < 1e-15);
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(score_all(&e(&[1.0, 0.0]), &idx).unwrap(), vec![1.0, 0.0]);
        assert!(score_all(&e(&[1.0, 0.0, 0.0]), &idx).is_err());
    }

    #[test]
    fn score_matches_pairwise_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let idx = CandidateIndex::new(
            (0..5).map(|i| i.to_string()).collect(),
            raw.iter().map(|r| e(r)).collect(),
        )
        .unwrap();
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores = score_all(&e(&q), &idx).unwrap();
        for (s, r) in scores.iter().zip(&raw) {
            let want = crate::tensorgrad::cosine_sim(
                &DenseVec::new(q.clone()).unwrap(),
                &DenseVec::new(r.clone()).unwrap(),
            )
            .unwrap();
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_examples() {
        let idx = index(&[&[1.0, 0.0]]);
        assert_eq!(rank_of(&e(&[0.0, 1.0]), &idx, "c0").unwrap(), 1);
        assert!(rank_of(&e(&[0.0, 1.0]), &idx, "nope").is_err());

        // Candidates at cosine 0.95, 0.9 (target), 0.8, 0.7 from q = x-axis.
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let rows: Vec<Vec<f64>> = [0.95, 0.9, 0.8, 0.7].iter().map(|&c| at(c)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        assert_eq!(rank_of(&e(&[1.0, 0.0]), &index(&refs), "c1").unwrap(), 2);
    }

    #[test]
    fn ties_favour_target_and_top_k_keeps_index_order() {
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let q = e(&[1.0, 0.0]);
        assert_eq!(rank_of(&q, &idx, "c3").unwrap(), 1);
        let top: Vec<String> = idx
            .top_k(&q, 3)
            .unwrap()
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        assert_eq!(top, ["c0", "c2", "c3"]);
        assert_eq!(idx.top_k(&q, 10).unwrap().len(), 4);
    }

    #[test]
    fn rejects_duplicate_ids() {
        let r = CandidateIndex::new(vec!["a".into(), "a".into()], vec![e(&[1.0]), e(&[1.0])]);
        assert!(r.is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 5, 20], 20).unwrap(), 1.0);
        assert!((recall_at_k(&[1, 5, 20], 10).unwrap() - 0.6667).abs() < 1e-4);
        assert_eq!(recall_at_k(&[11, 11], 10).unwrap(), 0.0);
        assert!(recall_at_k(&[], 10).is_err());
        assert!(recall_at_k(&[1], 0).is_err());
    }

    #[test]
    fn rmean_examples() {
        assert_eq!(format_percent(rmean(&[41.98, 67.54]).unwrap()), "54.76");
        assert_eq!(
            format_percent(rmean(&[19.53, 55.65, 80.58]).unwrap()),
            "51.92"
        );
        assert_eq!(rmean(&[12.5]).unwrap(), 12.5);
        assert!(rmean(&[]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks with a tie: a = [1, 2.5, 2.5, 4]
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let want = 4.5 / (4.5f64 * 5.0).sqrt();
        assert!((r - want).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_formats() {
        let rep = MetricsReport::from_ranks("original", &[1, 5, 20, 60], &[10, 50]).unwrap();
        assert_eq!(
            rep.to_text(),
            "# metrics v1 tie_policy=ties-favour-target queries=4\n\
             original\tR@10\t50.00\noriginal\tR@50\t75.00\nRmean\t62.50\n"
        );
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(json["original/R@10"], "50.00");
        assert_eq!(json["Rmean"], "62.50");
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

        proptest! {
            #[test]
            fn recall_is_monotone_in_k(ranks in proptest::collection::vec(1usize..100, 1..50), k in 1usize..99) {
                prop_assert!(recall_at_k(&ranks, k).unwrap() <= recall_at_k(&ranks, k + 1).unwrap());
            }

            #[test]
            fn scores_are_permutation_equivariant(
                rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 2..12),
                seed in any::<u64>(),
            ) {
                prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4));
                let n = rows.len();
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..n).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let base = CandidateIndex::new(
                    (0..n).map(|i| i.to_string()).collect(),
                    rows.iter().map(|r| e(r)).collect(),
                ).unwrap();
                let shuffled = CandidateIndex::new(
                    perm.iter().map(|i| i.to_string()).collect(),
                    perm.iter().map(|&i| e(&rows[i])).collect(),
                ).unwrap();
                let q = e(&[0.3, -0.2, 0.9]);
                let a = base.score_all(&q).unwrap();
                let b = shuffled.score_all(&q).unwrap();
                for (pos, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(a[i], b[pos]);
                }
            }

            #[test]
            fn irrelevant_candidate_keeps_rank(
                rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 2..12),
                t in 0usize..12,
            ) {
                prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4));
                let t = t % rows.len();
                let q = e(&[1.0, 0.0, 0.0]);
                let mut ids: Vec<String> = (0..rows.len()).map(|i| i.to_string()).collect();
                let mut embs: Vec<Embedding> = rows.iter().map(|r| e(r)).collect();
                let before = CandidateIndex::new(ids.clone(), embs.clone()).unwrap();
                let target = ids[t].clone();
                let r0 = before.rank_of(&q, &target).unwrap();
                let ts = before.score_all(&q).unwrap()[t];
                prop_assume!(ts > -0.999);
                // A candidate scoring strictly below the target.
                let c = ts - 0.001;
                ids.push("extra".into());
                embs.push(e(&[c, (1.0 - c * c).sqrt(), 0.0]));
                let after = CandidateIndex::new(ids, embs).unwrap();
                prop_assert_eq!(after.rank_of(&q, &target).unwrap(), r0);
            }
        }
    }
}
