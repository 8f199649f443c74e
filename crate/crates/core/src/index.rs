//! Exact cosine search over a fixed gallery of clip embeddings.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_normalize, ClipId, Embedding};
use crate::error::{CvrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub clip_id: ClipId,
    pub score: f64,
}

/// Clamped dot product of unit vectors. Adding zero folds `-0.0` into `0.0`
/// so orthogonal clips tie under [`rank_order`].
fn cosine_score(a: &[f32], b: &[f32]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0) + 0.0
}

/// Descending score first, then ascending clip id.
pub fn rank_order(a: &ScoredEntry, b: &ScoredEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.clip_id.cmp(&b.clip_id))
}

/// An ordered list of scored clips, best first.
///
/// Lists produced by a single scoring pass are sorted under [`rank_order`].
/// Two-stage rankings are the concatenation of two such blocks, each sorted
/// on its own scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList {
    entries: Vec<ScoredEntry>,
}

impl RankedList {
    /// Sorts `entries` under [`rank_order`].
    pub fn from_scores(mut entries: Vec<ScoredEntry>) -> Self {
        entries.sort_by(rank_order);
        RankedList { entries }
    }

    /// Concatenates already-ranked blocks, dropping ids already seen.
    pub fn concat(blocks: impl IntoIterator<Item = RankedList>) -> Self {
        let mut seen = HashSet::new();
        let entries = blocks
            .into_iter()
            .flat_map(|b| b.entries)
            .filter(|e| seen.insert(e.clip_id.clone()))
            .collect();
        RankedList { entries }
    }

    pub fn entries(&self) -> &[ScoredEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> Option<&ScoredEntry> {
        self.entries.first()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ClipId> + '_ {
        self.entries.iter().map(|e| &e.clip_id)
    }

    /// Zero-based position of `id`.
    pub fn position(&self, id: &ClipId) -> Option<usize> {
        self.entries.iter().position(|e| &e.clip_id == id)
    }

    pub fn truncated(mut self, k: usize) -> Self {
        self.entries.truncate(k);
        self
    }

    pub fn is_rank_ordered(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| rank_order(&w[0], &w[1]) == Ordering::Less)
    }
}

/// Immutable gallery with vectors stored contiguously in id order.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    ids: Vec<ClipId>,
    vectors: Vec<f32>,
    dim: usize,
    lookup: HashMap<ClipId, usize>,
}

impl GalleryIndex {
    /// Builds an index, L2-normalizing every vector. Entries are stored sorted
    /// by clip id regardless of input order.
    pub fn build(records: impl IntoIterator<Item = (ClipId, Embedding)>) -> Result<Self> {
        let mut records: Vec<(ClipId, Embedding)> = records.into_iter().collect();
        let dim = records.first().ok_or(CvrError::EmptyGallery)?.1.dim();
        records.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = records.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(CvrError::DuplicateId(w[0].0.to_string()));
        }
        let mut ids = Vec::with_capacity(records.len());
        let mut vectors = Vec::with_capacity(records.len() * dim);
        for (id, e) in records {
            if e.dim() != dim {
                return Err(CvrError::DimMismatch {
                    expected: dim,
                    found: e.dim(),
                });
            }
            vectors.extend_from_slice(l2_normalize(&e)?.as_slice());
            ids.push(id);
        }
        let lookup = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        Ok(GalleryIndex {
            ids,
            vectors,
            dim,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[ClipId] {
        &self.ids
    }

    pub fn contains(&self, id: &ClipId) -> bool {
        self.lookup.contains_key(id)
    }

    /// The stored (normalized) vector for `id`.
    pub fn vector(&self, id: &ClipId) -> Option<&[f32]> {
        self.lookup.get(id).map(|&i| self.row(i))
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// A new index holding only `ids`. Unknown ids are an error.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a ClipId>) -> Result<GalleryIndex> {
        let records = ids
            .into_iter()
            .map(|id| {
                let v = self
                    .vector(id)
                    .ok_or_else(|| CvrError::MissingClip(id.to_string()))?;
                Ok((id.clone(), Embedding::new(v.to_vec())?))
            })
            .collect::<Result<Vec<_>>>()?;
        GalleryIndex::build(records)
    }

    fn normalized_query(&self, query: &Embedding) -> Result<Embedding> {
        if query.dim() != self.dim {
            return Err(CvrError::DimMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        l2_normalize(query)
    }

    fn score_all(&self, query: &Embedding, exclude: &HashSet<ClipId>) -> Result<Vec<ScoredEntry>> {
        let q = self.normalized_query(query)?;
        Ok(self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| !exclude.contains(*id))
            .map(|(i, id)| ScoredEntry {
                clip_id: id.clone(),
                score: cosine_score(self.row(i), q.as_slice()),
            })
            .collect())
    }

    /// The `k` best entries under [`rank_order`], skipping `exclude`.
    pub fn top_k(
        &self,
        query: &Embedding,
        k: usize,
        exclude: &HashSet<ClipId>,
    ) -> Result<RankedList> {
        let mut scored = self.score_all(query, exclude)?;
        if k == 0 {
            return Ok(RankedList::default());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        Ok(RankedList::from_scores(scored))
    }

    /// Full ranking of the gallery by a complete sort. Serves as the reference
    /// that [`GalleryIndex::top_k`] is checked against.
    pub fn brute_force_rank(
        &self,
        query: &Embedding,
        exclude: &HashSet<ClipId>,
    ) -> Result<RankedList> {
        Ok(RankedList::from_scores(self.score_all(query, exclude)?))
    }

    /// Ranks only the listed clips.
    pub fn rank_among<'a>(
        &self,
        query: &Embedding,
        ids: impl IntoIterator<Item = &'a ClipId>,
    ) -> Result<RankedList> {
        let q = self.normalized_query(query)?;
        let mut seen = HashSet::new();
        let entries = ids
            .into_iter()
            .filter(|id| seen.insert(*id))
            .map(|id| {
                let &i = self
                    .lookup
                    .get(id)
                    .ok_or_else(|| CvrError::MissingClip(id.to_string()))?;
                Ok(ScoredEntry {
                    clip_id: id.clone(),
                    score: cosine_score(self.row(i), q.as_slice()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RankedList::from_scores(entries))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn none() -> HashSet<ClipId> {
        HashSet::new()
    }

    fn small() -> GalleryIndex {
        GalleryIndex::build(vec![
            (ClipId::new("a"), e(&[1.0, 0.0, 0.0])),
            (ClipId::new("b"), e(&[0.0, 1.0, 0.0])),
            (ClipId::new("c"), e(&[0.0, 0.0, 1.0])),
        ])
        .unwrap()
    }

    #[test]
    fn build_small() {
        let idx = small();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.dim(), 3);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            GalleryIndex::build(vec![
                (ClipId::new("a"), e(&[1.0, 0.0])),
                (ClipId::new("a"), e(&[0.0, 1.0])),
            ]),
            Err(CvrError::DuplicateId(id)) if id == "a"
        ));
        assert!(matches!(
            GalleryIndex::build(vec![
                (ClipId::new("a"), e(&[1.0, 0.0])),
                (ClipId::new("b"), e(&[0.0, 1.0, 0.0])),
            ]),
            Err(CvrError::DimMismatch { .. })
        ));
        assert!(matches!(
            GalleryIndex::build(Vec::new()),
            Err(CvrError::EmptyGallery)
        ));
    }

    #[test]
    fn build_at_benchmark_scale() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let records: Vec<_> = (0..10_661)
            .map(|i| {
                let v: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (ClipId::new(format!("clip{i:05}")), e(&v))
            })
            .collect();
        let idx = GalleryIndex::build(records).unwrap();
        assert_eq!(idx.len(), 10_661);
    }

    #[test]
    fn signed_zero_scores_tie() {
        let idx = GalleryIndex::build(vec![
            (ClipId::new("b"), e(&[1.0, 0.0])),
            (ClipId::new("a"), e(&[-1.0, 0.0])),
        ])
        .unwrap();
        let r = idx.brute_force_rank(&e(&[0.0, -1.0]), &none()).unwrap();
        let ids: Vec<&str> = r.ids().map(ClipId::as_str).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(r.entries().iter().all(|x| x.score.to_bits() == 0));
    }

    #[test]
    fn exact_copy_ranks_first() {
        let idx = small();
        let r = idx.top_k(&e(&[0.0, 1.0, 0.0]), 1, &none()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.head().unwrap().clip_id.as_str(), "b");
        assert_eq!(r.head().unwrap().score, 1.0);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let idx = GalleryIndex::build(vec![
            (ClipId::new("z"), e(&[1.0, 1.0])),
            (ClipId::new("m"), e(&[1.0, 1.0])),
            (ClipId::new("q"), e(&[-1.0, 0.0])),
        ])
        .unwrap();
        let r = idx.top_k(&e(&[1.0, 0.0]), 2, &none()).unwrap();
        let ids: Vec<_> = r.ids().map(|i| i.as_str()).collect();
        assert_eq!(ids, vec!["m", "z"]);
    }

    #[test]
    fn exclude_is_respected() {
        let idx = small();
        let ex: HashSet<_> = [ClipId::new("a")].into_iter().collect();
        let r = idx.top_k(&e(&[1.0, 0.0, 0.0]), 3, &ex).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.position(&ClipId::new("a")).is_none());
    }

    #[test]
    fn brute_force_examples() {
        let one = GalleryIndex::build(vec![(ClipId::new("x"), e(&[1.0]))]).unwrap();
        assert_eq!(one.brute_force_rank(&e(&[2.0]), &none()).unwrap().len(), 1);
        let idx = small();
        assert_eq!(idx.brute_force_rank(&e(&[1.0, 1.0, 0.0]), &none()).unwrap().len(), 3);
    }

    #[test]
    fn query_dim_checked() {
        assert!(matches!(
            small().top_k(&e(&[1.0, 0.0]), 1, &none()),
            Err(CvrError::DimMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn restrict_and_rank_among() {
        let idx = small();
        let ids = [ClipId::new("c"), ClipId::new("a")];
        let sub = idx.restrict(ids.iter()).unwrap();
        assert_eq!(sub.len(), 2);
        let q = e(&[0.2, 0.1, 0.9]);
        let a = sub.brute_force_rank(&q, &none()).unwrap();
        let b = idx.rank_among(&q, ids.iter()).unwrap();
        assert_eq!(a, b);
        assert!(idx.restrict([ClipId::new("nope")].iter()).is_err());
    }

    fn arb_gallery() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<f32>)> {
        (1usize..8, 1usize..40).prop_flat_map(|(dim, n)| {
            (
                prop::collection::vec(
                    prop::collection::vec(-3i8..=3, dim)
                        .prop_map(|v| v.into_iter().map(f32::from).collect::<Vec<_>>())
                        .prop_filter("non-zero", |v: &Vec<f32>| v.iter().any(|x| *x != 0.0)),
                    n,
                ),
                prop::collection::vec(-3i8..=3, dim)
                    .prop_map(|v| v.into_iter().map(f32::from).collect::<Vec<_>>())
                    .prop_filter("non-zero", |v: &Vec<f32>| v.iter().any(|x| *x != 0.0)),
            )
        })
    }

    proptest! {
        // Small integer coordinates produce many exact ties, exercising the
        // tie rule.
        #[test]
        fn top_k_is_prefix_of_brute_force((vecs, q) in arb_gallery(), k in 1usize..50) {
            let idx = GalleryIndex::build(
                vecs.iter().enumerate().map(|(i, v)| (ClipId::new(format!("c{i:03}")), e(v))),
            ).unwrap();
            let q = e(&q);
            let full = idx.brute_force_rank(&q, &none()).unwrap();
            let top = idx.top_k(&q, k, &none()).unwrap();
            prop_assert_eq!(top, full.clone().truncated(k));
            prop_assert!(full.is_rank_ordered());
        }

        #[test]
        fn ranking_independent_of_insertion_order((vecs, q) in arb_gallery(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut records: Vec<_> = vecs.iter().enumerate()
                .map(|(i, v)| (ClipId::new(format!("c{i:03}")), e(v))).collect();
            let a = GalleryIndex::build(records.clone()).unwrap();
            records.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = GalleryIndex::build(records).unwrap();
            let q = e(&q);
            prop_assert_eq!(a.brute_force_rank(&q, &none()).unwrap(), b.brute_force_rank(&q, &none()).unwrap());
        }
    }
}
