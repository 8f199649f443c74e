//! Embedding vectors and the numeric operations the rest of the engine is
//! built on.
//!
//! Vectors are stored as `f32`; every reduction (norms, dot products, means)
//! accumulates in `f64`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CvrError, Result};

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// Identifier of a clip, unique within a benchmark.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClipId(Arc<str>);

impl ClipId {
    pub fn new(id: impl AsRef<str>) -> Self {
        ClipId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ClipId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for ClipId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClipId {
    fn from(s: &str) -> Self {
        ClipId::new(s)
    }
}

impl From<String> for ClipId {
    fn from(s: String) -> Self {
        ClipId(Arc::from(s))
    }
}

/// Identifier of the long-form video a clip was cut from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceVideoId(pub String);

impl fmt::Display for SourceVideoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SourceVideoId {
    fn from(s: &str) -> Self {
        SourceVideoId(s.to_owned())
    }
}

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    /// Wraps raw values, rejecting empty input and NaN/Inf.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(CvrError::EmptySequence);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CvrError::NonFinite {
                context: format!("embedding component {i}"),
            });
        }
        Ok(Embedding { values })
    }

    /// Wraps raw values and L2-normalizes them.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        l2_normalize(&Embedding::new(values)?)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// Multiplies every component by `factor`. Used by tests and tools that
    /// check scale invariance.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Embedding::new(self.values.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = CvrError;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub(crate) fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CvrError::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

pub fn l2_normalize(e: &Embedding) -> Result<Embedding> {
    let n = e.norm();
    if n <= MIN_NORM {
        return Err(CvrError::ZeroVector);
    }
    let values = e
        .values
        .iter()
        .map(|&v| (f64::from(v) / n) as f32)
        .collect();
    Ok(Embedding { values })
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na <= MIN_NORM || nb <= MIN_NORM {
        return Err(CvrError::ZeroVector);
    }
    Ok((dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-frame embeddings of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    clip_id: ClipId,
    frames: Vec<Embedding>,
}

impl FrameEmbeddings {
    pub fn new(clip_id: ClipId, frames: Vec<Embedding>) -> Result<Self> {
        let first = frames.first().ok_or(CvrError::EmptySequence)?;
        let dim = first.dim();
        if let Some(bad) = frames.iter().find(|f| f.dim() != dim) {
            return Err(CvrError::DimMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        Ok(FrameEmbeddings { clip_id, frames })
    }

    pub fn clip_id(&self) -> &ClipId {
        &self.clip_id
    }

    pub fn frames(&self) -> &[Embedding] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }

    /// Keeps only the frames at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<FrameEmbeddings> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames.get(i).cloned().ok_or_else(|| {
                    CvrError::Config(format!(
                        "frame index {i} out of range for clip {} ({} frames)",
                        self.clip_id,
                        self.frames.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FrameEmbeddings::new(self.clip_id.clone(), frames)
    }
}

/// Element-wise mean of the frames, then L2-normalized.
pub fn mean_pool_frames(f: &FrameEmbeddings) -> Result<Embedding> {
    if f.frames.is_empty() {
        return Err(CvrError::EmptySequence);
    }
    let mut acc = vec![0f64; f.dim()];
    for frame in &f.frames {
        for (a, &v) in acc.iter_mut().zip(frame.as_slice()) {
            *a += f64::from(v);
        }
    }
    let count = f.frames.len() as f64;
    let mean = Embedding::new(acc.into_iter().map(|a| (a / count) as f32).collect())?;
    l2_normalize(&mean)
}

/// `k` frame indices at the centres of `k` equal bins over `num_frames`.
///
/// Index `i` is `floor((i + 0.5) * num_frames / k)`. Indices repeat when
/// `num_frames < k`.
pub fn uniform_frame_indices(num_frames: usize, k: usize) -> Vec<usize> {
    assert!(num_frames >= 1 && k >= 1, "num_frames and k must be positive");
    (0..k)
        .map(|i| {
            // Exact integer form of floor((i + 0.5) * n / k).
            let idx = ((2 * i + 1) * num_frames) / (2 * k);
            idx.min(num_frames - 1)
        })
        .collect()
}

pub fn middle_frame_index(num_frames: usize) -> usize {
    assert!(num_frames >= 1, "num_frames must be positive");
    num_frames / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn normalize_three_four_five() {
        let n = l2_normalize(&emb(&[3.0, 4.0])).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let n = l2_normalize(&emb(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(n.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_random_matches_scalar_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = random_vec(&mut rng, 64);
        let mut sq = 0f64;
        for x in &v {
            sq += (*x as f64) * (*x as f64);
        }
        let n = sq.sqrt();
        let got = l2_normalize(&emb(&v)).unwrap();
        for (g, x) in got.as_slice().iter().zip(&v) {
            assert!((f64::from(*g) - f64::from(*x) / n).abs() < 1e-7);
        }
        assert!((got.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            l2_normalize(&emb(&[0.0, 0.0])),
            Err(CvrError::ZeroVector)
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Embedding::new(vec![1.0, f32::NAN]),
            Err(CvrError::NonFinite { .. })
        ));
        assert!(Embedding::new(vec![f32::INFINITY]).is_err());
        assert!(matches!(
            Embedding::new(vec![]),
            Err(CvrError::EmptySequence)
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        // dot = 2 + 2 + 4 = 8, both norms 3.
        let c = cosine_similarity(&emb(&[1.0, 2.0, 2.0]), &emb(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0, 0.0])),
            Err(CvrError::DimMismatch { expected: 2, found: 3 })
        ));
        assert!(matches!(
            cosine_similarity(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])),
            Err(CvrError::ZeroVector)
        ));
    }

    #[test]
    fn mean_pool_identical_frames() {
        let u = l2_normalize(&emb(&[0.2, -0.4, 0.9])).unwrap();
        let f = FrameEmbeddings::new(ClipId::new("c"), vec![u.clone(); 15]).unwrap();
        let pooled = mean_pool_frames(&f).unwrap();
        for (a, b) in pooled.as_slice().iter().zip(u.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_pool_orthogonal_pair() {
        let f = FrameEmbeddings::new(ClipId::new("c"), vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])])
            .unwrap();
        let pooled = mean_pool_frames(&f).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((pooled.as_slice()[0] - h).abs() < 1e-7);
        assert!((pooled.as_slice()[1] - h).abs() < 1e-7);
    }

    #[test]
    fn mean_pool_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 12;
        let raw: Vec<Vec<f32>> = (0..7).map(|_| random_vec(&mut rng, dim)).collect();
        let mut expected = vec![0f64; dim];
        for j in 0..dim {
            let mut s = 0f64;
            for r in &raw {
                s += r[j] as f64;
            }
            expected[j] = s / 7.0;
        }
        let n: f64 = expected.iter().map(|x| x * x).sum::<f64>().sqrt();
        let f = FrameEmbeddings::new(
            ClipId::new("c"),
            raw.iter().map(|r| emb(r)).collect(),
        )
        .unwrap();
        let pooled = mean_pool_frames(&f).unwrap();
        for (p, e) in pooled.as_slice().iter().zip(&expected) {
            assert!((f64::from(*p) - e / n).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_embeddings_validation() {
        assert!(matches!(
            FrameEmbeddings::new(ClipId::new("c"), vec![]),
            Err(CvrError::EmptySequence)
        ));
        assert!(matches!(
            FrameEmbeddings::new(ClipId::new("c"), vec![emb(&[1.0]), emb(&[1.0, 0.0])]),
            Err(CvrError::DimMismatch { .. })
        ));
    }

    #[test]
    fn uniform_indices_examples() {
        assert_eq!(uniform_frame_indices(15, 15), (0..15).collect::<Vec<_>>());
        assert_eq!(uniform_frame_indices(10, 1), vec![5]);
        // Direct floating-point evaluation of the bin-centre formula.
        let brute: Vec<usize> = (0..15)
            .map(|i| ((i as f64 + 0.5) * 100.0 / 15.0).floor() as usize)
            .collect();
        assert_eq!(uniform_frame_indices(100, 15), brute);
        assert_eq!(
            brute,
            vec![3, 10, 16, 23, 30, 36, 43, 50, 56, 63, 70, 76, 83, 90, 96]
        );
        assert_eq!(uniform_frame_indices(2, 5), vec![0, 0, 1, 1, 1]);
    }

    #[test]
    fn middle_frame_examples() {
        assert_eq!(middle_frame_index(1), 0);
        assert_eq!(middle_frame_index(15), 7);
        assert_eq!(middle_frame_index(8), 4);
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-10.0f32..10.0, dim)
            .prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            (a, b) in (1usize..32).prop_flat_map(|d| (arb_vec(d), arb_vec(d))),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            let (ea, eb) = (emb(&a), emb(&b));
            let base = cosine_similarity(&ea, &eb).unwrap();
            let scaled = cosine_similarity(&ea.scaled(alpha).unwrap(), &eb.scaled(beta).unwrap()).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-6);
            prop_assert!((base - cosine_similarity(&eb, &ea).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn normalize_idempotent(v in (1usize..64).prop_flat_map(arb_vec)) {
            let once = l2_normalize(&emb(&v)).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((once.norm() - 1.0).abs() <= 1e-6);
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn mean_pool_permutation_invariant(
            frames in (1usize..16).prop_flat_map(|d| prop::collection::vec(arb_vec(d), 1..10)),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = frames.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = FrameEmbeddings::new(ClipId::new("c"), frames.iter().map(|f| emb(f)).collect()).unwrap();
            let b = FrameEmbeddings::new(ClipId::new("c"), shuffled.iter().map(|f| emb(f)).collect()).unwrap();
            match (mean_pool_frames(&a), mean_pool_frames(&b)) {
                (Ok(x), Ok(y)) => {
                    for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                        prop_assert!((p - q).abs() <= 1e-6);
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "pooling disagreed on degeneracy"),
            }
        }

        #[test]
        fn uniform_indices_cover_both_ends(n in 1usize..2000, k in 1usize..64) {
            let idx = uniform_frame_indices(n, k);
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
            let bin = n as f64 / k as f64;
            prop_assert!((idx[0] as f64) < bin + 1.0);
            prop_assert!((idx[k - 1] as f64) > n as f64 - bin - 1.0);
        }
    }
}
