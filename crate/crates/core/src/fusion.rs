//! Query embedding construction for the vector-arithmetic fusion baselines.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, ClipId, Embedding};
use crate::error::{CvrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    TextOnly,
    VisualOnly,
    Average,
    /// Caption composition; resolved by the retrieval pipeline, not here.
    Captioning,
}

/// A reference clip plus a modification instruction, with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedQuery {
    pub query_id: String,
    pub query_clip: ClipId,
    pub instruction_text: String,
    pub visual_embedding: Option<Embedding>,
    pub instruction_embedding: Option<Embedding>,
    pub target_ids: BTreeSet<ClipId>,
    pub local_gallery_ids: BTreeSet<ClipId>,
}

impl ComposedQuery {
    pub fn new(
        query_id: impl Into<String>,
        query_clip: ClipId,
        instruction_text: impl Into<String>,
        target_ids: impl IntoIterator<Item = ClipId>,
    ) -> Result<Self> {
        let q = ComposedQuery {
            query_id: query_id.into(),
            query_clip,
            instruction_text: instruction_text.into(),
            visual_embedding: None,
            instruction_embedding: None,
            target_ids: target_ids.into_iter().collect(),
            local_gallery_ids: BTreeSet::new(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_ids.is_empty() {
            return Err(CvrError::Config(format!(
                "query `{}` has no targets",
                self.query_id
            )));
        }
        if self.target_ids.contains(&self.query_clip) {
            return Err(CvrError::Config(format!(
                "query `{}` lists its own clip as a target",
                self.query_id
            )));
        }
        if !self.local_gallery_ids.is_empty() && !self.target_ids.is_subset(&self.local_gallery_ids)
        {
            return Err(CvrError::Config(format!(
                "query `{}` has targets outside its local gallery",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// Normalizes both inputs, averages them and renormalizes.
pub fn fuse_average(visual: &Embedding, text: &Embedding) -> Result<Embedding> {
    if visual.dim() != text.dim() {
        return Err(CvrError::DimMismatch {
            expected: visual.dim(),
            found: text.dim(),
        });
    }
    let (v, t) = (l2_normalize(visual)?, l2_normalize(text)?);
    let mean = v
        .as_slice()
        .iter()
        .zip(t.as_slice())
        .map(|(&a, &b)| ((f64::from(a) + f64::from(b)) / 2.0) as f32)
        .collect();
    l2_normalize(&Embedding::new(mean)?)
}

pub fn fuse(strategy: FusionStrategy, q: &ComposedQuery) -> Result<Embedding> {
    let visual = || {
        q.visual_embedding
            .as_ref()
            .ok_or_else(|| CvrError::MissingEmbedding(format!("visual embedding for query `{}`", q.query_id)))
    };
    let text = || {
        q.instruction_embedding.as_ref().ok_or_else(|| {
            CvrError::MissingEmbedding(format!("instruction embedding for query `{}`", q.query_id))
        })
    };
    match strategy {
        FusionStrategy::TextOnly => Ok(text()?.clone()),
        FusionStrategy::VisualOnly => Ok(visual()?.clone()),
        FusionStrategy::Average => fuse_average(visual()?, text()?),
        FusionStrategy::Captioning => Err(CvrError::UnsupportedStrategy("captioning".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn query() -> ComposedQuery {
        ComposedQuery::new("q1", ClipId::new("qc"), "rinse it instead.", [ClipId::new("t")]).unwrap()
    }

    #[test]
    fn average_of_identical_is_identity() {
        let u = l2_normalize(&e(&[0.3, -0.5, 0.8])).unwrap();
        let f = fuse_average(&u, &u).unwrap();
        for (a, b) in f.as_slice().iter().zip(u.as_slice()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn average_of_axes() {
        let f = fuse_average(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((f.as_slice()[0] - h).abs() < 1e-7 && (f.as_slice()[1] - h).abs() < 1e-7);
    }

    #[test]
    fn average_matches_scalar_loop() {
        let a = [0.1f32, 0.7, -0.2, 0.4];
        let b = [-0.6f32, 0.2, 0.5, 0.1];
        let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let mut m = [0f64; 4];
        for i in 0..4 {
            m[i] = (a[i] as f64 / na + b[i] as f64 / nb) / 2.0;
        }
        let nm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let f = fuse_average(&e(&a), &e(&b)).unwrap();
        for (got, want) in f.as_slice().iter().zip(m) {
            assert!((*got as f64 - want / nm).abs() < 1e-6);
        }
    }

    #[test]
    fn antipodal_inputs_are_degenerate() {
        let mut q = query();
        q.visual_embedding = Some(e(&[1.0, 0.0]));
        q.instruction_embedding = Some(e(&[-1.0, 0.0]));
        assert!(matches!(fuse(FusionStrategy::Average, &q), Err(CvrError::ZeroVector)));
    }

    #[test]
    fn single_modality_pass_through() {
        let mut q = query();
        q.visual_embedding = Some(e(&[0.0, 1.0]));
        q.instruction_embedding = Some(e(&[1.0, 0.0]));
        assert_eq!(fuse(FusionStrategy::TextOnly, &q).unwrap(), e(&[1.0, 0.0]));
        assert_eq!(fuse(FusionStrategy::VisualOnly, &q).unwrap(), e(&[0.0, 1.0]));
    }

    #[test]
    fn missing_and_unsupported() {
        let q = query();
        assert!(matches!(fuse(FusionStrategy::TextOnly, &q), Err(CvrError::MissingEmbedding(_))));
        assert!(matches!(fuse(FusionStrategy::Average, &q), Err(CvrError::MissingEmbedding(_))));
        assert!(matches!(
            fuse(FusionStrategy::Captioning, &q),
            Err(CvrError::UnsupportedStrategy(_))
        ));
    }

    #[test]
    fn query_invariants() {
        assert!(ComposedQuery::new("q", ClipId::new("a"), "x", []).is_err());
        assert!(ComposedQuery::new("q", ClipId::new("a"), "x", [ClipId::new("a")]).is_err());
        let mut q = query();
        q.local_gallery_ids = [ClipId::new("other")].into_iter().collect();
        assert!(q.validate().is_err());
    }

    proptest! {
        #[test]
        fn average_commutes(
            (a, b) in (1usize..16).prop_flat_map(|d| (
                prop::collection::vec(-1.0f32..1.0, d),
                prop::collection::vec(-1.0f32..1.0, d),
            ))
        ) {
            let (Ok(ea), Ok(eb)) = (Embedding::new(a), Embedding::new(b)) else { return Ok(()); };
            match (fuse_average(&ea, &eb), fuse_average(&eb, &ea)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
