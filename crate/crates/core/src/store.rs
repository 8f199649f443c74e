//! Named embedding sets, either one vector per clip or per-frame vectors
//! pooled on demand.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    l2_normalize, mean_pool_frames, middle_frame_index, uniform_frame_indices, ClipId, Embedding,
    FrameEmbeddings,
};
use crate::error::{CvrError, Result};
use crate::formats::{self, EmbeddingFile};
use crate::index::GalleryIndex;

pub const DEFAULT_FRAMES_PER_CLIP: usize = 15;

/// How a clip's visual representation is formed from its frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Mean of uniformly sampled frames.
    #[default]
    FullVideo,
    /// The single middle frame.
    MiddleFrame,
}

/// Unit-normalized vectors keyed by clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: BTreeMap<ClipId, Embedding>,
}

impl EmbeddingSet {
    pub fn new(records: impl IntoIterator<Item = (ClipId, Embedding)>) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        let mut dim = None;
        for (id, e) in records {
            let d = *dim.get_or_insert(e.dim());
            if e.dim() != d {
                return Err(CvrError::DimMismatch {
                    expected: d,
                    found: e.dim(),
                });
            }
            if vectors.insert(id.clone(), l2_normalize(&e)?).is_some() {
                return Err(CvrError::DuplicateId(id.to_string()));
            }
        }
        Ok(EmbeddingSet {
            dim: dim.ok_or(CvrError::EmptySequence)?,
            vectors,
        })
    }

    pub fn from_file(file: &EmbeddingFile, path: &Path) -> Result<Self> {
        formats::validate_embeddings(file, path)?;
        EmbeddingSet::new(
            file.records
                .iter()
                .map(|r| Ok((ClipId::new(&r.id), Embedding::new(r.values.clone())?)))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &ClipId) -> Option<&Embedding> {
        self.vectors.get(id)
    }

    pub fn require(&self, id: &ClipId) -> Result<&Embedding> {
        self.get(id)
            .ok_or_else(|| CvrError::MissingEmbedding(format!("clip `{id}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClipId, &Embedding)> {
        self.vectors.iter()
    }

    /// Writes the set in the binary embedding format, ordered by clip id.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        formats::write_embeddings_file(
            path,
            self.dim,
            self.vectors.iter().map(|(id, e)| (id.to_string(), e.as_slice().to_vec())),
        )
    }

    /// Index over `ids`; every id must have a vector.
    pub fn index_over<'a>(&self, ids: impl IntoIterator<Item = &'a ClipId>) -> Result<GalleryIndex> {
        let records = ids
            .into_iter()
            .map(|id| Ok((id.clone(), self.require(id)?.clone())))
            .collect::<Result<Vec<_>>>()?;
        GalleryIndex::build(records)
    }
}

#[derive(Debug, Clone)]
enum Stored {
    Clips(Arc<EmbeddingSet>),
    Frames(BTreeMap<ClipId, FrameEmbeddings>),
}

/// Splits a per-frame record id `clip@frame` into its parts.
pub fn parse_frame_id(id: &str) -> Option<(&str, usize)> {
    let (clip, frame) = id.rsplit_once('@')?;
    if clip.is_empty() {
        return None;
    }
    Some((clip, frame.parse().ok()?))
}

#[derive(Debug, Default)]
pub struct EmbeddingStore {
    sets: BTreeMap<String, Stored>,
    frames_per_clip: usize,
    materialized: Mutex<HashMap<(String, TemporalMode), Arc<EmbeddingSet>>>,
}

impl EmbeddingStore {
    pub fn new(frames_per_clip: usize) -> Self {
        EmbeddingStore {
            sets: BTreeMap::new(),
            frames_per_clip: frames_per_clip.max(1),
            materialized: Mutex::default(),
        }
    }

    pub fn insert_set(&mut self, name: impl Into<String>, set: EmbeddingSet) {
        self.sets.insert(name.into(), Stored::Clips(Arc::new(set)));
        self.materialized.lock().clear();
    }

    /// Adds per-frame vectors. Record ids must be `clip@frame_index`; frames
    /// are ordered by index.
    pub fn insert_frames(&mut self, name: impl Into<String>, file: &EmbeddingFile, path: &Path) -> Result<()> {
        formats::validate_embeddings(file, path)?;
        let mut grouped: BTreeMap<ClipId, BTreeMap<usize, Embedding>> = BTreeMap::new();
        for (i, r) in file.records.iter().enumerate() {
            let (clip, frame) = parse_frame_id(&r.id).ok_or_else(|| {
                CvrError::format(
                    path,
                    format!("record {i} (`{}`)", r.id),
                    "frame record ids must look like `clip@frame_index`",
                )
            })?;
            grouped
                .entry(ClipId::new(clip))
                .or_default()
                .insert(frame, Embedding::new(r.values.clone())?);
        }
        let clips = grouped
            .into_iter()
            .map(|(id, frames)| {
                let f = FrameEmbeddings::new(id.clone(), frames.into_values().collect())?;
                Ok((id, f))
            })
            .collect::<Result<_>>()?;
        self.sets.insert(name.into(), Stored::Frames(clips));
        self.materialized.lock().clear();
        Ok(())
    }

    pub fn load_file(&mut self, name: &str, path: &Path, frames: bool) -> Result<()> {
        let file = formats::read_embeddings_file(path)?;
        if frames {
            self.insert_frames(name, &file, path)
        } else {
            self.insert_set(name, EmbeddingSet::from_file(&file, path)?);
            Ok(())
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sets.contains_key(name)
    }

    /// Clip-level vectors for `name` under `mode`.
    pub fn materialize(&self, name: &str, mode: TemporalMode) -> Result<Arc<EmbeddingSet>> {
        let stored = self
            .sets
            .get(name)
            .ok_or_else(|| CvrError::Config(format!("unknown embedding set `{name}`")))?;
        let frames = match stored {
            Stored::Clips(set) => {
                if mode == TemporalMode::MiddleFrame {
                    tracing::warn!(
                        set = name,
                        "clip-level set has no frames; middle-frame mode uses it unchanged"
                    );
                }
                return Ok(set.clone());
            }
            Stored::Frames(frames) => frames,
        };
        let key = (name.to_owned(), mode);
        if let Some(set) = self.materialized.lock().get(&key) {
            return Ok(set.clone());
        }
        let records = frames
            .iter()
            .map(|(id, f)| {
                let e = match mode {
                    TemporalMode::FullVideo => {
                        let k = self.frames_per_clip.min(f.len());
                        mean_pool_frames(&f.select(&uniform_frame_indices(f.len(), k))?)?
                    }
                    TemporalMode::MiddleFrame => l2_normalize(&f.frames()[middle_frame_index(f.len())])?,
                };
                Ok((id.clone(), e))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = Arc::new(EmbeddingSet::new(records)?);
        self.materialized.lock().insert(key, set.clone());
        Ok(set)
    }
}
