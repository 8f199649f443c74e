//! Query scoring end to end: fusion baselines, caption-composed text-to-video
//! retrieval, and the two-stage variant that re-ranks a visually filtered
//! candidate set.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compose::{
    caption_video, compose_target_caption, embed_text, Caption, CaptionSource, ProviderKind,
    Providers, TargetCaption,
};
use crate::embedding::{ClipId, Embedding};
use crate::error::{CvrError, Result};
use crate::fusion::{fuse, ComposedQuery, FusionStrategy};
use crate::index::{GalleryIndex, RankedList};
use crate::store::TemporalMode;

pub const DEFAULT_NUM_CANDIDATES: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TextOnly,
    VisualOnly,
    Average,
    /// Rank the whole gallery by the composed target caption.
    TfCvr,
    /// Visual top-n_c filter, then [`Strategy::TfCvr`] inside the candidates.
    TfrCvr,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::TextOnly,
        Strategy::VisualOnly,
        Strategy::Average,
        Strategy::TfCvr,
        Strategy::TfrCvr,
    ];

    pub fn fusion(self) -> FusionStrategy {
        match self {
            Strategy::TextOnly => FusionStrategy::TextOnly,
            Strategy::VisualOnly => FusionStrategy::VisualOnly,
            Strategy::Average => FusionStrategy::Average,
            Strategy::TfCvr | Strategy::TfrCvr => FusionStrategy::Captioning,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TextOnly => "text-only",
            Strategy::VisualOnly => "visual-only",
            Strategy::Average => "average",
            Strategy::TfCvr => "tf-cvr",
            Strategy::TfrCvr => "tfr-cvr",
        }
    }

    /// Whether the strategy needs an embedding of the raw instruction.
    pub fn needs_instruction_embedding(self) -> bool {
        matches!(self, Strategy::TextOnly | Strategy::Average)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = CvrError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                CvrError::Config(format!(
                    "unknown strategy `{s}` (expected one of text-only, visual-only, average, tf-cvr, tfr-cvr)"
                ))
            })
    }
}

/// Which text is embedded to score the gallery in the caption strategies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    /// The raw instruction, no captioning.
    Instruction,
    /// Captioner output composed with the instruction.
    #[default]
    PredictedCaption,
    /// Annotated narration of the query clip composed with the instruction.
    GroundTruthCaption,
}

fn default_nc() -> usize {
    DEFAULT_NUM_CANDIDATES
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    #[serde(default = "default_nc")]
    pub n_c: usize,
    /// Embedding set used for the stage-1 visual filter.
    pub filter_embedding_source: String,
    /// Embedding set scored against query vectors (and target captions).
    pub rank_embedding_source: String,
    #[serde(default)]
    pub temporal_mode: TemporalMode,
    #[serde(default)]
    pub text_source: TextSource,
    /// Keep the query clip in its own gallery.
    #[serde(default)]
    pub include_self: bool,
}

impl PipelineConfig {
    pub fn new(strategy: Strategy, source: impl Into<String>) -> Self {
        let source = source.into();
        PipelineConfig {
            strategy,
            n_c: DEFAULT_NUM_CANDIDATES,
            filter_embedding_source: source.clone(),
            rank_embedding_source: source,
            temporal_mode: TemporalMode::FullVideo,
            text_source: TextSource::PredictedCaption,
            include_self: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(CvrError::Config("n_c must be at least 1".into()));
        }
        Ok(())
    }
}

/// The galleries one query is scored against. Both indices hold the same
/// clips, possibly embedded by different encoders.
#[derive(Debug, Clone, Copy)]
pub struct SearchSpace<'a> {
    pub rank: &'a GalleryIndex,
    pub filter: &'a GalleryIndex,
    /// The query clip in the filter encoder's space, when it differs from the
    /// rank space.
    pub filter_query: Option<&'a Embedding>,
}

impl<'a> SearchSpace<'a> {
    pub fn single(index: &'a GalleryIndex) -> Self {
        SearchSpace {
            rank: index,
            filter: index,
            filter_query: None,
        }
    }

    pub fn new(rank: &'a GalleryIndex, filter: &'a GalleryIndex, filter_query: Option<&'a Embedding>) -> Result<Self> {
        if rank.ids() != filter.ids() {
            return Err(CvrError::Config(
                "filter and rank galleries must contain the same clips".into(),
            ));
        }
        Ok(SearchSpace {
            rank,
            filter,
            filter_query,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub query_id: String,
    pub ranking: RankedList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_candidates: Option<RankedList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_caption_used: Option<TargetCaption>,
}

fn exclusions(q: &ComposedQuery, cfg: &PipelineConfig) -> HashSet<ClipId> {
    let mut ex = HashSet::new();
    if !cfg.include_self {
        ex.insert(q.query_clip.clone());
    }
    ex
}

/// Ranks the gallery by a fused query vector (text-only, visual-only or
/// average).
pub fn baseline_rank(q: &ComposedQuery, space: SearchSpace<'_>, cfg: &PipelineConfig) -> Result<RetrievalOutcome> {
    let query = fuse(cfg.strategy.fusion(), q)?;
    Ok(RetrievalOutcome {
        query_id: q.query_id.clone(),
        ranking: space.rank.brute_force_rank(&query, &exclusions(q, cfg))?,
        stage1_candidates: None,
        target_caption_used: None,
    })
}

/// The text that stands in for the target video, and the composed caption it
/// came from when one was produced.
pub fn resolve_query_text(
    q: &ComposedQuery,
    cfg: &PipelineConfig,
    providers: &Providers,
) -> Result<(String, Option<TargetCaption>)> {
    let caption = match cfg.text_source {
        TextSource::Instruction => return Ok((q.instruction_text.clone(), None)),
        TextSource::PredictedCaption => {
            caption_video(&q.query_clip, providers.get(ProviderKind::Captioner)?)?
        }
        TextSource::GroundTruthCaption => {
            let narration = providers
                .narrations
                .get(&q.query_clip)
                .ok_or_else(|| CvrError::MissingNarration(q.query_clip.to_string()))?;
            Caption::new(narration, CaptionSource::GroundTruth)?
        }
    };
    let target = compose_target_caption(
        &caption,
        &q.instruction_text,
        &providers.compose_template,
        providers.get(ProviderKind::Reformulator)?,
    )?;
    Ok((target.text.clone(), Some(target)))
}

/// Ranks the whole gallery by cosine similarity to the embedded target text.
pub fn tf_cvr_rank(
    q: &ComposedQuery,
    space: SearchSpace<'_>,
    cfg: &PipelineConfig,
    providers: &Providers,
) -> Result<RetrievalOutcome> {
    let (text, target) = resolve_query_text(q, cfg, providers)?;
    let query = embed_text(&text, providers.get(ProviderKind::TextEmbedder)?)?;
    Ok(RetrievalOutcome {
        query_id: q.query_id.clone(),
        ranking: space.rank.brute_force_rank(&query, &exclusions(q, cfg))?,
        stage1_candidates: None,
        target_caption_used: target,
    })
}

/// The `n_c` clips visually closest to the query video, best first.
pub fn visual_filter(
    query_visual: &Embedding,
    filter: &GalleryIndex,
    n_c: usize,
    exclude: &HashSet<ClipId>,
) -> Result<RankedList> {
    filter.top_k(query_visual, n_c, exclude)
}

/// Two-stage retrieval. The candidates are re-ranked by target-text score;
/// the remaining clips follow in stage-1 order so the list covers the whole
/// gallery.
pub fn tfr_cvr_rank(
    q: &ComposedQuery,
    space: SearchSpace<'_>,
    cfg: &PipelineConfig,
    providers: &Providers,
) -> Result<RetrievalOutcome> {
    cfg.validate()?;
    let query_visual = space
        .filter_query
        .or(q.visual_embedding.as_ref())
        .ok_or_else(|| CvrError::MissingEmbedding(format!("visual embedding for query `{}`", q.query_id)))?;
    let exclude = exclusions(q, cfg);
    let stage1 = space.filter.brute_force_rank(query_visual, &exclude)?;
    let candidates = stage1.clone().truncated(cfg.n_c);

    let (text, target) = resolve_query_text(q, cfg, providers)?;
    let text_query = embed_text(&text, providers.get(ProviderKind::TextEmbedder)?)?;
    let reranked = space.rank.rank_among(&text_query, candidates.ids())?;

    Ok(RetrievalOutcome {
        query_id: q.query_id.clone(),
        ranking: RankedList::concat([reranked, stage1]),
        stage1_candidates: Some(candidates),
        target_caption_used: target,
    })
}

/// Dispatches on `cfg.strategy`.
pub fn rank_query(
    q: &ComposedQuery,
    space: SearchSpace<'_>,
    cfg: &PipelineConfig,
    providers: &Providers,
) -> Result<RetrievalOutcome> {
    match cfg.strategy {
        Strategy::TextOnly | Strategy::VisualOnly | Strategy::Average => baseline_rank(q, space, cfg),
        Strategy::TfCvr => tf_cvr_rank(q, space, cfg, providers),
        Strategy::TfrCvr => tfr_cvr_rank(q, space, cfg, providers),
    }
}
