//! Benchmark construction: clip manifests, overlap deduplication, narration
//! grouping, local and global galleries, and stratified distractor sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::{embed_text, InstructionClass, Provider};
use crate::embedding::{cosine_similarity, ClipId, Embedding};
use crate::error::{CvrError, Result};
use crate::formats::{read_jsonl, write_jsonl};
use crate::fusion::ComposedQuery;
use crate::index::GalleryIndex;
use crate::store::EmbeddingSet;

pub const MAX_DISTRACTORS: usize = 6;
pub const MAX_LOCAL_GALLERY: usize = 10;
/// Draw counts for the bottom, middle and top similarity strata.
pub const STRATUM_DRAWS: [usize; 3] = [1, 4, 1];
/// Clip lengths seen in the reference benchmark, in seconds.
pub const EXPECTED_DURATION_S: (f64, f64) = (3.9, 8.1);

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifestEntry {
    pub clip_id: ClipId,
    pub source_video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub narration: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_label: Option<String>,
    #[serde(default)]
    pub is_query: bool,
    #[serde(default)]
    pub is_target: bool,
    #[serde(default = "yes")]
    pub is_distractor_candidate: bool,
}

impl ClipManifestEntry {
    pub fn new(clip_id: &str, source_video_id: &str, start_s: f64, end_s: f64, narration: &str) -> Self {
        ClipManifestEntry {
            clip_id: ClipId::new(clip_id),
            source_video_id: source_video_id.into(),
            start_s,
            end_s,
            narration: narration.into(),
            action_label: None,
            is_query: false,
            is_target: false,
            is_distractor_candidate: true,
        }
    }

    pub fn validate_span(&self) -> Result<()> {
        if self.start_s.is_finite() && self.end_s.is_finite() && 0.0 <= self.start_s && self.start_s < self.end_s {
            Ok(())
        } else {
            Err(CvrError::InvalidSpan {
                clip: self.clip_id.to_string(),
                start: self.start_s,
                end: self.end_s,
            })
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_annotated(&self) -> bool {
        self.is_query || self.is_target
    }

    /// Label used for same-action exclusion: the taxonomy label when both
    /// clips carry one, otherwise the narration verb.
    pub fn same_action(&self, other: &ClipManifestEntry) -> bool {
        match (&self.action_label, &other.action_label) {
            (Some(a), Some(b)) => canonical_narration(a) == canonical_narration(b),
            _ => match (narration_verb(&self.narration), narration_verb(&other.narration)) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query_clip: ClipId,
    pub instruction: String,
    pub target_ids: BTreeSet<ClipId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_class: Option<InstructionClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorRecord {
    pub target_id: ClipId,
    pub selected: Vec<ClipId>,
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ManifestRecord {
    Clip(ClipManifestEntry),
    Query(QueryRecord),
    Distractors(DistractorRecord),
}

/// Trim, collapse whitespace, lowercase, strip trailing punctuation.
pub fn canonical_narration(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_owned()
}

/// First word after the `#C C` camera-wearer prefix, or the first word.
pub fn narration_verb(narration: &str) -> Option<String> {
    let canon = canonical_narration(narration);
    let rest = match canon.strip_prefix("#c c") {
        Some(r) if r.is_empty() || r.starts_with(' ') => r,
        _ => &canon,
    };
    rest.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()))
        .find(|w| !w.is_empty())
        .map(str::to_owned)
}

/// Greedy earliest-end interval scheduling per source video. Retained clips
/// keep their input order.
pub fn filter_overlapping_clips(entries: &[ClipManifestEntry]) -> Result<Vec<ClipManifestEntry>> {
    for e in entries {
        e.validate_span()?;
    }
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_video.entry(&e.source_video_id).or_default().push(i);
    }
    let mut keep = vec![false; entries.len()];
    for idx in by_video.values_mut() {
        idx.sort_by(|&a, &b| {
            let (x, y) = (&entries[a], &entries[b]);
            x.end_s
                .total_cmp(&y.end_s)
                .then(x.start_s.total_cmp(&y.start_s))
                .then_with(|| x.clip_id.cmp(&y.clip_id))
        });
        let mut last_end = f64::NEG_INFINITY;
        for &i in idx.iter() {
            if entries[i].start_s >= last_end {
                keep[i] = true;
                last_end = entries[i].end_s;
            }
        }
    }
    Ok(entries
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.clone())
        .collect())
}

/// Partitions clips of each source video by canonical narration. Groups are
/// sorted, and listed in order of their smallest clip id.
pub fn group_equivalent_narrations(entries: &[ClipManifestEntry]) -> Vec<Vec<ClipId>> {
    let mut groups: BTreeMap<(&str, String), BTreeSet<ClipId>> = BTreeMap::new();
    for e in entries {
        groups
            .entry((&e.source_video_id, canonical_narration(&e.narration)))
            .or_default()
            .insert(e.clip_id.clone());
    }
    let mut out: Vec<Vec<ClipId>> = groups.into_values().map(|g| g.into_iter().collect()).collect();
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Bottom,
    Middle,
    Top,
}

/// Stratum sizes (bottom, middle, top) for `m` ranked candidates.
pub fn stratum_sizes(m: usize) -> (usize, usize, usize) {
    let tenth = m.div_ceil(10);
    let bottom = tenth.min(m);
    let top = tenth.min(m - bottom);
    (bottom, m - bottom - top, top)
}

/// Stratum of the candidate at ascending-similarity rank `pos` among `m`.
pub fn stratum_of(pos: usize, m: usize) -> Stratum {
    let (b, mid, _) = stratum_sizes(m);
    if pos < b {
        Stratum::Bottom
    } else if pos < b + mid {
        Stratum::Middle
    } else {
        Stratum::Top
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorPool {
    pub target_id: ClipId,
    /// Eligible clips in ascending narration similarity.
    pub candidates: Vec<(ClipId, f64)>,
    /// Selection in draw order.
    pub selected: Vec<ClipId>,
}

impl DistractorPool {
    /// Selected clips per (bottom, middle, top) stratum.
    pub fn stratum_counts(&self) -> (usize, usize, usize) {
        let m = self.candidates.len();
        let pos: HashMap<&ClipId, usize> = self.candidates.iter().enumerate().map(|(i, (c, _))| (c, i)).collect();
        let mut counts = (0, 0, 0);
        for id in &self.selected {
            match stratum_of(pos[id], m) {
                Stratum::Bottom => counts.0 += 1,
                Stratum::Middle => counts.1 += 1,
                Stratum::Top => counts.2 += 1,
            }
        }
        counts
    }
}

/// Whether `candidate` may serve as a distractor for `target`.
pub fn is_eligible_distractor(target: &ClipManifestEntry, candidate: &ClipManifestEntry) -> bool {
    candidate.clip_id != target.clip_id
        && candidate.source_video_id == target.source_video_id
        && candidate.is_distractor_candidate
        && !candidate.is_annotated()
        && !target.same_action(candidate)
}

fn target_rng(seed: u64, target: &ClipId) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(target.as_str().as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Draws up to six distractors for `target` from `pool`: one from the least
/// similar tenth of eligible clips, four from the middle, one from the most
/// similar tenth. Short strata are backfilled from the middle, then from any
/// remaining candidate.
pub fn sample_distractors(
    target: &ClipManifestEntry,
    pool: &[ClipManifestEntry],
    narration_embeddings: &EmbeddingSet,
    seed: u64,
) -> Result<DistractorPool> {
    let target_vec = narration_embeddings.require(&target.clip_id)?;
    let mut seen = HashSet::new();
    let mut candidates = pool
        .iter()
        .filter(|c| is_eligible_distractor(target, c) && seen.insert(c.clip_id.clone()))
        .map(|c| {
            let sim = cosine_similarity(target_vec, narration_embeddings.require(&c.clip_id)?)?;
            Ok((c.clip_id.clone(), sim))
        })
        .collect::<Result<Vec<_>>>()?;
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));

    let m = candidates.len();
    let (b, mid, _) = stratum_sizes(m);
    let ranges = [0..b, b..b + mid, b + mid..m];
    let mut rng = target_rng(seed, &target.clip_id);
    let mut taken = vec![false; m];
    let mut selected = Vec::with_capacity(MAX_DISTRACTORS);

    let draw = |range: std::ops::Range<usize>, want: usize, rng: &mut ChaCha8Rng, taken: &mut [bool], selected: &mut Vec<ClipId>| {
        let free: Vec<usize> = range.filter(|&i| !taken[i]).collect();
        for j in sample(rng, free.len(), want.min(free.len())).into_iter() {
            taken[free[j]] = true;
            selected.push(candidates[free[j]].0.clone());
        }
    };
    for (range, want) in ranges.iter().cloned().zip(STRATUM_DRAWS) {
        draw(range, want, &mut rng, &mut taken, &mut selected);
    }
    let short = MAX_DISTRACTORS - selected.len();
    if short > 0 {
        draw(ranges[1].clone(), short, &mut rng, &mut taken, &mut selected);
    }
    let short = MAX_DISTRACTORS - selected.len();
    if short > 0 {
        draw(0..m, short, &mut rng, &mut taken, &mut selected);
    }
    Ok(DistractorPool {
        target_id: target.clip_id.clone(),
        candidates,
        selected,
    })
}

/// Embeds every clip narration with `provider`.
pub fn embed_narrations(clips: &[ClipManifestEntry], provider: &Provider) -> Result<EmbeddingSet> {
    let records = clips
        .par_iter()
        .map(|c| Ok((c.clip_id.clone(), embed_text(&c.narration, provider)?)))
        .collect::<Result<Vec<(ClipId, Embedding)>>>()?;
    EmbeddingSet::new(records)
}

/// A benchmark: clips, composed queries, and the distractors drawn per target.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    clips: Vec<ClipManifestEntry>,
    queries: Vec<QueryRecord>,
    distractors: BTreeMap<ClipId, Vec<ClipId>>,
    lookup: HashMap<ClipId, usize>,
}

impl BenchmarkManifest {
    /// Checks that ids are unique and every reference resolves.
    pub fn new(
        clips: Vec<ClipManifestEntry>,
        queries: Vec<QueryRecord>,
        distractors: BTreeMap<ClipId, Vec<ClipId>>,
    ) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(clips.len());
        for (i, c) in clips.iter().enumerate() {
            c.validate_span()?;
            if lookup.insert(c.clip_id.clone(), i).is_some() {
                return Err(CvrError::DuplicateId(c.clip_id.to_string()));
            }
        }
        let (lo, hi) = EXPECTED_DURATION_S;
        let odd = clips.iter().filter(|c| !(lo..=hi).contains(&c.duration_s())).count();
        if odd > 0 {
            tracing::warn!(clips = odd, "clip durations outside {lo}-{hi} s");
        }
        let mut query_ids = HashSet::new();
        for q in &queries {
            if !query_ids.insert(q.query_id.as_str()) {
                return Err(CvrError::DuplicateId(q.query_id.clone()));
            }
            if !lookup.contains_key(&q.query_clip) {
                return Err(CvrError::MissingClip(q.query_clip.to_string()));
            }
            if q.target_ids.is_empty() {
                return Err(CvrError::Config(format!("query `{}` has no targets", q.query_id)));
            }
            for t in &q.target_ids {
                if !lookup.contains_key(t) {
                    return Err(CvrError::MissingTarget {
                        query: q.query_id.clone(),
                        target: t.to_string(),
                    });
                }
            }
        }
        for (t, ds) in &distractors {
            for id in std::iter::once(t).chain(ds) {
                if !lookup.contains_key(id) {
                    return Err(CvrError::MissingClip(id.to_string()));
                }
            }
        }
        Ok(BenchmarkManifest {
            clips,
            queries,
            distractors,
            lookup,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut clips = Vec::new();
        let mut queries = Vec::new();
        let mut distractors = BTreeMap::new();
        for r in read_jsonl::<ManifestRecord>(path)? {
            match r {
                ManifestRecord::Clip(c) => clips.push(c),
                ManifestRecord::Query(q) => queries.push(q),
                ManifestRecord::Distractors(d) => {
                    distractors.insert(d.target_id, d.selected);
                }
            }
        }
        BenchmarkManifest::new(clips, queries, distractors)
    }

    /// Writes clips, then queries, then distractor records, each in the order
    /// held.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, self.records())
    }

    pub fn records(&self) -> Vec<ManifestRecord> {
        self.clips
            .iter()
            .cloned()
            .map(ManifestRecord::Clip)
            .chain(self.queries.iter().cloned().map(ManifestRecord::Query))
            .chain(self.distractors.iter().map(|(t, s)| {
                ManifestRecord::Distractors(DistractorRecord {
                    target_id: t.clone(),
                    selected: s.clone(),
                })
            }))
            .collect()
    }

    pub fn clips(&self) -> &[ClipManifestEntry] {
        &self.clips
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn distractors(&self) -> &BTreeMap<ClipId, Vec<ClipId>> {
        &self.distractors
    }

    pub fn clip(&self, id: &ClipId) -> Result<&ClipManifestEntry> {
        self.lookup
            .get(id)
            .map(|&i| &self.clips[i])
            .ok_or_else(|| CvrError::MissingClip(id.to_string()))
    }

    /// Clips referenced as targets by some query.
    pub fn target_ids(&self) -> BTreeSet<ClipId> {
        self.queries.iter().flat_map(|q| q.target_ids.iter().cloned()).collect()
    }

    /// Runs the sampler for every target and stores the selections.
    pub fn sample_all_distractors(&mut self, narration_embeddings: &EmbeddingSet, seed: u64) -> Result<Vec<DistractorPool>> {
        let mut by_video: HashMap<&str, Vec<ClipManifestEntry>> = HashMap::new();
        for c in &self.clips {
            by_video.entry(&c.source_video_id).or_default().push(c.clone());
        }
        let targets: Vec<ClipId> = self.target_ids().into_iter().collect();
        let pools = targets
            .par_iter()
            .map(|t| {
                let target = self.clip(t)?;
                sample_distractors(target, &by_video[target.source_video_id.as_str()], narration_embeddings, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        self.distractors = pools.iter().map(|p| (p.target_id.clone(), p.selected.clone())).collect();
        Ok(pools)
    }

    /// Marks query and target clips from the query records.
    pub fn mark_roles(&mut self) {
        let queries: HashSet<ClipId> = self.queries.iter().map(|q| q.query_clip.clone()).collect();
        let targets = self.target_ids();
        for c in &mut self.clips {
            c.is_query = queries.contains(&c.clip_id);
            c.is_target = targets.contains(&c.clip_id);
        }
    }

    /// Withdraws distractor candidates that overlap an annotated clip, then
    /// thins the rest with [`filter_overlapping_clips`]. Returns how many
    /// clips were withdrawn.
    pub fn dedup_candidates(&mut self) -> Result<usize> {
        let annotated: Vec<&ClipManifestEntry> = self.clips.iter().filter(|c| c.is_annotated()).collect();
        let overlaps_annotated = |c: &ClipManifestEntry| {
            annotated
                .iter()
                .any(|a| a.source_video_id == c.source_video_id && a.start_s < c.end_s && c.start_s < a.end_s)
        };
        let free: Vec<ClipManifestEntry> = self
            .clips
            .iter()
            .filter(|c| c.is_distractor_candidate && !c.is_annotated() && !overlaps_annotated(c))
            .cloned()
            .collect();
        let kept: HashSet<ClipId> = filter_overlapping_clips(&free)?.into_iter().map(|c| c.clip_id).collect();
        let mut dropped = 0;
        for c in &mut self.clips {
            if c.is_distractor_candidate && !c.is_annotated() && !kept.contains(&c.clip_id) {
                c.is_distractor_candidate = false;
                dropped += 1;
            }
        }
        Ok(dropped)
    }

    /// Adds to each query's targets every clip of the same source video whose
    /// narration is equivalent to a target's. Returns the number of targets
    /// added.
    pub fn expand_equivalent_targets(&mut self) -> usize {
        let mut group_of: HashMap<&ClipId, usize> = HashMap::new();
        let groups = group_equivalent_narrations(&self.clips);
        for (i, g) in groups.iter().enumerate() {
            for id in g {
                group_of.insert(id, i);
            }
        }
        let mut added = 0;
        for q in &mut self.queries {
            let extra: Vec<ClipId> = q
                .target_ids
                .iter()
                .filter_map(|t| group_of.get(t))
                .flat_map(|&g| groups[g].iter())
                .filter(|id| **id != q.query_clip && !q.target_ids.contains(*id))
                .cloned()
                .collect();
            for id in extra {
                added += usize::from(q.target_ids.insert(id));
            }
        }
        added
    }

    /// Targets plus their distractors from the query's source video, without
    /// the query clip, capped at ten clips. Targets are always kept;
    /// distractors are added per target in draw order.
    pub fn build_local_gallery(&self, q: &QueryRecord) -> Result<BTreeSet<ClipId>> {
        let video = &self.clip(&q.query_clip)?.source_video_id;
        let mut gallery: BTreeSet<ClipId> = BTreeSet::new();
        for t in &q.target_ids {
            self.clip(t).map_err(|_| CvrError::MissingTarget {
                query: q.query_id.clone(),
                target: t.to_string(),
            })?;
            gallery.insert(t.clone());
        }
        'outer: for t in &q.target_ids {
            for d in self.distractors.get(t).into_iter().flatten() {
                if gallery.len() >= MAX_LOCAL_GALLERY {
                    break 'outer;
                }
                if d != &q.query_clip && &self.clip(d)?.source_video_id == video {
                    gallery.insert(d.clone());
                }
            }
        }
        Ok(gallery)
    }

    /// All query, target and distractor clips.
    pub fn global_gallery_ids(&self) -> BTreeSet<ClipId> {
        let mut ids = BTreeSet::new();
        for q in &self.queries {
            ids.insert(q.query_clip.clone());
            ids.extend(q.target_ids.iter().cloned());
        }
        for (t, ds) in &self.distractors {
            ids.insert(t.clone());
            ids.extend(ds.iter().cloned());
        }
        ids
    }

    pub fn build_global_gallery(&self, embeddings: &EmbeddingSet) -> Result<GalleryIndex> {
        embeddings.index_over(&self.global_gallery_ids())
    }

    /// Query records as composed queries with their local galleries attached.
    pub fn composed_queries(&self) -> Result<Vec<ComposedQuery>> {
        self.queries
            .iter()
            .map(|r| {
                let mut q = ComposedQuery::new(
                    r.query_id.clone(),
                    r.query_clip.clone(),
                    r.instruction.clone(),
                    r.target_ids.iter().cloned(),
                )?;
                q.local_gallery_ids = self.build_local_gallery(r)?;
                Ok(q)
            })
            .collect()
    }

    pub fn summary(&self) -> ManifestSummary {
        let local_sizes: Vec<usize> = self
            .queries
            .iter()
            .filter_map(|q| self.build_local_gallery(q).ok().map(|g| g.len()))
            .collect();
        let n = self.queries.len().max(1) as f64;
        let global = self.global_gallery_ids();
        let per_query: Vec<usize> = self
            .queries
            .iter()
            .map(|q| global.len() - usize::from(global.contains(&q.query_clip)))
            .collect();
        ManifestSummary {
            clips: self.clips.len(),
            queries: self.queries.len(),
            mean_targets: self.queries.iter().map(|q| q.target_ids.len()).sum::<usize>() as f64 / n,
            global_gallery_min: per_query.iter().copied().min().unwrap_or(0),
            global_gallery_max: per_query.iter().copied().max().unwrap_or(0),
            local_gallery_max: local_sizes.iter().copied().max().unwrap_or(0),
            local_gallery_mean: local_sizes.iter().sum::<usize>() as f64 / local_sizes.len().max(1) as f64,
        }
    }
}

/// Size statistics of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub clips: usize,
    pub queries: usize,
    pub mean_targets: f64,
    pub global_gallery_min: usize,
    pub global_gallery_max: usize,
    pub local_gallery_max: usize,
    pub local_gallery_mean: f64,
}
