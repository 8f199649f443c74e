//! Seeded synthetic benchmarks for tests and demos, built against the mock
//! providers.
//!
//! Each query gets its own source video holding the query clip, one target and
//! a pool of distractor candidates. Two embedding sets are produced:
//!
//! * `visual`: clips of one video cluster around a shared centre. One clip
//!   per video sits right next to the query; for most videos that clip is a
//!   distractor, not the target.
//! * `joint`: a text-video space. The target's vector is the mock text
//!   embedding of the target caption the mock reformulator composes for the
//!   query; every other clip is random.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::benchmark::{embed_narrations, BenchmarkManifest, ClipManifestEntry, QueryRecord};
use crate::compose::transport::mock_text_vector;
use crate::compose::{caption_video, compose_target_caption, InstructionClass, ProviderKind, Providers};
use crate::embedding::{ClipId, Embedding};
use crate::error::Result;
use crate::store::{EmbeddingSet, EmbeddingStore};

pub const VISUAL_SET: &str = "visual";
pub const JOINT_SET: &str = "joint";

const VERBS: [&str; 12] = [
    "wipes", "lifts", "drops", "turns", "shakes", "pours", "folds", "pushes", "pulls", "stirs", "rinses", "taps",
];
const OBJECTS: [&str; 8] = ["the bowl", "a towel", "the lid", "a spoon", "the box", "a bottle", "the pan", "a brush"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub seed: u64,
    pub queries: usize,
    /// Distractor candidates per video.
    pub pool_per_video: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Out of every ten queries, how many have the target as the visual
    /// nearest neighbour of the query.
    pub target_top1_per_ten: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            seed: 17,
            queries: 50,
            pool_per_video: 6,
            visual_dim: 32,
            text_dim: 64,
            target_top1_per_ten: 3,
        }
    }
}

pub struct SyntheticBenchmark {
    pub params: SyntheticParams,
    pub manifest: BenchmarkManifest,
    pub sets: BTreeMap<String, EmbeddingSet>,
    pub providers: Providers,
    /// Queries whose target is the visual nearest neighbour by construction.
    pub target_is_visual_top1: Vec<String>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() as f32;
    v.into_iter().map(|x| x / n).collect()
}

fn near(rng: &mut ChaCha8Rng, base: &[f32], spread: f32) -> Vec<f32> {
    let noise = unit(gaussian(rng, base.len()));
    unit(base.iter().zip(noise).map(|(b, n)| b + spread * n).collect())
}

impl SyntheticBenchmark {
    pub fn build(params: SyntheticParams) -> Result<Self> {
        let providers = Providers::mock(params.seed, params.text_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut clips = Vec::new();
        let mut queries = Vec::new();
        let mut visual = Vec::new();
        let mut joint = Vec::new();
        let mut top1 = Vec::new();

        for i in 0..params.queries {
            let video = format!("video-{i:03}");
            let clip_id = |role: &str| format!("{video}-{role}");
            let mut query_clip = ClipManifestEntry::new(&clip_id("q"), &video, 0.0, 4.0, "#C C holds the cup");
            query_clip.is_query = true;
            query_clip.is_distractor_candidate = false;
            let mut target = ClipManifestEntry::new(&clip_id("t"), &video, 5.0, 9.0, "#C C opens the cup");
            target.is_target = true;
            target.is_distractor_candidate = false;
            let pool: Vec<ClipManifestEntry> = (0..params.pool_per_video)
                .map(|j| {
                    let start = 10.0 + 5.0 * j as f64;
                    let narration = format!("#C C {} {}", VERBS[j % VERBS.len()], OBJECTS[(i + j) % OBJECTS.len()]);
                    ClipManifestEntry::new(&clip_id(&format!("p{j}")), &video, start, start + 4.0, &narration)
                })
                .collect();

            let instruction = format!("Make it item{i} instead.");
            let caption = caption_video(&query_clip.clip_id, providers.get(ProviderKind::Captioner)?)?;
            let composed = compose_target_caption(
                &caption,
                &instruction,
                &providers.compose_template,
                providers.get(ProviderKind::Reformulator)?,
            )?;
            let target_text = mock_text_vector(params.seed, params.text_dim, &composed.text);

            let centre = unit(gaussian(&mut rng, params.visual_dim));
            let q_vis = near(&mut rng, &centre, 0.3);
            let target_first = i % 10 < params.target_top1_per_ten;
            visual.push((query_clip.clip_id.clone(), q_vis.clone()));
            joint.push((query_clip.clip_id.clone(), unit(gaussian(&mut rng, params.text_dim))));
            let twin = if target_first { &target.clip_id } else { &pool[0].clip_id };
            for c in std::iter::once(&target).chain(&pool) {
                let v = if &c.clip_id == twin {
                    near(&mut rng, &q_vis, 0.05)
                } else {
                    near(&mut rng, &centre, 0.6)
                };
                visual.push((c.clip_id.clone(), v));
                let j = if c.clip_id == target.clip_id {
                    target_text.clone()
                } else {
                    unit(gaussian(&mut rng, params.text_dim))
                };
                joint.push((c.clip_id.clone(), j));
            }
            if target_first {
                top1.push(format!("query-{i:03}"));
            }

            queries.push(QueryRecord {
                query_id: format!("query-{i:03}"),
                query_clip: query_clip.clip_id.clone(),
                instruction,
                target_ids: [target.clip_id.clone()].into(),
                instruction_class: Some(if i % 2 == 0 {
                    InstructionClass::Temporal
                } else {
                    InstructionClass::ObjectCentred
                }),
            });
            clips.push(query_clip);
            clips.push(target);
            clips.extend(pool);
        }

        let mut manifest = BenchmarkManifest::new(clips, queries, BTreeMap::new())?;
        let narration_vectors = embed_narrations(manifest.clips(), providers.get(ProviderKind::TextEmbedder)?)?;
        manifest.sample_all_distractors(&narration_vectors, params.seed)?;

        let to_set = |records: Vec<(ClipId, Vec<f32>)>| {
            EmbeddingSet::new(
                records
                    .into_iter()
                    .map(|(id, v)| Ok((id, Embedding::new(v)?)))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let sets = BTreeMap::from([
            (VISUAL_SET.to_owned(), to_set(visual)?),
            (JOINT_SET.to_owned(), to_set(joint)?),
        ]);
        Ok(SyntheticBenchmark {
            params,
            manifest,
            sets,
            providers,
            target_is_visual_top1: top1,
        })
    }

    pub fn store(&self) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(crate::store::DEFAULT_FRAMES_PER_CLIP);
        for (name, set) in &self.sets {
            store.insert_set(name.clone(), set.clone());
        }
        store
    }

    /// Writes `manifest.jsonl`, one `.cvre` file per embedding set and a
    /// `config.toml` wired to the mock providers.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::CvrError::io(dir, e))?;
        self.manifest.save(&dir.join("manifest.jsonl"))?;
        for (name, set) in &self.sets {
            set.write_file(&dir.join(format!("{name}.cvre")))?;
        }
        let config = format!(
            r#"seed = {seed}
manifest = "manifest.jsonl"
output_dir = "out"

[[embeddings]]
name = "{VISUAL_SET}"
path = "{VISUAL_SET}.cvre"

[[embeddings]]
name = "{JOINT_SET}"
path = "{JOINT_SET}.cvre"

[providers.captioner]
transport = "mock"
seed = {seed}

[providers.reformulator]
transport = "mock"
seed = {seed}

[providers.text_embedder]
transport = "mock"
seed = {seed}
dim = {dim}

[pipeline]
strategy = "tfr-cvr"
n_c = 15
filter_embedding_source = "{VISUAL_SET}"
rank_embedding_source = "{JOINT_SET}"

[eval]
label = "Synthetic"
nc_values = [1, 2, 5, 10, 15]
"#,
            seed = self.params.seed,
            dim = self.params.text_dim,
        );
        std::fs::write(dir.join("config.toml"), config).map_err(|e| crate::error::CvrError::io(dir, e))
    }
}
