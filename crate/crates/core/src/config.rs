//! Run configuration (TOML) and the loaded state it describes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkManifest;
use crate::compose::{InstructionClass, PromptTemplate, ProviderEndpoint, ProviderKind, Providers};
use crate::compose::transport::TransportConfig;
use crate::error::{CvrError, Result};
use crate::eval::{EvalConfig, Setting};
use crate::pipeline::{PipelineConfig, Strategy};
use crate::store::{EmbeddingStore, DEFAULT_FRAMES_PER_CLIP};

fn default_frames() -> usize {
    DEFAULT_FRAMES_PER_CLIP
}

fn default_settings() -> Vec<Setting> {
    vec![Setting::Global, Setting::Local]
}

fn default_global_ks() -> Vec<usize> {
    Setting::Global.default_ks()
}

fn default_local_ks() -> Vec<usize> {
    Setting::Local.default_ks()
}

fn default_nc_values() -> Vec<usize> {
    (1..=50).collect()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSource {
    pub name: String,
    pub path: PathBuf,
    /// Records are per frame (`clip@index`) and pooled on load.
    #[serde(default)]
    pub frames: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSlots {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captioner: Option<ProviderEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reformulator: Option<ProviderEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedder: Option<ProviderEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ProviderEndpoint>,
}

impl ProviderSlots {
    fn slots_mut(&mut self) -> [(ProviderKind, &mut Option<ProviderEndpoint>); 4] {
        [
            (ProviderKind::Captioner, &mut self.captioner),
            (ProviderKind::Reformulator, &mut self.reformulator),
            (ProviderKind::TextEmbedder, &mut self.text_embedder),
            (ProviderKind::Classifier, &mut self.classifier),
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProviderEndpoint> {
        [&self.captioner, &self.reformulator, &self.text_embedder, &self.classifier]
            .into_iter()
            .flatten()
    }
}

/// Prompt template files overriding the built-in ones.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compose: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classify: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    /// Embedding set holding narration vectors for distractor sampling. When
    /// absent, narrations are embedded with the text embedder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narration_embeddings: Option<String>,
    #[serde(default = "yes")]
    pub dedup_overlaps: bool,
    #[serde(default)]
    pub group_narrations: bool,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            narration_embeddings: None,
            dedup_overlaps: true,
            group_narrations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Method column of the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
    /// Strategies to evaluate; empty means the pipeline's strategy.
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_global_ks")]
    pub global_ks: Vec<usize>,
    #[serde(default = "default_local_ks")]
    pub local_ks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_filter: Option<InstructionClass>,
    #[serde(default = "default_nc_values")]
    pub nc_values: Vec<usize>,
    #[serde(default)]
    pub random_baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            label: None,
            settings: default_settings(),
            strategies: Vec::new(),
            global_ks: default_global_ks(),
            local_ks: default_local_ks(),
            subset_filter: None,
            nc_values: default_nc_values(),
            random_baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_frames")]
    pub frames_per_clip: usize,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Vec<EmbeddingSource>,
    #[serde(default)]
    pub providers: ProviderSlots,
    #[serde(default)]
    pub templates: TemplatePaths,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CvrError::Config(e.to_string()))?;
        cfg.normalize(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CvrError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, base).map_err(|e| match e {
            CvrError::Config(m) => CvrError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn normalize(&mut self, base: &Path) {
        resolve(base, &mut self.manifest);
        resolve(base, &mut self.output_dir);
        if let Some(c) = &mut self.cache_dir {
            resolve(base, c);
        }
        for e in &mut self.embeddings {
            resolve(base, &mut e.path);
        }
        for p in [&mut self.templates.compose, &mut self.templates.instruction, &mut self.templates.classify]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        for (kind, slot) in self.providers.slots_mut() {
            if let Some(ep) = slot {
                ep.kind = kind;
                if let TransportConfig::FileLookup { path } = &mut ep.transport {
                    resolve(base, path);
                }
                if let Some(c) = &mut ep.cache_dir {
                    resolve(base, c);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        let mut names = BTreeMap::new();
        for e in &self.embeddings {
            if names.insert(e.name.as_str(), ()).is_some() {
                return Err(CvrError::Config(format!("embedding set `{}` declared twice", e.name)));
            }
        }
        for (what, name) in [
            ("pipeline.rank_embedding_source", Some(&self.pipeline.rank_embedding_source)),
            ("pipeline.filter_embedding_source", Some(&self.pipeline.filter_embedding_source)),
            ("benchmark.narration_embeddings", self.benchmark.narration_embeddings.as_ref()),
        ] {
            if let Some(n) = name {
                if !names.contains_key(n.as_str()) {
                    return Err(CvrError::Config(format!("{what} names unknown embedding set `{n}`")));
                }
            }
        }
        for ks in [&self.eval.global_ks, &self.eval.local_ks] {
            if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CvrError::Config(format!("ks must be positive and strictly increasing, got {ks:?}")));
            }
        }
        if self.eval.nc_values.contains(&0) {
            return Err(CvrError::Config("nc_values must be positive".into()));
        }
        Ok(())
    }

    /// Checks that every input file exists.
    pub fn check_paths(&self) -> Result<()> {
        let mut inputs: Vec<&Path> = vec![&self.manifest];
        inputs.extend(self.embeddings.iter().map(|e| e.path.as_path()));
        inputs.extend(
            [&self.templates.compose, &self.templates.instruction, &self.templates.classify]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        );
        for ep in self.providers.iter() {
            if let TransportConfig::FileLookup { path } = &ep.transport {
                inputs.push(path);
            }
        }
        for p in inputs {
            if !p.exists() {
                return Err(CvrError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v)?)
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        if self.eval.strategies.is_empty() {
            vec![self.pipeline.strategy]
        } else {
            self.eval.strategies.clone()
        }
    }

    pub fn eval_config(&self, setting: Setting, strategy: Strategy) -> EvalConfig {
        let mut pipeline = self.pipeline.clone();
        pipeline.strategy = strategy;
        EvalConfig {
            setting,
            ks: match setting {
                Setting::Global => self.eval.global_ks.clone(),
                Setting::Local => self.eval.local_ks.clone(),
            },
            pipeline,
            subset_filter: self.eval.subset_filter,
        }
    }

    pub fn label(&self) -> String {
        self.eval
            .label
            .clone()
            .unwrap_or_else(|| self.pipeline.rank_embedding_source.clone())
    }

    pub fn load_manifest(&self) -> Result<BenchmarkManifest> {
        BenchmarkManifest::load(&self.manifest)
    }

    pub fn load_store(&self) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(self.frames_per_clip);
        for e in &self.embeddings {
            store.load_file(&e.name, &e.path, e.frames)?;
        }
        self.check_dims(&store)?;
        Ok(store)
    }

    /// Text queries are scored against the rank set, so a text embedder with a
    /// declared dimension must agree with it.
    pub fn check_dims(&self, store: &EmbeddingStore) -> Result<()> {
        let Some(expected) = self.providers.text_embedder.as_ref().and_then(|p| p.dim) else {
            return Ok(());
        };
        if self.strategies().iter().all(|s| *s == Strategy::VisualOnly) {
            return Ok(());
        }
        let name = &self.pipeline.rank_embedding_source;
        let found = store.materialize(name, self.pipeline.temporal_mode)?.dim();
        if found != expected {
            return Err(CvrError::Config(format!(
                "embedding set `{name}` has dimension {found}, but the text embedder produces {expected}"
            )));
        }
        Ok(())
    }

    /// Providers from the configured slots, with narrations from `manifest`
    /// for ground-truth captions.
    pub fn build_providers(&self, manifest: Option<&BenchmarkManifest>) -> Result<Providers> {
        let mut p = Providers::default();
        if let Some(path) = &self.templates.compose {
            p.compose_template = PromptTemplate::from_path(path)?;
        }
        if let Some(path) = &self.templates.instruction {
            p.instruction_template = PromptTemplate::from_path(path)?;
        }
        if let Some(path) = &self.templates.classify {
            p.classify_template = PromptTemplate::from_path(path)?;
        }
        for ep in self.providers.iter() {
            let mut ep = ep.clone();
            if ep.cache_dir.is_none() {
                ep.cache_dir = self.cache_dir.clone();
            }
            p.set(ep)?;
        }
        if let Some(m) = manifest {
            p.narrations = m.clips().iter().map(|c| (c.clip_id.clone(), c.narration.clone())).collect();
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7
workers = 2
manifest = "data/manifest.jsonl"
output_dir = "out"
cache_dir = "cache"

[[embeddings]]
name = "visual"
path = "data/visual.cvre"

[[embeddings]]
name = "frames"
path = "data/frames.cvre"
frames = true

[providers.captioner]
transport = "file_lookup"
path = "data/captions.jsonl"

[providers.reformulator]
transport = "http"
base_url = "http://localhost:8080"
auth_env = "CVR_TOKEN"
timeout_ms = 5000
options = { temperature = 0.0 }

[providers.text_embedder]
transport = "mock"
seed = 3
dim = 32

[pipeline]
strategy = "tfr-cvr"
n_c = 15
filter_embedding_source = "frames"
rank_embedding_source = "visual"
temporal_mode = "middle_frame"

[eval]
label = "Demo"
strategies = ["visual-only", "tfr-cvr"]
nc_values = [1, 5, 15]
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::from_toml(SAMPLE, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.manifest, Path::new("/base/data/manifest.jsonl"));
        assert_eq!(cfg.cache_dir.as_deref(), Some(Path::new("/base/cache")));
        assert!(cfg.embeddings[1].frames);
        let cap = cfg.providers.captioner.as_ref().unwrap();
        assert_eq!(cap.kind, ProviderKind::Captioner);
        assert_eq!(
            cap.transport,
            TransportConfig::FileLookup {
                path: "/base/data/captions.jsonl".into()
            }
        );
        assert_eq!(cfg.providers.text_embedder.as_ref().unwrap().kind, ProviderKind::TextEmbedder);
        assert_eq!(cfg.providers.reformulator.as_ref().unwrap().timeout_ms, 5000);
        assert_eq!(cfg.strategies(), vec![Strategy::VisualOnly, Strategy::TfrCvr]);
        assert_eq!(cfg.eval.settings, vec![Setting::Global, Setting::Local]);
        let ec = cfg.eval_config(Setting::Local, Strategy::VisualOnly);
        assert_eq!(ec.ks, vec![1, 2, 3]);
        assert_eq!(ec.pipeline.strategy, Strategy::VisualOnly);
        assert_eq!(cfg.label(), "Demo");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml(SAMPLE, Path::new("/base")).unwrap();
        let json = serde_json::to_string(&cfg.to_json()).unwrap();
        let back = RunConfig::from_json(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&toml_text, Path::new("/elsewhere")).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_source = SAMPLE.replace("rank_embedding_source = \"visual\"", "rank_embedding_source = \"nope\"");
        assert!(RunConfig::from_toml(&bad_source, Path::new("/")).unwrap_err().to_string().contains("nope"));
        let bad_nc = SAMPLE.replace("n_c = 15", "n_c = 0");
        assert!(RunConfig::from_toml(&bad_nc, Path::new("/")).is_err());
        let unknown = format!("bogus = 1\n{SAMPLE}");
        assert!(RunConfig::from_toml(&unknown, Path::new("/")).is_err());
        let bad_strategy = SAMPLE.replace("strategy = \"tfr-cvr\"", "strategy = \"fancy\"");
        assert!(RunConfig::from_toml(&bad_strategy, Path::new("/")).is_err());
    }

    #[test]
    fn missing_inputs_reported() {
        let cfg = RunConfig::from_toml(SAMPLE, Path::new("/definitely/not/here")).unwrap();
        let e = cfg.check_paths().unwrap_err().to_string();
        assert!(e.contains("manifest.jsonl"), "{e}");
    }
}
