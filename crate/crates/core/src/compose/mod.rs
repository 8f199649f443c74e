//! The language path of caption-based retrieval: video captioning, target
//! caption composition, text embedding and instruction classification, each
//! behind a cached, retrying provider.

pub mod cache;
pub mod prompt;
pub mod transport;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, ClipId, Embedding};
use crate::error::{CvrError, Result};

pub use cache::ResponseCache;
pub use prompt::PromptTemplate;
pub use transport::{
    FileLookupTransport, HttpTransport, MockTransport, Request, Transport, TransportConfig,
    TransportError,
};

/// Trims and collapses internal whitespace. Case is preserved.
pub fn canonicalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Captioner,
    Reformulator,
    TextEmbedder,
    Classifier,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Captioner => "captioner",
            ProviderKind::Reformulator => "reformulator",
            ProviderKind::TextEmbedder => "text embedder",
            ProviderKind::Classifier => "classifier",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Predicted,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source: CaptionSource,
}

impl Caption {
    pub fn new(text: &str, source: CaptionSource) -> Result<Self> {
        let text = canonicalize_text(text);
        if text.is_empty() {
            return Err(CvrError::Config("caption is empty".into()));
        }
        Ok(Caption { text, source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCaption {
    pub text: String,
    pub caption: Caption,
    pub instruction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionClass {
    Temporal,
    ObjectCentred,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_in_flight() -> usize {
    8
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

/// Configuration of one provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    /// Filled from the config slot when omitted.
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(flatten)]
    pub transport: TransportConfig,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Expected embedding dimension (text embedders; also the mock's output dim).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Opaque decoding settings forwarded to remote providers
    /// (temperature and the like).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, serde_json::Value>,
}

impl ProviderEndpoint {
    pub fn new(kind: ProviderKind, transport: TransportConfig) -> Self {
        ProviderEndpoint {
            kind,
            transport,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            cache_dir: None,
            dim: None,
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            options: BTreeMap::new(),
        }
    }

    pub fn mock(kind: ProviderKind, seed: u64) -> Self {
        Self::new(kind, TransportConfig::MockDeterministic { seed })
    }

    pub fn file_lookup(kind: ProviderKind, path: impl Into<PathBuf>) -> Self {
        Self::new(kind, TransportConfig::FileLookup { path: path.into() })
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = Some(dim);
        self
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }
}

/// Counting semaphore bounding concurrent provider calls.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock();
        while *used >= self.limit {
            self.freed.wait(&mut used);
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.freed.notify_one();
    }
}

/// A configured provider: transport plus response cache, retry policy and
/// an invocation counter.
pub struct Provider {
    endpoint: ProviderEndpoint,
    transport: Box<dyn Transport>,
    cache: ResponseCache,
    in_flight: InFlight,
    invocations: AtomicU64,
}

impl fmt::Debug for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Provider")
            .field("endpoint", &self.endpoint)
            .field("invocations", &self.invocations())
            .finish()
    }
}

impl Provider {
    /// Builds the transport described by `endpoint`. `templates` are handed to
    /// the mock transport so it can answer in-context examples.
    pub fn from_endpoint(endpoint: ProviderEndpoint, templates: &[PromptTemplate]) -> Result<Self> {
        let transport: Box<dyn Transport> = match &endpoint.transport {
            TransportConfig::RemoteHttp { base_url, auth_env } => Box::new(HttpTransport::new(
                base_url,
                Duration::from_millis(endpoint.timeout_ms),
                auth_env.as_deref(),
            )?),
            TransportConfig::MockDeterministic { seed } => Box::new(MockTransport::new(
                *seed,
                endpoint.dim.unwrap_or(64),
                templates.iter().cloned(),
            )),
            TransportConfig::FileLookup { path } => {
                Box::new(FileLookupTransport::load(endpoint.kind, path)?)
            }
        };
        Self::with_transport(endpoint, transport)
    }

    pub fn with_transport(endpoint: ProviderEndpoint, transport: Box<dyn Transport>) -> Result<Self> {
        let cache = match &endpoint.cache_dir {
            Some(dir) => ResponseCache::with_dir(dir)?,
            None => ResponseCache::in_memory(),
        };
        Ok(Provider {
            in_flight: InFlight::new(endpoint.max_in_flight),
            endpoint,
            transport,
            cache,
            invocations: AtomicU64::new(0),
        })
    }

    pub fn kind(&self) -> ProviderKind {
        self.endpoint.kind
    }

    pub fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    /// Number of requests that reached the transport (cache misses, counting
    /// each retry attempt once).
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    fn expect_kind(&self, expected: ProviderKind) -> Result<()> {
        if self.kind() != expected {
            return Err(CvrError::WrongProviderKind {
                expected,
                actual: self.kind(),
            });
        }
        Ok(())
    }

    fn cache_key(&self, request: &Request, template_version: &str) -> String {
        let mut body = request.body();
        if !self.endpoint.options.is_empty() {
            body["options"] = serde_json::to_value(&self.endpoint.options).expect("options serialize");
        }
        let kind = self.kind().to_string();
        let body = transport::to_bytes(body);
        cache::request_digest(&[kind.as_bytes(), template_version.as_bytes(), &body])
    }

    fn call_with_retries(&self, request: &Request) -> Result<Vec<u8>> {
        let mut attempt = 0;
        loop {
            self.invocations.fetch_add(1, Ordering::SeqCst);
            let result = {
                let _slot = self.in_flight.acquire();
                self.transport.call(request)
            };
            match result {
                Ok(bytes) => return Ok(bytes),
                Err(TransportError::Transient(reason)) if attempt < self.endpoint.retries => {
                    let wait = self.endpoint.backoff_ms.saturating_mul(1 << attempt.min(16));
                    tracing::warn!(kind = %self.kind(), attempt, %reason, "retrying provider call");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(TransportError::Transient(reason)) | Err(TransportError::Permanent(reason)) => {
                    return Err(CvrError::ProviderUnavailable {
                        kind: self.kind(),
                        reason,
                    })
                }
            }
        }
    }

    /// Sends `request` through the cache and parses the response with `parse`.
    /// Responses that fail to parse are reported and never cached.
    fn request<T>(
        &self,
        request: Request,
        template_version: &str,
        parse: impl Fn(&[u8]) -> Result<T>,
    ) -> Result<T> {
        let key = self.cache_key(&request, template_version);
        let bytes = self.cache.get_or_fetch(
            &key,
            || self.call_with_retries(&request),
            |b| parse(b).map(|_| ()),
        )?;
        parse(&bytes)
    }

    fn malformed(&self, reason: impl Into<String>) -> CvrError {
        CvrError::MalformedResponse {
            kind: self.kind(),
            reason: reason.into(),
        }
    }

    fn json_field<'a>(&self, v: &'a serde_json::Value, field: &str) -> Result<&'a serde_json::Value> {
        v.get(field)
            .ok_or_else(|| self.malformed(format!("missing field `{field}`")))
    }

    fn parse_text_field(&self, bytes: &[u8], field: &str) -> Result<String> {
        let v: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| self.malformed(e.to_string()))?;
        let s = self
            .json_field(&v, field)?
            .as_str()
            .ok_or_else(|| self.malformed(format!("`{field}` is not a string")))?;
        let s = canonicalize_text(s);
        if s.is_empty() {
            return Err(CvrError::EmptyResponse { kind: self.kind() });
        }
        Ok(s)
    }
}

/// Captions the clip with a captioning model. Repeat calls are served from
/// the cache.
pub fn caption_video(clip: &ClipId, provider: &Provider) -> Result<Caption> {
    provider.expect_kind(ProviderKind::Captioner)?;
    let text = provider.request(
        Request::Caption {
            clip_id: clip.to_string(),
        },
        "",
        |b| provider.parse_text_field(b, "caption"),
    )?;
    Caption::new(&text, CaptionSource::Predicted)
}

/// Asks the reformulator to merge a caption and a modification instruction
/// into a description of the target video.
pub fn compose_target_caption(
    caption: &Caption,
    instruction: &str,
    template: &PromptTemplate,
    provider: &Provider,
) -> Result<TargetCaption> {
    provider.expect_kind(ProviderKind::Reformulator)?;
    let instruction = canonicalize_text(instruction);
    let prompt = template.render(&prompt::inputs([
        ("caption", &caption.text),
        ("instruction", &instruction),
    ]))?;
    let text = provider.request(
        Request::Compose {
            caption: caption.text.clone(),
            instruction: instruction.clone(),
            template_id: template.template_id.clone(),
            prompt,
        },
        &template.version,
        |b| provider.parse_text_field(b, "target_caption"),
    )?;
    Ok(TargetCaption {
        text,
        caption: caption.clone(),
        instruction,
    })
}

/// Embeds text and returns a unit-norm vector. When the endpoint declares a
/// dimension the response must match it.
pub fn embed_text(text: &str, provider: &Provider) -> Result<Embedding> {
    provider.expect_kind(ProviderKind::TextEmbedder)?;
    let text = canonicalize_text(text);
    if text.is_empty() {
        return Err(CvrError::Config("cannot embed empty text".into()));
    }
    let expected_dim = provider.endpoint.dim;
    let parse = |bytes: &[u8]| -> Result<Embedding> {
        #[derive(Deserialize)]
        struct EmbedResponse {
            vector: Vec<f32>,
            dim: Option<usize>,
        }
        let r: EmbedResponse =
            serde_json::from_slice(bytes).map_err(|e| provider.malformed(e.to_string()))?;
        if r.vector.is_empty() {
            return Err(CvrError::EmptyResponse {
                kind: provider.kind(),
            });
        }
        if let Some(d) = r.dim {
            if d != r.vector.len() {
                return Err(provider.malformed(format!(
                    "declared dim {d} but vector has {}",
                    r.vector.len()
                )));
            }
        }
        if let Some(expected) = expected_dim {
            if expected != r.vector.len() {
                return Err(CvrError::DimMismatch {
                    expected,
                    found: r.vector.len(),
                });
            }
        }
        let e = Embedding::new(r.vector).map_err(|e| provider.malformed(e.to_string()))?;
        l2_normalize(&e).map_err(|e| provider.malformed(e.to_string()))
    };
    provider.request(Request::Embed { text }, "", parse)
}

/// Temporal iff the classifier answers yes.
pub fn classify_instruction(
    instruction: &str,
    template: &PromptTemplate,
    provider: &Provider,
) -> Result<InstructionClass> {
    provider.expect_kind(ProviderKind::Classifier)?;
    let instruction = canonicalize_text(instruction);
    let prompt = template.render(&prompt::inputs([("instruction", &instruction)]))?;
    provider.request(
        Request::Classify {
            instruction,
            template_id: template.template_id.clone(),
            prompt,
        },
        &template.version,
        |bytes| {
            let v: serde_json::Value =
                serde_json::from_slice(bytes).map_err(|e| provider.malformed(e.to_string()))?;
            match provider.json_field(&v, "temporal")?.as_bool() {
                Some(true) => Ok(InstructionClass::Temporal),
                Some(false) => Ok(InstructionClass::ObjectCentred),
                None => Err(provider.malformed("`temporal` is not a boolean")),
            }
        },
    )
}

/// Writes a modification instruction turning the source narration into the
/// target narration. Used when curating a benchmark.
pub fn generate_instruction(
    source_narration: &str,
    target_narration: &str,
    template: &PromptTemplate,
    provider: &Provider,
) -> Result<String> {
    provider.expect_kind(ProviderKind::Reformulator)?;
    let (source, target) = (
        canonicalize_text(source_narration),
        canonicalize_text(target_narration),
    );
    if source.is_empty() || target.is_empty() {
        return Err(CvrError::Config("narrations must be non-empty".into()));
    }
    let prompt = template.render(&prompt::inputs([
        ("source_narration", &source),
        ("target_narration", &target),
    ]))?;
    provider.request(
        Request::Instruct {
            source_narration: source,
            target_narration: target,
            template_id: template.template_id.clone(),
            prompt,
        },
        &template.version,
        |b| provider.parse_text_field(b, "instruction"),
    )
}

/// The providers and templates the language path needs, plus the
/// ground-truth narration table used when captions come from annotations.
#[derive(Debug, Clone)]
pub struct Providers {
    pub captioner: Option<Arc<Provider>>,
    pub reformulator: Option<Arc<Provider>>,
    pub text_embedder: Option<Arc<Provider>>,
    pub classifier: Option<Arc<Provider>>,
    pub compose_template: PromptTemplate,
    pub instruction_template: PromptTemplate,
    pub classify_template: PromptTemplate,
    pub narrations: BTreeMap<ClipId, String>,
}

impl Default for Providers {
    fn default() -> Self {
        Providers {
            captioner: None,
            reformulator: None,
            text_embedder: None,
            classifier: None,
            compose_template: PromptTemplate::tf_cvr(),
            instruction_template: PromptTemplate::instruction_generation(),
            classify_template: PromptTemplate::temporal_event_detection(),
            narrations: BTreeMap::new(),
        }
    }
}

impl Providers {
    /// All four kinds backed by the deterministic mock.
    pub fn mock(seed: u64, text_dim: usize) -> Result<Self> {
        let mut p = Providers::default();
        p.set(ProviderEndpoint::mock(ProviderKind::Captioner, seed))?;
        p.set(ProviderEndpoint::mock(ProviderKind::Reformulator, seed))?;
        p.set(ProviderEndpoint::mock(ProviderKind::TextEmbedder, seed).with_dim(text_dim))?;
        p.set(ProviderEndpoint::mock(ProviderKind::Classifier, seed))?;
        Ok(p)
    }

    fn templates(&self) -> Vec<PromptTemplate> {
        vec![
            self.compose_template.clone(),
            self.instruction_template.clone(),
            self.classify_template.clone(),
        ]
    }

    /// Installs a provider in the slot matching its kind.
    pub fn set(&mut self, endpoint: ProviderEndpoint) -> Result<()> {
        let provider = Provider::from_endpoint(endpoint, &self.templates())?;
        self.install(provider);
        Ok(())
    }

    pub fn install(&mut self, provider: Provider) {
        let slot = match provider.kind() {
            ProviderKind::Captioner => &mut self.captioner,
            ProviderKind::Reformulator => &mut self.reformulator,
            ProviderKind::TextEmbedder => &mut self.text_embedder,
            ProviderKind::Classifier => &mut self.classifier,
        };
        *slot = Some(Arc::new(provider));
    }

    pub fn get(&self, kind: ProviderKind) -> Result<&Provider> {
        let slot = match kind {
            ProviderKind::Captioner => &self.captioner,
            ProviderKind::Reformulator => &self.reformulator,
            ProviderKind::TextEmbedder => &self.text_embedder,
            ProviderKind::Classifier => &self.classifier,
        };
        slot.as_deref().ok_or(CvrError::ProviderNotConfigured(kind))
    }

    pub fn invocations(&self, kind: ProviderKind) -> u64 {
        self.get(kind).map_or(0, Provider::invocations)
    }
}
