//! Wire requests and the transports that answer them.
//!
//! Every transport speaks the same JSON bodies, so a response is cached and
//! parsed identically whether it came from a remote service, a static table
//! or the deterministic mock.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{CvrError, Result};
use crate::formats;

use super::prompt::PromptTemplate;
use super::{canonicalize_text, ProviderKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Caption {
        clip_id: String,
    },
    Compose {
        caption: String,
        instruction: String,
        template_id: String,
        prompt: String,
    },
    Instruct {
        source_narration: String,
        target_narration: String,
        template_id: String,
        prompt: String,
    },
    Embed {
        text: String,
    },
    Classify {
        instruction: String,
        template_id: String,
        prompt: String,
    },
}

impl Request {
    pub fn kind(&self) -> ProviderKind {
        match self {
            Request::Caption { .. } => ProviderKind::Captioner,
            Request::Compose { .. } | Request::Instruct { .. } => ProviderKind::Reformulator,
            Request::Embed { .. } => ProviderKind::TextEmbedder,
            Request::Classify { .. } => ProviderKind::Classifier,
        }
    }

    pub fn path(&self) -> &'static str {
        match self {
            Request::Caption { .. } => "/caption",
            Request::Compose { .. } => "/compose",
            Request::Instruct { .. } => "/instruct",
            Request::Embed { .. } => "/embed",
            Request::Classify { .. } => "/classify",
        }
    }

    /// JSON request body. Object keys serialize in sorted order, which makes
    /// the body canonical.
    pub fn body(&self) -> serde_json::Value {
        match self {
            Request::Caption { clip_id } => json!({ "clip_id": clip_id }),
            Request::Compose {
                caption,
                instruction,
                template_id,
                prompt,
            } => json!({
                "caption": caption,
                "instruction": instruction,
                "template_id": template_id,
                "prompt": prompt,
            }),
            Request::Instruct {
                source_narration,
                target_narration,
                template_id,
                prompt,
            } => json!({
                "source_narration": source_narration,
                "target_narration": target_narration,
                "template_id": template_id,
                "prompt": prompt,
            }),
            Request::Embed { text } => json!({ "text": text }),
            Request::Classify {
                instruction,
                template_id,
                prompt,
            } => json!({
                "instruction": instruction,
                "template_id": template_id,
                "prompt": prompt,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection failures, 5xx, 429.
    Transient(String),
    Permanent(String),
}

pub trait Transport: Send + Sync {
    fn call(&self, request: &Request) -> std::result::Result<Vec<u8>, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "snake_case")]
pub enum TransportConfig {
    #[serde(rename = "http")]
    RemoteHttp {
        base_url: String,
        /// Name of the environment variable holding a bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env: Option<String>,
    },
    #[serde(rename = "mock")]
    MockDeterministic {
        #[serde(default)]
        seed: u64,
    },
    FileLookup {
        path: PathBuf,
    },
}

pub(crate) fn to_bytes(v: serde_json::Value) -> Vec<u8> {
    serde_json::to_vec(&v).expect("json values serialize")
}

fn seed_bytes(seed: u64, parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

/// Lower-cased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bag-of-tokens embedding: the sum of one seeded Gaussian vector per token,
/// L2-normalized. Texts without tokens hash as a whole.
pub fn mock_text_vector(seed: u64, dim: usize, text: &str) -> Vec<f32> {
    let mut tokens = tokenize(text);
    if tokens.is_empty() {
        tokens.push(canonicalize_text(text));
    }
    let mut acc = vec![0f64; dim];
    for t in &tokens {
        let mut rng = ChaCha8Rng::from_seed(seed_bytes(seed, &["token", t]));
        for a in acc.iter_mut() {
            *a += <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
    }
    let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    acc.into_iter().map(|x| (x / n) as f32).collect()
}

const MOCK_VERBS: &[&str] = &[
    "picks up", "puts down", "cuts", "washes", "holds", "opens", "closes", "moves", "wipes",
    "pours", "stirs", "folds",
];
const MOCK_OBJECTS: &[&str] = &[
    "the cup", "the knife", "the cloth", "the plate", "the bottle", "the lid", "the box",
    "the brush", "the bowl", "the paper", "the jug", "the shoe",
];

/// Deterministic stand-in for every provider kind.
///
/// Template-driven requests whose inputs exactly match one of the template's
/// in-context examples are answered with that example's output; everything
/// else gets a fixed synthetic answer (see each arm).
#[derive(Debug, Clone)]
pub struct MockTransport {
    seed: u64,
    dim: usize,
    templates: HashMap<String, PromptTemplate>,
}

impl MockTransport {
    pub fn new(seed: u64, dim: usize, templates: impl IntoIterator<Item = PromptTemplate>) -> Self {
        MockTransport {
            seed,
            dim,
            templates: templates
                .into_iter()
                .map(|t| (t.template_id.clone(), t))
                .collect(),
        }
    }

    fn memorized(&self, template_id: &str, inputs: &BTreeMap<String, String>) -> Option<String> {
        self.templates
            .get(template_id)
            .and_then(|t| t.example_output(inputs))
            .map(str::to_owned)
    }

    fn pick(&self, parts: &[&str], n: usize) -> usize {
        let b = seed_bytes(self.seed, parts);
        (u64::from_le_bytes(b[..8].try_into().unwrap()) % n as u64) as usize
    }
}

impl Transport for MockTransport {
    fn call(&self, request: &Request) -> std::result::Result<Vec<u8>, TransportError> {
        let body = match request {
            Request::Caption { clip_id } => {
                let verb = MOCK_VERBS[self.pick(&["verb", clip_id], MOCK_VERBS.len())];
                let obj = MOCK_OBJECTS[self.pick(&["object", clip_id], MOCK_OBJECTS.len())];
                json!({ "caption": format!("#C C {verb} {obj}.") })
            }
            Request::Compose {
                caption,
                instruction,
                template_id,
                ..
            } => {
                let inputs = super::prompt::inputs([("caption", caption), ("instruction", instruction)]);
                let out = self
                    .memorized(template_id, &inputs)
                    .unwrap_or_else(|| format!("{caption} | {instruction}"));
                json!({ "target_caption": out })
            }
            Request::Instruct {
                source_narration,
                target_narration,
                template_id,
                ..
            } => {
                let inputs = super::prompt::inputs([
                    ("source_narration", source_narration),
                    ("target_narration", target_narration),
                ]);
                let out = self.memorized(template_id, &inputs).unwrap_or_else(|| {
                    let source = tokenize(source_narration);
                    let added: Vec<String> = tokenize(target_narration)
                        .into_iter()
                        .filter(|t| !source.contains(t))
                        .collect();
                    if added.is_empty() {
                        "No change.".to_owned()
                    } else {
                        format!("Change to: {}.", added.join(" "))
                    }
                });
                json!({ "instruction": out })
            }
            Request::Embed { text } => {
                json!({ "vector": mock_text_vector(self.seed, self.dim, text), "dim": self.dim })
            }
            Request::Classify {
                instruction,
                template_id,
                ..
            } => {
                let inputs = super::prompt::inputs([("instruction", instruction)]);
                let temporal = match self.memorized(template_id, &inputs) {
                    Some(answer) => answer.trim().eq_ignore_ascii_case("yes"),
                    None => self.pick(&["classify", instruction], 2) == 0,
                };
                json!({ "temporal": temporal })
            }
        };
        Ok(to_bytes(body))
    }
}

#[derive(Debug, Deserialize)]
struct CaptionRow {
    clip_id: String,
    caption: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ReformulatorRow {
    Compose {
        caption: String,
        instruction: String,
        target_caption: String,
    },
    Instruct {
        source_narration: String,
        target_narration: String,
        instruction: String,
    },
}

#[derive(Debug, Deserialize)]
struct TextVectorRow {
    text: String,
    vector: Vec<f32>,
}

#[derive(Debug, Deserialize)]
struct ClassifyRow {
    instruction: String,
    temporal: bool,
}

fn key(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| canonicalize_text(p))
        .collect::<Vec<_>>()
        .join("\u{1f}")
}

/// Answers requests from a static table on disk.
#[derive(Debug, Clone)]
pub struct FileLookupTransport {
    kind: ProviderKind,
    path: PathBuf,
    table: HashMap<String, serde_json::Value>,
}

impl FileLookupTransport {
    /// Table layouts per kind:
    /// - captioner: JSONL `{"clip_id", "caption"}`
    /// - reformulator: JSONL `{"caption", "instruction", "target_caption"}` or
    ///   `{"source_narration", "target_narration", "instruction"}`
    /// - text embedder: a CVRE embedding file whose record ids are the texts,
    ///   or JSONL `{"text", "vector"}` when the path ends in `.jsonl`
    /// - classifier: JSONL `{"instruction", "temporal"}`
    pub fn load(kind: ProviderKind, path: &Path) -> Result<Self> {
        let mut table = HashMap::new();
        match kind {
            ProviderKind::Captioner => {
                for row in formats::read_jsonl::<CaptionRow>(path)? {
                    table.insert(key(&[&row.clip_id]), json!({ "caption": row.caption }));
                }
            }
            ProviderKind::Reformulator => {
                for row in formats::read_jsonl::<ReformulatorRow>(path)? {
                    match row {
                        ReformulatorRow::Compose {
                            caption,
                            instruction,
                            target_caption,
                        } => table.insert(
                            key(&["compose", &caption, &instruction]),
                            json!({ "target_caption": target_caption }),
                        ),
                        ReformulatorRow::Instruct {
                            source_narration,
                            target_narration,
                            instruction,
                        } => table.insert(
                            key(&["instruct", &source_narration, &target_narration]),
                            json!({ "instruction": instruction }),
                        ),
                    };
                }
            }
            ProviderKind::TextEmbedder => {
                let rows: Vec<(String, Vec<f32>)> =
                    if path.extension().is_some_and(|e| e == "jsonl") {
                        formats::read_jsonl::<TextVectorRow>(path)?
                            .into_iter()
                            .map(|r| (r.text, r.vector))
                            .collect()
                    } else {
                        formats::read_embeddings_file(path)?
                            .records
                            .into_iter()
                            .map(|r| (r.id, r.values))
                            .collect()
                    };
                for (text, vector) in rows {
                    let dim = vector.len();
                    table.insert(key(&[&text]), json!({ "vector": vector, "dim": dim }));
                }
            }
            ProviderKind::Classifier => {
                for row in formats::read_jsonl::<ClassifyRow>(path)? {
                    table.insert(key(&[&row.instruction]), json!({ "temporal": row.temporal }));
                }
            }
        }
        Ok(FileLookupTransport {
            kind,
            path: path.to_owned(),
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Transport for FileLookupTransport {
    fn call(&self, request: &Request) -> std::result::Result<Vec<u8>, TransportError> {
        let k = match request {
            Request::Caption { clip_id } => key(&[clip_id]),
            Request::Compose {
                caption,
                instruction,
                ..
            } => key(&["compose", caption, instruction]),
            Request::Instruct {
                source_narration,
                target_narration,
                ..
            } => key(&["instruct", source_narration, target_narration]),
            Request::Embed { text } => key(&[text]),
            Request::Classify { instruction, .. } => key(&[instruction]),
        };
        self.table.get(&k).cloned().map(to_bytes).ok_or_else(|| {
            TransportError::Permanent(format!(
                "no {} entry in {} for {}",
                self.kind,
                self.path.display(),
                k.replace('\u{1f}', " / ")
            ))
        })
    }
}

/// JSON over HTTP POST.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    base_url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration, auth_env: Option<&str>) -> Result<Self> {
        let token = match auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                CvrError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        Ok(HttpTransport {
            base_url: base_url.trim_end_matches('/').to_owned(),
            token,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        })
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &Request) -> std::result::Result<Vec<u8>, TransportError> {
        let url = format!("{}{}", self.base_url, request.path());
        let mut req = self.agent.post(&url).set("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_bytes(&to_bytes(request.body())) {
            Ok(resp) => {
                let mut buf = Vec::new();
                resp.into_reader()
                    .read_to_end(&mut buf)
                    .map_err(|e| TransportError::Transient(format!("reading body: {e}")))?;
                Ok(buf)
            }
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(TransportError::Transient(format!("{url}: HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => {
                Err(TransportError::Permanent(format!("{url}: HTTP {code}")))
            }
            Err(e) => Err(TransportError::Transient(format!("{url}: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_vectors_are_unit_and_stable() {
        let a = mock_text_vector(1, 32, "#C C cleans the jug.");
        let b = mock_text_vector(1, 32, "#c c CLEANS the jug");
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_ne!(a, mock_text_vector(2, 32, "#C C cleans the jug."));
    }

    #[test]
    fn mock_caption_is_deterministic() {
        let m = MockTransport::new(7, 8, []);
        let r = Request::Caption { clip_id: "clip-1".into() };
        assert_eq!(m.call(&r).unwrap(), m.call(&r).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&m.call(&r).unwrap()).unwrap();
        assert!(v["caption"].as_str().unwrap().starts_with("#C C "));
    }

    #[test]
    fn mock_compose_concatenates() {
        let m = MockTransport::new(0, 8, [PromptTemplate::tf_cvr()]);
        let r = Request::Compose {
            caption: "#C C opens the door.".into(),
            instruction: "Close it.".into(),
            template_id: "tf-cvr".into(),
            prompt: String::new(),
        };
        let v: serde_json::Value = serde_json::from_slice(&m.call(&r).unwrap()).unwrap();
        assert_eq!(v["target_caption"], "#C C opens the door. | Close it.");
    }

    #[test]
    fn request_bodies_match_wire_format() {
        assert_eq!(
            Request::Caption { clip_id: "a".into() }.body().to_string(),
            r#"{"clip_id":"a"}"#
        );
        assert_eq!(Request::Embed { text: "t".into() }.body().to_string(), r#"{"text":"t"}"#);
        let c = Request::Compose {
            caption: "c".into(),
            instruction: "i".into(),
            template_id: "tf-cvr".into(),
            prompt: "p".into(),
        };
        assert_eq!(c.path(), "/compose");
        assert_eq!(
            c.body().to_string(),
            r#"{"caption":"c","instruction":"i","prompt":"p","template_id":"tf-cvr"}"#
        );
    }

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(tokenize("#C C picks-up the JUG."), vec!["c", "c", "picks", "up", "the", "jug"]);
    }
}
