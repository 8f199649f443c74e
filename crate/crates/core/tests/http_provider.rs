use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use cvr_core::compose::transport::TransportConfig;
use cvr_core::compose::{
    caption_video, classify_instruction, compose_target_caption, embed_text, InstructionClass, ProviderEndpoint,
    ProviderKind, Providers,
};
use cvr_core::{ClipId, CvrError};

type Log = Arc<Mutex<Vec<(String, Value)>>>;

struct Server {
    url: String,
    log: Log,
}

impl Server {
    fn start() -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log: Log = Arc::default();
        let seen = log.clone();
        std::thread::spawn(move || {
            let mut hits: HashMap<String, usize> = HashMap::new();
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                if let Some((path, body)) = read_request(&stream) {
                    let key = format!("{path} {body}");
                    let n = hits.entry(key).or_default();
                    *n += 1;
                    let (code, reply) = respond(&path, &body, *n);
                    seen.lock().unwrap().push((path, body));
                    write_response(stream, code, &reply);
                }
            }
        });
        Server { url, log }
    }

    fn hits(&self, path: &str) -> usize {
        self.log.lock().unwrap().iter().filter(|(p, _)| p == path).count()
    }

    fn providers(&self, cache_dir: Option<&std::path::Path>) -> Providers {
        let mut p = Providers::default();
        for kind in [
            ProviderKind::Captioner,
            ProviderKind::Reformulator,
            ProviderKind::TextEmbedder,
            ProviderKind::Classifier,
        ] {
            let mut ep = ProviderEndpoint::new(
                kind,
                TransportConfig::RemoteHttp {
                    base_url: format!("{}/", self.url),
                    auth_env: None,
                },
            );
            ep.backoff_ms = 1;
            ep.timeout_ms = 5_000;
            ep.cache_dir = cache_dir.map(|d| d.join(kind.to_string()));
            if kind == ProviderKind::TextEmbedder {
                ep.dim = Some(4);
            }
            p.set(ep).unwrap();
        }
        p
    }
}

fn read_request(stream: &TcpStream) -> Option<(String, Value)> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_owned();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        if h.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((path, serde_json::from_slice(&body).ok()?))
}

fn write_response(mut stream: TcpStream, code: u16, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

fn respond(path: &str, body: &Value, attempt: usize) -> (u16, String) {
    let s = |k: &str| body[k].as_str().unwrap_or_default().to_owned();
    match path {
        "/caption" => match s("clip_id").as_str() {
            "flaky" if attempt < 3 => (503, "{}".into()),
            "down" => (503, "{}".into()),
            "missing" => (404, "{}".into()),
            id => (200, json!({ "caption": format!("#C C  holds the {id}  ") }).to_string()),
        },
        "/compose" => (
            200,
            json!({ "target_caption": format!("{} then {}", s("caption"), s("instruction")) }).to_string(),
        ),
        "/embed" => {
            let text = s("text");
            let vector: Vec<f32> = if text.contains("wide") {
                vec![1.0; 5]
            } else {
                vec![text.len() as f32, 1.0, 2.0, 0.0]
            };
            (200, json!({ "vector": vector, "dim": vector.len() }).to_string())
        }
        "/classify" => (200, json!({ "temporal": s("instruction").contains("after") }).to_string()),
        _ => (404, "{}".into()),
    }
}

#[test]
fn endpoints_speak_the_wire_format() {
    let server = Server::start();
    let p = server.providers(None);

    let caption = caption_video(&ClipId::new("cup"), p.get(ProviderKind::Captioner).unwrap()).unwrap();
    assert_eq!(caption.text, "#C C holds the cup");

    let target = compose_target_caption(
        &caption,
        "  use a mug ",
        &p.compose_template,
        p.get(ProviderKind::Reformulator).unwrap(),
    )
    .unwrap();
    assert_eq!(target.text, "#C C holds the cup then use a mug");

    let e = embed_text("a mug", p.get(ProviderKind::TextEmbedder).unwrap()).unwrap();
    assert_eq!(e.dim(), 4);
    assert!((e.norm() - 1.0).abs() < 1e-6);

    let classifier = p.get(ProviderKind::Classifier).unwrap();
    assert_eq!(
        classify_instruction("do it after lunch", &p.classify_template, classifier).unwrap(),
        InstructionClass::Temporal
    );
    assert_eq!(
        classify_instruction("use a mug", &p.classify_template, classifier).unwrap(),
        InstructionClass::ObjectCentred
    );

    let log = server.log.lock().unwrap();
    assert_eq!(log[0], ("/caption".into(), json!({ "clip_id": "cup" })));
    let (path, compose) = &log[1];
    assert_eq!(path, "/compose");
    assert_eq!(compose["caption"], "#C C holds the cup");
    assert_eq!(compose["instruction"], "use a mug");
    assert_eq!(compose["template_id"], p.compose_template.template_id.as_str());
    assert_eq!(log[2], ("/embed".into(), json!({ "text": "a mug" })));
    assert_eq!(log[3].1["instruction"], "do it after lunch");
}

#[test]
fn server_errors_are_retried_and_client_errors_are_not() {
    let server = Server::start();
    let p = server.providers(None);
    let captioner = p.get(ProviderKind::Captioner).unwrap();

    assert_eq!(caption_video(&ClipId::new("flaky"), captioner).unwrap().text, "#C C holds the flaky");
    assert_eq!(server.hits("/caption"), 3);

    let down = caption_video(&ClipId::new("down"), captioner).unwrap_err();
    assert!(down.is_provider_error(), "{down}");
    assert_eq!(server.hits("/caption"), 3 + 4);

    let missing = caption_video(&ClipId::new("missing"), captioner).unwrap_err();
    assert!(missing.is_provider_error(), "{missing}");
    assert!(missing.to_string().contains("404"), "{missing}");
    assert_eq!(server.hits("/caption"), 3 + 4 + 1);
}

#[test]
fn responses_are_cached_on_disk_by_digest() {
    let server = Server::start();
    let dir = tempfile::tempdir().unwrap();
    let p = server.providers(Some(dir.path()));
    let clip = ClipId::new("bowl");
    let first = caption_video(&clip, p.get(ProviderKind::Captioner).unwrap()).unwrap();
    caption_video(&clip, p.get(ProviderKind::Captioner).unwrap()).unwrap();
    assert_eq!(server.hits("/caption"), 1);
    assert_eq!(p.invocations(ProviderKind::Captioner), 1);

    let files: Vec<_> = std::fs::read_dir(dir.path().join(ProviderKind::Captioner.to_string()))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(files.len(), 1);
    let name = files[0].file_name().unwrap().to_str().unwrap();
    assert!(name.len() == 64 && name.chars().all(|c| c.is_ascii_hexdigit()), "{name}");
    let raw: Value = serde_json::from_slice(&std::fs::read(&files[0]).unwrap()).unwrap();
    assert_eq!(raw, json!({ "caption": "#C C  holds the bowl  " }));

    let fresh = server.providers(Some(dir.path()));
    assert_eq!(caption_video(&clip, fresh.get(ProviderKind::Captioner).unwrap()).unwrap(), first);
    assert_eq!(server.hits("/caption"), 1);
}

#[test]
fn embedder_dimension_is_enforced_and_not_cached() {
    let server = Server::start();
    let dir = tempfile::tempdir().unwrap();
    let p = server.providers(Some(dir.path()));
    let embedder = p.get(ProviderKind::TextEmbedder).unwrap();
    for _ in 0..2 {
        let err = embed_text("too wide", embedder).unwrap_err();
        assert!(matches!(err, CvrError::DimMismatch { expected: 4, found: 5 }), "{err}");
    }
    assert_eq!(server.hits("/embed"), 2);
    assert!(std::fs::read_dir(dir.path().join(ProviderKind::TextEmbedder.to_string())).unwrap().next().is_none());
}
