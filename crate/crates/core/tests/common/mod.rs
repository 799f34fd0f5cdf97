#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use observa_core::backend::{
    BackendConfig, BackendError, ChatBackend, ChatRequest, Message, RetryPolicy,
};
use observa_core::runner::RunConfig;

pub fn fixture(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/wire").join(name);
    std::fs::read(path).unwrap()
}

/// The requests behind each golden body in `tests/fixtures/wire`.
pub fn golden_cases() -> Vec<(&'static str, ChatRequest)> {
    let mut item = ChatRequest::new(
        "",
        vec![Message::counterpart(
            "Rate \"I am the life of the party.\"\nAnswer with 1, 2, 3, 4, or 5.",
        )],
    )
    .temperature(0.0)
    .max_output(16);
    item.model_name = Some("gpt-4o-mini".into());
    vec![
        (
            "dialogue_turn.json",
            ChatRequest::new(
                "Your name is Ethan. You are a 29-year-old male.",
                vec![
                    Message::counterpart("Hey Ethan, do you have a minute?"),
                    Message::agent("Sure, what is up? [CONTINUE]"),
                ],
            )
            .temperature(1.0)
            .max_output(512),
        ),
        ("questionnaire_item.json", item),
        (
            "unicode.json",
            ChatRequest::new("Zoë\tsays “fine”", vec![Message::counterpart("naïve café \\ backslash")])
                .temperature(0.7)
                .max_output(2048),
        ),
    ]
}

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

/// Minimal HTTP/1.1 server answering from a script, then with a fallback.
pub struct StubServer {
    pub url: String,
    recorded: Arc<Mutex<Vec<Recorded>>>,
    served: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start(script: Vec<(u16, String)>, fallback: (u16, String)) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let recorded = Arc::new(Mutex::new(Vec::new()));
        let served = Arc::new(AtomicUsize::new(0));
        let script = Arc::new(script);
        let fallback = Arc::new(fallback);
        {
            let recorded = recorded.clone();
            let served = served.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (recorded, served) = (recorded.clone(), served.clone());
                    let (script, fallback) = (script.clone(), fallback.clone());
                    std::thread::spawn(move || {
                        if let Some(req) = read_request(&stream) {
                            recorded.lock().unwrap().push(req);
                            let i = served.fetch_add(1, Ordering::SeqCst);
                            let (status, body) = script.get(i).unwrap_or(&fallback);
                            write_response(stream, *status, body);
                        }
                    });
                }
            });
        }
        StubServer { url, recorded, served }
    }

    pub fn always(status: u16, body: &str) -> Self {
        Self::start(Vec::new(), (status, body.to_string()))
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.recorded.lock().unwrap().clone()
    }

    pub fn served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }
}

fn read_request(stream: &TcpStream) -> Option<Recorded> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = BTreeMap::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
    }
    let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Recorded {
        method,
        path,
        headers,
        body,
    })
}

fn write_response(mut stream: TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body.as_bytes());
    let _ = stream.flush();
}

pub fn reply_body(text: &str) -> String {
    serde_json::json!({
        "id": "chatcmpl-stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
    })
    .to_string()
}

pub fn stub_config(url: &str) -> BackendConfig {
    BackendConfig {
        endpoint: url.to_string(),
        api_key_env: "OBSERVA_TEST_UNSET_KEY".into(),
        model_name: "gpt-4o".into(),
        requests_per_minute: 10_000,
        retry: RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(10),
            max_backoff: Duration::from_millis(40),
        },
        timeout: Duration::from_secs(10),
    }
}

/// Small mock-backend run configuration writing under `dir`.
pub fn mock_config(dir: &Path, subjects: usize, per_context: usize, scenarios: usize) -> RunConfig {
    RunConfig {
        n_subjects: subjects,
        observers_per_context: [per_context; 3],
        k_scenarios: scenarios,
        resamples: 50,
        output: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Report and statistics files of a run, by relative path.
pub fn report_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["stats", "report"] {
        for entry in std::fs::read_dir(root.join(sub)).unwrap() {
            let entry = entry.unwrap();
            let rel = format!("{sub}/{}", entry.file_name().to_string_lossy());
            out.insert(rel, std::fs::read(entry.path()).unwrap());
        }
    }
    out
}

/// Fails every call after the first `budget` with a transport error.
pub struct FailAfter<B> {
    pub inner: B,
    pub budget: usize,
    pub calls: AtomicUsize,
}

impl<B: ChatBackend> ChatBackend for FailAfter<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(BackendError::Transport {
                attempts: 1,
                message: "connection refused".into(),
            });
        }
        self.inner.complete(request)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}
