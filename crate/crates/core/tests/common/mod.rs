//! Shared helpers for integration tests: synthetic instance fixtures, mock
//! fixture maps keyed by request digest, and a minimal capture HTTP server.

#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use tablecot_core::backend::cache_key;
use tablecot_core::dataset::{write_canonical, CanonicalRecord};
use tablecot_core::prompt::{build_prompt, default_demos};
use tablecot_core::runner::RunConfig;
use tablecot_core::table::{Table, TaskInstance, TaskKind};

/// Synthetic short-answer instances with ids `inst-000`, `inst-001`, … and
/// golds `g<i>`. Table sizes grow with the index so estimates spread across
/// buckets.
pub fn qa_instances(n: usize) -> Vec<TaskInstance> {
    (0..n)
        .map(|i| {
            let rows = 1 + (i % 5) * 3;
            let table = Table::new(
                vec!["item".into(), "value".into()],
                (0..rows)
                    .map(|r| vec![format!("row{r} cell with several words here"), r.to_string()])
                    .collect(),
            );
            TaskInstance {
                id: format!("inst-{i:03}"),
                dataset: "synthetic".into(),
                kind: TaskKind::ShortAnswerQA,
                table,
                query: format!("what is item {i}?"),
                gold: vec![format!("g{i}")],
            }
        })
        .collect()
}

/// Synthetic verification instances alternating SUPPORTS/REFUTES golds.
pub fn fv_instances(n: usize) -> Vec<TaskInstance> {
    (0..n)
        .map(|i| TaskInstance {
            id: format!("claim-{i:03}"),
            dataset: "synthetic".into(),
            kind: TaskKind::FactVerification,
            table: Table::new(
                vec!["team".into(), "points".into()],
                vec![vec![format!("team{i}"), (i * 3).to_string()]],
            ),
            query: format!("team{i} scored {} points", i * 3),
            gold: vec![if i % 2 == 0 { "SUPPORTS" } else { "REFUTES" }.to_string()],
        })
        .collect()
}

/// Synthetic long-form instances whose golds are full sentences.
pub fn lf_instances(n: usize) -> Vec<TaskInstance> {
    (0..n)
        .map(|i| TaskInstance {
            id: format!("long-{i:03}"),
            dataset: "synthetic".into(),
            kind: TaskKind::LongFormQA,
            table: Table::new(
                vec!["venue".into(), "attendance".into()],
                vec![vec![format!("venue {i}"), (1000 + i).to_string()]],
            ),
            query: format!("how many people attended venue {i}?"),
            gold: vec![format!("A total of {} people attended venue {i}.", 1000 + i)],
        })
        .collect()
}

/// Write instances as a canonical JSONL fixture and return its path.
pub fn write_fixture(dir: &Path, instances: &[TaskInstance]) -> PathBuf {
    let records: Vec<CanonicalRecord> =
        instances.iter().cloned().map(CanonicalRecord::from).collect();
    let path = dir.join("fixture.jsonl");
    write_canonical(&records, &path).unwrap();
    path
}

/// Build the digest-keyed fixture map the mock backend needs for a run,
/// using the same prompt assembly the runner itself uses.
pub fn fixtures_for_run(
    config: &RunConfig,
    instances: &[TaskInstance],
    completions_for: impl Fn(&TaskInstance) -> Vec<String>,
) -> HashMap<String, Vec<String>> {
    instances
        .iter()
        .map(|instance| (digest_for(config, instance), completions_for(instance)))
        .collect()
}

/// Request digest for one instance under a run config (for targeted rigging).
pub fn digest_for(config: &RunConfig, instance: &TaskInstance) -> String {
    let demos = default_demos(config.kind, config.shots).unwrap();
    let prompt =
        build_prompt(instance, &demos, config.mode.prompt_mode(), &config.limits).unwrap();
    cache_key(&config.request_for(&prompt.text))
}

/// One captured HTTP request: headers plus body.
#[derive(Debug, Clone)]
pub struct CapturedRequest {
    pub headers: Vec<String>,
    pub body: String,
}

type Responder = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

/// Minimal single-threaded HTTP/1.1 server for wire-capture tests. Each
/// connection serves one request and closes.
pub struct TestServer {
    pub addr: SocketAddr,
    requests: Arc<Mutex<Vec<CapturedRequest>>>,
    hits: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(responder: Box<Responder>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests: Arc<Mutex<Vec<CapturedRequest>>> = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));

        let thread_requests = Arc::clone(&requests);
        let thread_hits = Arc::clone(&hits);
        let thread_shutdown = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let hit = thread_hits.fetch_add(1, Ordering::SeqCst);
                if let Some(captured) = handle_connection(stream, hit, &responder) {
                    thread_requests.lock().unwrap().push(captured);
                }
            }
        });

        TestServer {
            addr,
            requests,
            hits,
            shutdown,
            handle: Some(handle),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<CapturedRequest> {
        self.requests.lock().unwrap().clone()
    }

    /// Responder that answers every request with 200 and `n` echo choices,
    /// where `n` comes from the request body and each choice text is `text`.
    pub fn echo_choices(text: &str) -> Box<Responder> {
        let text = text.to_string();
        Box::new(move |_, body| {
            let parsed: serde_json::Value = serde_json::from_str(body).unwrap_or_default();
            let n = parsed.get("n").and_then(|v| v.as_u64()).unwrap_or(1);
            let choices: Vec<serde_json::Value> = (0..n)
                .map(|_| serde_json::json!({ "text": text }))
                .collect();
            (200, serde_json::json!({ "choices": choices }).to_string())
        })
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(
    stream: TcpStream,
    hit: usize,
    responder: &Responder,
) -> Option<CapturedRequest> {
    let mut reader = BufReader::new(stream);
    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
        headers.push(line);
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).ok()?;
    let body = String::from_utf8_lossy(&body).to_string();

    let (status, response_body) = responder(hit, &body);
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Unknown",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{response_body}",
        response_body.len()
    );
    let mut stream = reader.into_inner();
    stream.write_all(response.as_bytes()).ok()?;
    stream.flush().ok()?;
    Some(CapturedRequest { headers, body })
}
