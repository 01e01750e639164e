#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

type Reply = dyn Fn(&str) -> String + Send + Sync;

/// Minimal OpenAI-compatible chat-completions server on a loopback port.
pub struct StubServer {
    pub base_url: String,
    requests: Arc<AtomicUsize>,
    script: Arc<Mutex<VecDeque<(u16, String)>>>,
    auth: Arc<Mutex<Vec<String>>>,
    limit: Arc<AtomicUsize>,
}

impl StubServer {
    /// `reply` maps the user message content to the completion text.
    pub fn start(reply: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let script = Arc::new(Mutex::new(VecDeque::new()));
        let auth = Arc::new(Mutex::new(Vec::new()));
        let limit = Arc::new(AtomicUsize::new(usize::MAX));
        let reply: Arc<Reply> = Arc::new(reply);
        let (r, s, a, l) = (requests.clone(), script.clone(), auth.clone(), limit.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (r, s, a, l, reply) = (r.clone(), s.clone(), a.clone(), l.clone(), reply.clone());
                std::thread::spawn(move || {
                    let _ = handle(stream, &r, &s, &a, &l, &*reply);
                });
            }
        });
        Self {
            base_url,
            requests,
            script,
            auth,
            limit,
        }
    }

    /// Echoes a fixed completion for every prompt.
    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::start(move |_| text.clone())
    }

    /// The next request gets this status and body instead of a completion.
    pub fn inject(&self, status: u16, body: &str) {
        self.script.lock().unwrap().push_back((status, body.to_string()));
    }

    /// Requests after the first `n` (counted from server start) get HTTP 500.
    pub fn fail_after(&self, n: usize) {
        self.limit.store(n, Ordering::SeqCst);
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn auth_headers(&self) -> Vec<String> {
        self.auth.lock().unwrap().clone()
    }
}

fn handle(
    stream: TcpStream,
    requests: &AtomicUsize,
    script: &Mutex<VecDeque<(u16, String)>>,
    auth: &Mutex<Vec<String>>,
    limit: &AtomicUsize,
    reply: &Reply,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.is_empty() {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h)?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':').unwrap_or((h, ""));
        match name.trim().to_ascii_lowercase().as_str() {
            "content-length" => content_length = value.trim().parse().unwrap_or(0),
            "authorization" => auth.lock().unwrap().push(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let seen = requests.fetch_add(1, Ordering::SeqCst) + 1;

    let scripted = script.lock().unwrap().pop_front();
    let (status, payload) = match scripted {
        Some(injected) => injected,
        None if seen > limit.load(Ordering::SeqCst) => (500, r#"{"error":"down"}"#.to_string()),
        None => {
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            let prompt = req["messages"][0]["content"].as_str().unwrap_or_default();
            let text = reply(prompt);
            (
                200,
                serde_json::json!({
                    "id": "stub",
                    "object": "chat.completion",
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
                })
                .to_string(),
            )
        }
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn run(args: &[&str], out: &Path, pool: Option<&Path>) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_demoval"));
    cmd.arg("--config")
        .arg(fixtures().join("config.json"))
        .arg("--backend")
        .arg("synthetic")
        .arg("--out")
        .arg(out);
    if let Some(p) = pool {
        cmd.arg("--pool").arg(p);
    }
    let output = cmd.args(args).output().map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!(
            "`{}` exited with {:?}: {}",
            args.join(" "),
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

/// noise inject, value on the noisy pool, exp-add, exp-remove, noise report; then checks the
/// manifest lists every file with a matching digest.
pub fn cli_smoke(out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    run(&["noise", "inject"], out, None)?;
    let noisy = out.join("noisy_pool.jsonl");
    run(&["value"], out, Some(&noisy))?;
    run(&["exp-add"], out, Some(&noisy))?;
    run(&["exp-remove"], out, Some(&noisy))?;
    let report = run(&["noise", "report"], out, None)?;
    let elapsed = start.elapsed();

    let report: serde_json::Value = serde_json::from_str(report.trim()).map_err(|e| e.to_string())?;
    if report["n_flipped"] != 10 || report["n"] != 100 {
        return Err(format!("unexpected noise report {report}"));
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("manifest.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    if manifest["partial"] != false {
        return Err("manifest marked partial".into());
    }
    let mut listed = Vec::new();
    for f in manifest["files"].as_array().ok_or("manifest has no files")? {
        let path = f["path"].as_str().ok_or("entry without path")?;
        let bytes = std::fs::read(out.join(path)).map_err(|e| format!("{path}: {e}"))?;
        if demoval::types::sha256_hex(&bytes) != f["sha256"].as_str().unwrap_or_default() {
            return Err(format!("digest mismatch for {path}"));
        }
        listed.push(path.to_string());
    }
    let mut on_disk = Vec::new();
    collect_files(out, out, &mut on_disk);
    on_disk.retain(|p| p != "manifest.json");
    listed.sort();
    on_disk.sort();
    if listed != on_disk {
        return Err(format!("manifest lists {listed:?} but directory holds {on_disk:?}"));
    }
    for required in ["values.csv", "add_high.csv", "add_low.csv", "remove_high.csv", "remove_low.csv", "noise_report.json"] {
        if !listed.iter().any(|p| p == required) {
            return Err(format!("missing {required}"));
        }
    }
    let add = std::fs::read_to_string(out.join("add_high.csv")).map_err(|e| e.to_string())?;
    if add.lines().count() != 12 || !add.starts_with("step,accuracy\n") {
        return Err(format!("add curve malformed: {add}"));
    }
    let remove = std::fs::read_to_string(out.join("remove_low.csv")).map_err(|e| e.to_string())?;
    if remove.lines().count() != 7 {
        return Err(format!("remove curve malformed: {remove}"));
    }
    Ok(elapsed)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
}
