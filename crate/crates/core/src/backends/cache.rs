//! Append-only JSON Lines response cache.
//!
//! Each line is `{key, prompt_sha, model, response, timestamp}`. A torn trailing line (crash
//! mid-append) is truncated away when the cache is opened.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub prompt_sha: String,
    pub model: String,
    pub response: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub lines: usize,
    pub models: Vec<String>,
    pub bytes: u64,
    /// Bytes dropped from a corrupt tail when the cache was opened.
    pub recovered_bytes: u64,
}

#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    state: Mutex<State>,
    recovered_bytes: u64,
}

#[derive(Debug)]
struct State {
    entries: HashMap<String, CacheEntry>,
    lines: usize,
    file: File,
}

impl ResponseCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let (entries, lines, good_len) = parse_lines(&path, &bytes)?;
        let recovered_bytes = (bytes.len() - good_len) as u64;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if recovered_bytes > 0 {
            log::warn!(
                "cache {}: truncating {recovered_bytes} corrupt trailing bytes",
                path.display()
            );
            file.set_len(good_len as u64).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            path,
            state: Mutex::new(State { entries, lines, file }),
            recovered_bytes,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.state.lock().unwrap().entries.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one entry; appends are serialized behind the cache lock.
    pub fn insert(&self, entry: CacheEntry) -> Result<()> {
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        let mut st = self.state.lock().unwrap();
        st.file
            .write_all(&line)
            .and_then(|_| st.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        st.lines += 1;
        st.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn stats(&self) -> Result<CacheStats> {
        let st = self.state.lock().unwrap();
        let models: BTreeSet<String> = st.entries.values().map(|e| e.model.clone()).collect();
        let bytes = std::fs::metadata(&self.path)
            .map_err(|e| Error::io(&self.path, e))?
            .len();
        Ok(CacheStats {
            entries: st.entries.len(),
            lines: st.lines,
            models: models.into_iter().collect(),
            bytes,
            recovered_bytes: self.recovered_bytes,
        })
    }

    /// Rewrites the file with one line per live key (latest wins), ordered by timestamp then key.
    /// Returns the number of lines dropped.
    pub fn compact(&self) -> Result<usize> {
        let mut st = self.state.lock().unwrap();
        let mut live: Vec<&CacheEntry> = st.entries.values().collect();
        live.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.key.cmp(&b.key)));
        let mut buf = Vec::new();
        for e in &live {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        let tmp = self.path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        let dropped = st.lines - live.len();
        st.lines = live.len();
        st.file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(dropped)
    }
}

fn parse_lines(path: &Path, bytes: &[u8]) -> Result<(HashMap<String, CacheEntry>, usize, usize)> {
    let mut entries = HashMap::new();
    let mut lines = 0;
    let mut good_len = 0;
    let mut offset = 0;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p);
        let (line, next) = match end {
            Some(e) => (&bytes[offset..e], e + 1),
            None => (&bytes[offset..], bytes.len()),
        };
        let is_last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            if end.is_some() {
                good_len = next;
            }
            continue;
        }
        match serde_json::from_slice::<CacheEntry>(line) {
            // a final line without its newline was torn mid-write, even if it happens to parse
            Ok(entry) if end.is_some() => {
                entries.insert(entry.key.clone(), entry);
                lines += 1;
                good_len = next;
            }
            _ if is_last => break,
            Ok(_) => unreachable!("only the last line can lack a newline"),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("corrupt cache line at byte {offset}: {e}"),
                })
            }
        }
        offset = next;
    }
    Ok((entries, lines, good_len))
}

pub(crate) fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str, response: &str) -> CacheEntry {
        CacheEntry {
            key: key.into(),
            prompt_sha: "sha".into(),
            model: "m".into(),
            response: response.into(),
            timestamp: 1,
        }
    }

    #[test]
    fn insert_then_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = ResponseCache::open(&p).unwrap();
        c.insert(entry("k1", "POS")).unwrap();
        c.insert(entry("k2", "NEG")).unwrap();
        drop(c);
        let c = ResponseCache::open(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("k1").unwrap().response, "POS");
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = ResponseCache::open(&p).unwrap();
        c.insert(entry("k1", "POS")).unwrap();
        drop(c);
        let good = std::fs::read(&p).unwrap();
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"key\":\"k2\",\"prom").unwrap();
        drop(f);

        let c = ResponseCache::open(&p).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.stats().unwrap().recovered_bytes, 17);
        assert_eq!(std::fs::read(&p).unwrap(), good);
        c.insert(entry("k3", "NEG")).unwrap();
        drop(c);
        assert_eq!(ResponseCache::open(&p).unwrap().len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let line = serde_json::to_string(&entry("k1", "POS")).unwrap();
        std::fs::write(&p, format!("garbage\n{line}\n")).unwrap();
        assert!(matches!(ResponseCache::open(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn compact_drops_superseded_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = ResponseCache::open(&p).unwrap();
        c.insert(entry("k1", "a")).unwrap();
        c.insert(entry("k1", "b")).unwrap();
        c.insert(entry("k2", "c")).unwrap();
        assert_eq!(c.stats().unwrap().lines, 3);
        assert_eq!(c.compact().unwrap(), 1);
        c.insert(entry("k3", "d")).unwrap();
        drop(c);
        let c = ResponseCache::open(&p).unwrap();
        assert_eq!(c.stats().unwrap().lines, 3);
        assert_eq!(c.get("k1").unwrap().response, "b");
    }
}
