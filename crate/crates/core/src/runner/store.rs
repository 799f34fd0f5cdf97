//! Flat-file persistence: atomic writes, JSONL records and per-unit
//! checkpoints for long stages.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(records))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: PathBuf::from(format!("{}:{}", path.display(), n + 1)),
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Entry<T> {
    key: String,
    value: T,
}

/// Append-only log of finished units for a stage in progress. A torn final
/// line from a crash is ignored on reload.
pub struct PartialLog<T> {
    path: PathBuf,
    done: HashMap<String, T>,
    file: Mutex<File>,
}

impl<T: Serialize + DeserializeOwned + Clone> PartialLog<T> {
    /// Opens `dir/partial-<tag>.jsonl`, removing logs with any other tag
    /// (they were written against different upstream artifacts).
    pub fn open(dir: &Path, tag: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = format!("partial-{tag}.jsonl");
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let other = entry.file_name().to_string_lossy().into_owned();
            if other.starts_with("partial-") && other != name {
                let p = entry.path();
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let path = dir.join(name);
        let mut done = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if let Ok(entry) = serde_json::from_str::<Entry<T>>(&line) {
                    done.insert(entry.key, entry.value);
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let torn = fs::read(&path)
            .map_err(|e| Error::io(&path, e))?
            .last()
            .is_some_and(|&b| b != b'\n');
        if torn {
            file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(PartialLog {
            path,
            done,
            file: Mutex::new(file),
        })
    }

    pub fn get(&self, key: &str) -> Option<T> {
        self.done.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    pub fn record(&self, key: &str, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(&Entry {
            key: key.to_string(),
            value,
        })
        .expect("records serialize");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        f.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(self) -> Result<()> {
        drop(self.file);
        fs::remove_file(&self.path).map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let leftovers: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, &[(1, "a".to_string()), (2, "b".to_string())]).unwrap();
        let back: Vec<(i32, String)> = read_jsonl(&p).unwrap();
        assert_eq!(back, vec![(1, "a".into()), (2, "b".into())]);
    }

    #[test]
    fn partial_log_survives_torn_lines_and_drops_stale_tags() {
        let dir = tempfile::tempdir().unwrap();
        {
            let log = PartialLog::<u32>::open(dir.path(), "t1").unwrap();
            log.record("a", &1).unwrap();
            log.record("b", &2).unwrap();
        }
        let p = dir.path().join("partial-t1.jsonl");
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"key\":\"c\",\"va").unwrap();
        drop(f);
        let log = PartialLog::<u32>::open(dir.path(), "t1").unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.get("b"), Some(2));
        log.record("c", &3).unwrap();
        drop(log);
        let log = PartialLog::<u32>::open(dir.path(), "t1").unwrap();
        assert_eq!(log.get("c"), Some(3));
        drop(log);
        let log = PartialLog::<u32>::open(dir.path(), "t2").unwrap();
        assert!(log.is_empty());
        assert!(!p.exists());
        log.finish().unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
