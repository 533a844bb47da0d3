//! Content-addressed, write-once file cache for backend outputs.
//!
//! Entries live at `<root>/<k[0..2]>/<k[2..4]>/<k>.json`. Writes go to a
//! temporary file in the same directory and are renamed into place, so a
//! reader never observes a partial entry. Re-putting an existing key is a
//! no-op when the payload matches and an error when it does not.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One cache namespace per backend role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Namespace {
    Qgen,
    Detect,
    Vqa,
}

impl Namespace {
    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Qgen => "qgen",
            Namespace::Detect => "detect",
            Namespace::Vqa => "vqa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    /// Digest of the namespace, backend identity and canonical input bytes.
    /// Every component is length-prefixed so that part boundaries cannot
    /// alias.
    pub fn derive(ns: Namespace, backend_id: &str, model_version: &str, inputs: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        let mut part = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        part(ns.as_str().as_bytes());
        part(backend_id.as_bytes());
        part(model_version.as_bytes());
        for input in inputs {
            part(input);
        }
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(CacheKey(s.to_string()))
        } else {
            Err(Error::InvalidInput(format!("malformed cache key {s:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub created_at: String,
    /// Raw JSON payload text, stored verbatim so reads are byte-identical.
    pub payload: String,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub writes: u64,
}

#[derive(Debug)]
pub struct Cache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
    writes: AtomicU64,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Cache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let k = key.as_str();
        self.root
            .join(&k[0..2])
            .join(&k[2..4])
            .join(format!("{k}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<String>> {
        let path = self.entry_path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes)?;
        if entry.key != key.as_str() {
            return Err(Error::CacheCorruption {
                key: key.to_string(),
            });
        }
        self.hits.fetch_add(1, Ordering::Relaxed);
        Ok(Some(entry.payload))
    }

    pub fn put(&self, key: &CacheKey, payload: &str) -> Result<()> {
        let path = self.entry_path(key);
        if let Some(existing) = self.peek(&path)? {
            return if existing == payload {
                Ok(())
            } else {
                Err(Error::CacheCorruption {
                    key: key.to_string(),
                })
            };
        }
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir)?;
        let entry = CacheEntry {
            key: key.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            payload: payload.to_string(),
        };
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            key,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&entry)?)?;
            f.sync_all()?;
        }
        // A concurrent writer may have won the race; verify instead of clobbering.
        if let Some(existing) = self.peek(&path)? {
            let _ = fs::remove_file(&tmp);
            return if existing == payload {
                Ok(())
            } else {
                Err(Error::CacheCorruption {
                    key: key.to_string(),
                })
            };
        }
        fs::rename(&tmp, &path)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn peek(&self, path: &Path) -> Result<Option<String>> {
        match fs::read(path) {
            Ok(b) => Ok(Some(serde_json::from_slice::<CacheEntry>(&b)?.payload)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &CacheKey) -> Result<Option<T>> {
        match self.get(key)? {
            Some(s) => Ok(Some(serde_json::from_str(&s)?)),
            None => Ok(None),
        }
    }

    pub fn put_json<T: Serialize>(&self, key: &CacheKey, value: &T) -> Result<()> {
        self.put(key, &serde_json::to_string(value)?)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
        }
    }
}
