//! Content-addressed store for file bytes.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::traceir::Digest;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache miss for {0}")]
    Miss(String),
    #[error("cache i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Cache {
        Cache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &Digest) -> PathBuf {
        let h = key.to_hex();
        self.root.join(&h[0..2]).join(&h[2..4]).join(&h[4..6]).join(&h)
    }

    /// Empty content is recreated on demand and never occupies the cache.
    pub fn is_recreatable(key: &Digest) -> bool {
        *key == Digest::empty()
    }

    pub fn contains(&self, key: &Digest) -> bool {
        Cache::is_recreatable(key) || self.path_for(key).is_file()
    }

    pub fn store(&self, bytes: &[u8]) -> Result<Digest, CacheError> {
        let key = Digest::of(bytes);
        self.store_keyed(&key, bytes)?;
        Ok(key)
    }

    /// Stores bytes whose digest the caller already computed.
    pub fn store_keyed(&self, key: &Digest, bytes: &[u8]) -> Result<(), CacheError> {
        if Cache::is_recreatable(key) {
            return Ok(());
        }
        let dest = self.path_for(key);
        if dest.is_file() {
            return Ok(());
        }
        let dir = dest.parent().expect("cache path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        drop(f);
        fs::rename(&tmp, &dest)?;
        Ok(())
    }

    pub fn store_file(&self, path: &Path) -> Result<Digest, CacheError> {
        let bytes = fs::read(path)?;
        self.store(&bytes)
    }

    pub fn load(&self, key: &Digest) -> Result<Vec<u8>, CacheError> {
        if Cache::is_recreatable(key) {
            return Ok(Vec::new());
        }
        match fs::read(self.path_for(key)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(CacheError::Miss(key.to_hex())),
            Err(e) => Err(e.into()),
        }
    }

    /// Replaces `dest` with the cached bytes for `key`.
    pub fn restore(&self, key: &Digest, dest: &Path) -> Result<(), CacheError> {
        let bytes = self.load(key)?;
        if let Ok(meta) = fs::symlink_metadata(dest) {
            if !meta.is_file() {
                return Err(CacheError::Io(io::Error::new(
                    io::ErrorKind::AlreadyExists,
                    format!("{} is not a regular file", dest.display()),
                )));
            }
        }
        let mut f = fs::OpenOptions::new().write(true).create(true).truncate(true).open(dest)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Every key currently stored.
    pub fn keys(&self) -> Result<Vec<Digest>, CacheError> {
        let mut out = Vec::new();
        if !self.root.is_dir() {
            return Ok(out);
        }
        for a in read_dirs(&self.root)? {
            for b in read_dirs(&a)? {
                for c in read_dirs(&b)? {
                    for e in fs::read_dir(&c)? {
                        let e = e?;
                        if let Some(k) = e.file_name().to_str().and_then(Digest::from_hex) {
                            out.push(k);
                        }
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Removes every object not in `live` and prunes empty directories.
    pub fn gc(&self, live: &HashSet<Digest>) -> Result<usize, CacheError> {
        let mut removed = 0;
        if !self.root.is_dir() {
            return Ok(0);
        }
        for a in read_dirs(&self.root)? {
            for b in read_dirs(&a)? {
                for c in read_dirs(&b)? {
                    for e in fs::read_dir(&c)? {
                        let e = e?;
                        let keep = e
                            .file_name()
                            .to_str()
                            .and_then(Digest::from_hex)
                            .is_some_and(|k| live.contains(&k));
                        if !keep {
                            match fs::remove_file(e.path()) {
                                Ok(()) => removed += 1,
                                Err(err) if err.kind() == io::ErrorKind::NotFound => {}
                                Err(err) => return Err(err.into()),
                            }
                        }
                    }
                    let _ = fs::remove_dir(&c);
                }
                let _ = fs::remove_dir(&b);
            }
            let _ = fs::remove_dir(&a);
        }
        Ok(removed)
    }
}

fn read_dirs(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_dir() {
            out.push(e.path());
        }
    }
    out.sort();
    Ok(out)
}
