use std::collections::VecDeque;
use std::fs;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::Path;

use super::resolve::components;
use super::{io_err, ArtifactId, Env, FsError};
use crate::cache::Cache;
use crate::traceir::{ArtifactKind, ContentState, Digest};

impl Env {
    /// Writes every modeled change to disk, parents before children.
    pub fn commit_all(&mut self) -> Result<(), FsError> {
        let root = self.root;
        self.commit_tree(root)?;
        for v in self.art_mut(root).content.iter_mut() {
            v.committed = true;
        }
        Ok(())
    }

    fn commit_tree(&mut self, dir: ArtifactId) -> Result<(), FsError> {
        let names: Vec<String> = self.art(dir).entries.keys().cloned().collect();
        for name in names {
            self.commit_entry(dir, &name)?;
            let Some(t) = self.art(dir).entries[&name].current() else { continue };
            match self.kind(t) {
                ArtifactKind::Dir => self.commit_tree(t)?,
                ArtifactKind::File => self.commit_content(t)?,
                _ => {}
            }
            self.commit_metadata(t)?;
        }
        Ok(())
    }

    /// Makes the artifact exist on disk with its current content.
    pub fn commit_artifact(&mut self, a: ArtifactId) -> Result<(), FsError> {
        let mut chain = Vec::new();
        let mut cur = a;
        while cur != self.root {
            let Some((parent, name)) = self.art(cur).link.clone() else { return Ok(()) };
            chain.push((parent, name));
            cur = parent;
            if chain.len() > self.arts.len() {
                return Err(FsError::Integrity("directory cycle".into()));
            }
        }
        for (parent, name) in chain.into_iter().rev() {
            self.commit_entry(parent, &name)?;
        }
        if self.kind(a) == ArtifactKind::File {
            self.commit_content(a)?;
        }
        Ok(())
    }

    /// Commits the pending change to one directory entry.
    pub fn commit_entry(&mut self, dir: ArtifactId, name: &str) -> Result<(), FsError> {
        let Some(e) = self.art(dir).entries.get(name).copied() else { return Ok(()) };
        let Some(pending) = e.pending else { return Ok(()) };
        if !self.art(dir).disk_backed {
            self.commit_artifact(dir)?;
        }
        let dir_path = self
            .disk_path(dir)
            .ok_or_else(|| FsError::Integrity(format!("directory for {name:?} is not on disk")))?;
        let path = dir_path.join(name);
        // An identical symlink already on disk is adopted rather than rewritten.
        let same_link = match (e.committed, pending) {
            (Some(old), Some(t)) => {
                self.kind(old) == ArtifactKind::Symlink
                    && self.kind(t) == ArtifactKind::Symlink
                    && self.art(old).dest == self.art(t).dest
            }
            _ => false,
        };
        if let Some(old) = e.committed {
            if Some(old) != pending {
                if !same_link {
                    remove_path(&path)?;
                    self.stats.writes += 1;
                }
                let art = self.art_mut(old);
                art.committed_link = None;
                art.disk_backed = false;
            }
        }
        if let Some(t) = pending {
            if e.committed != Some(t) && !same_link {
                self.materialize(t, &path)?;
            }
            let art = self.art_mut(t);
            art.committed_link = Some((dir, name.to_string()));
            art.disk_backed = true;
        }
        let d = self.art_mut(dir);
        d.entries.insert(name.to_string(), super::Entry { committed: pending, pending: None });
        if d.entries.values().all(|e| e.pending.is_none()) {
            for v in d.content.iter_mut() {
                v.committed = true;
            }
        }
        Ok(())
    }

    /// Commits every pending entry of a directory, for a real listing.
    pub fn commit_listing(&mut self, dir: ArtifactId) -> Result<(), FsError> {
        self.commit_artifact(dir)?;
        let names: Vec<String> = self
            .art(dir)
            .entries
            .iter()
            .filter(|(_, e)| e.pending.is_some())
            .map(|(n, _)| n.clone())
            .collect();
        for n in names {
            self.commit_entry(dir, &n)?;
        }
        Ok(())
    }

    fn materialize(&mut self, a: ArtifactId, path: &Path) -> Result<(), FsError> {
        let perms = self.art(a).meta.last().map(|v| v.state.perms);
        match self.kind(a) {
            ArtifactKind::Dir => {
                fs::create_dir(path).map_err(io_err(path))?;
            }
            ArtifactKind::File => {
                let key = self.restorable_key(a, path)?;
                self.cache.restore(&key, path)?;
                self.stats.restored_from_cache += 1;
                for v in self.art_mut(a).content.iter_mut() {
                    v.committed = true;
                }
            }
            ArtifactKind::Symlink => {
                let dest = self.art(a).dest.clone().unwrap_or_default();
                symlink(&dest, path).map_err(io_err(path))?;
            }
            ArtifactKind::Pipe | ArtifactKind::Special => {
                return Err(FsError::Integrity(format!(
                    "cannot link a {} into a directory",
                    self.kind(a).name()
                )));
            }
        }
        if let Some(p) = perms {
            if self.kind(a) != ArtifactKind::Symlink {
                set_perms(path, p)?;
            }
        }
        for v in self.art_mut(a).meta.iter_mut() {
            v.committed = true;
        }
        for v in self.art_mut(a).content.iter_mut() {
            v.committed = true;
        }
        self.stats.writes += 1;
        Ok(())
    }

    fn restorable_key(&self, a: ArtifactId, path: &Path) -> Result<Digest, FsError> {
        match self.art(a).content.last().and_then(|v| v.state.as_ref()) {
            Some(ContentState::File { hash, .. }) if self.cache.contains(hash) => Ok(*hash),
            _ => Err(FsError::Uncommittable { what: path.display().to_string() }),
        }
    }

    /// Brings an on-disk file up to its latest modeled content.
    pub fn commit_content(&mut self, a: ArtifactId) -> Result<(), FsError> {
        let art = self.art(a);
        if art.kind != ArtifactKind::File || !art.disk_backed {
            return Ok(());
        }
        let Some(last) = art.content.last() else { return Ok(()) };
        if last.committed {
            return Ok(());
        }
        let want = last.state.as_ref().and_then(ContentState::file_hash);
        let on_disk = art
            .content
            .iter()
            .rev()
            .find(|v| v.committed)
            .and_then(|v| v.state.as_ref())
            .and_then(ContentState::file_hash);
        let path = self
            .disk_path(a)
            .ok_or_else(|| FsError::Integrity("committed file has no path".into()))?;
        let on_disk = match on_disk {
            Some(h) => Some(h),
            None => fs::read(&path).ok().map(|b| Digest::of(&b)),
        };
        if want.is_none() || want != on_disk {
            let key = self.restorable_key(a, &path)?;
            self.cache.restore(&key, &path)?;
            self.stats.restored_from_cache += 1;
            self.stats.writes += 1;
        }
        for v in self.art_mut(a).content.iter_mut() {
            v.committed = true;
        }
        Ok(())
    }

    fn commit_metadata(&mut self, a: ArtifactId) -> Result<(), FsError> {
        let art = self.art(a);
        let Some(last) = art.meta.last() else { return Ok(()) };
        if last.committed || !art.disk_backed || art.kind == ArtifactKind::Symlink {
            return Ok(());
        }
        let perms = last.state.perms;
        if let Some(p) = self.disk_path(a) {
            let cur = fs::symlink_metadata(&p).map_err(io_err(&p))?.permissions().mode() & 0o777;
            if cur != perms as u32 {
                set_perms(&p, perms)?;
                self.stats.writes += 1;
            }
        }
        for v in self.art_mut(a).meta.iter_mut() {
            v.committed = true;
        }
        Ok(())
    }

    /// Commits everything a real operation on `path` could observe: each
    /// directory entry along the way and the final file's content.
    pub fn prepare_path(&mut self, base: ArtifactId, path: &str, follow_final: bool) -> Result<(), FsError> {
        let mut cur = if path.starts_with('/') { self.root } else { base };
        let mut comps: VecDeque<String> = components(path);
        let mut hops = 0;
        while let Some(name) = comps.pop_front() {
            if self.kind(cur) != ArtifactKind::Dir {
                return Ok(());
            }
            let last = comps.is_empty();
            let next = match name.as_str() {
                "." => Some(cur),
                ".." => Some(self.parent(cur)),
                n => {
                    self.commit_entry(cur, n)?;
                    self.lookup(cur, n)
                }
            };
            let Some(a) = next else { return Ok(()) };
            if self.kind(a) == ArtifactKind::Symlink && (!last || follow_final) {
                hops += 1;
                if hops > super::MAX_SYMLINK_HOPS {
                    return Ok(());
                }
                let dest = self.art(a).dest.clone().unwrap_or_default();
                if dest.starts_with('/') {
                    cur = self.root;
                }
                for c in components(&dest).into_iter().rev() {
                    comps.push_front(c);
                }
                continue;
            }
            if last {
                if self.kind(a) == ArtifactKind::File {
                    self.commit_content(a)?;
                }
                return Ok(());
            }
            cur = a;
        }
        Ok(())
    }

    pub fn cache_handle(&self) -> Cache {
        self.cache.clone()
    }
}

fn remove_path(path: &Path) -> Result<(), FsError> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path).map_err(io_err(path)),
        Ok(_) => fs::remove_file(path).map_err(io_err(path)),
        Err(_) => Ok(()),
    }
}

fn set_perms(path: &Path, perms: u16) -> Result<(), FsError> {
    fs::set_permissions(path, fs::Permissions::from_mode(perms as u32)).map_err(io_err(path))
}
