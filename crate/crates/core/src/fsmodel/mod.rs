//! In-memory model of the sandbox filesystem.
//!
//! Artifacts are loaded lazily from disk. Every artifact keeps a list of
//! versions; committed versions are known to be on disk, uncommitted ones
//! exist only in the model until `commit_*` writes them out.

mod commit;
mod resolve;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::{FileTypeExt, MetadataExt};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cache::{Cache, CacheError};
use crate::traceir::{
    AccessFlags, ArtifactKind, CmdRef, ContentState, Digest, MetadataState, PipeOp, SpecialKind,
    SpecialPolicy,
};

pub use resolve::{Resolution, MAX_SYMLINK_HOPS};

#[derive(Debug, Error)]
pub enum FsError {
    #[error("cannot commit {what}: content is not cached")]
    Uncommittable { what: String },
    #[error("invalid entry name {0:?}")]
    InvalidName(String),
    #[error("model integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FsError + '_ {
    move |source| FsError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArtifactId(pub u32);

/// Identifies one version of one artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId {
    pub artifact: ArtifactId,
    pub version: u32,
}

#[derive(Debug, Clone)]
pub struct Version<S> {
    pub state: S,
    pub committed: bool,
    pub producer: Option<CmdRef>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Entry {
    /// Target on disk.
    committed: Option<ArtifactId>,
    /// Model-only change: `Some(None)` is a pending removal.
    pending: Option<Option<ArtifactId>>,
}

impl Entry {
    fn current(&self) -> Option<ArtifactId> {
        match self.pending {
            Some(p) => p,
            None => self.committed,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct PipeInfo {
    writes: u64,
    traced_write: bool,
    emulated_write: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Artifact {
    kind: ArtifactKind,
    /// Present on disk at `committed_link` (or is the sandbox root).
    disk_backed: bool,
    /// Current modeled location.
    link: Option<(ArtifactId, String)>,
    committed_link: Option<(ArtifactId, String)>,
    meta: Vec<Version<MetadataState>>,
    /// Dir versions carry no state; the listing is computed from entries.
    content: Vec<Version<Option<ContentState>>>,
    entries: BTreeMap<String, Entry>,
    pipe: PipeInfo,
    special: Option<SpecialKind>,
    /// Symlink destination, fixed at creation.
    dest: Option<String>,
}

impl Artifact {
    fn new(kind: ArtifactKind) -> Artifact {
        Artifact {
            kind,
            disk_backed: false,
            link: None,
            committed_link: None,
            meta: Vec::new(),
            content: Vec::new(),
            entries: BTreeMap::new(),
            pipe: PipeInfo::default(),
            special: None,
            dest: None,
        }
    }
}

/// Counters for disk mutations made by the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommitStats {
    pub writes: u64,
    pub restored_from_cache: u64,
}

#[derive(Clone)]
pub struct Env {
    root_dir: PathBuf,
    hidden: Option<String>,
    cache: Cache,
    arts: Vec<Artifact>,
    root: ArtifactId,
    specials: BTreeMap<u8, ArtifactId>,
    uid: u32,
    gid: u32,
    pub stats: CommitStats,
}

impl Env {
    /// Models the tree under `root_dir`. `hidden` names a top-level entry
    /// (the state directory) that the model never sees.
    pub fn new(root_dir: impl Into<PathBuf>, cache: Cache, hidden: Option<String>) -> Env {
        let mut root = Artifact::new(ArtifactKind::Dir);
        root.disk_backed = true;
        // SAFETY: geteuid/getegid cannot fail.
        let (uid, gid) = unsafe { (libc::geteuid(), libc::getegid()) };
        Env {
            root_dir: root_dir.into(),
            hidden,
            cache,
            arts: vec![root],
            root: ArtifactId(0),
            specials: BTreeMap::new(),
            uid,
            gid,
            stats: CommitStats::default(),
        }
    }

    pub fn root(&self) -> ArtifactId {
        self.root
    }

    pub fn root_dir(&self) -> &Path {
        &self.root_dir
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    fn art(&self, a: ArtifactId) -> &Artifact {
        &self.arts[a.0 as usize]
    }

    fn art_mut(&mut self, a: ArtifactId) -> &mut Artifact {
        &mut self.arts[a.0 as usize]
    }

    fn push(&mut self, art: Artifact) -> ArtifactId {
        self.arts.push(art);
        ArtifactId(self.arts.len() as u32 - 1)
    }

    pub fn kind(&self, a: ArtifactId) -> ArtifactKind {
        self.art(a).kind
    }

    pub fn special_kind(&self, a: ArtifactId) -> Option<SpecialKind> {
        self.art(a).special
    }

    /// Current modeled path, relative to the sandbox root.
    pub fn rel_path(&self, a: ArtifactId) -> Option<PathBuf> {
        self.path_via(a, |art| art.link.as_ref())
    }

    /// Path on disk, relative to the sandbox root.
    fn committed_rel_path(&self, a: ArtifactId) -> Option<PathBuf> {
        self.path_via(a, |art| art.committed_link.as_ref())
    }

    fn path_via(
        &self,
        a: ArtifactId,
        link: impl Fn(&Artifact) -> Option<&(ArtifactId, String)>,
    ) -> Option<PathBuf> {
        let mut names = Vec::new();
        let mut cur = a;
        let mut guard = 0;
        while cur != self.root {
            let (parent, name) = link(self.art(cur))?;
            names.push(name.as_str());
            cur = *parent;
            guard += 1;
            if guard > self.arts.len() {
                return None;
            }
        }
        let mut p = PathBuf::new();
        for n in names.iter().rev() {
            p.push(n);
        }
        Some(p)
    }

    /// Absolute disk path of an artifact that exists on disk.
    pub fn disk_path(&self, a: ArtifactId) -> Option<PathBuf> {
        if !self.art(a).disk_backed {
            return None;
        }
        self.committed_rel_path(a).map(|p| self.root_dir.join(p))
    }

    /// True if the artifact is reachable from the root through current entries.
    pub fn is_linked(&self, a: ArtifactId) -> bool {
        let mut cur = a;
        let mut guard = 0;
        while cur != self.root {
            let Some((parent, name)) = &self.art(cur).link else { return false };
            let present = self
                .art(*parent)
                .entries
                .get(name)
                .and_then(|e| e.current())
                .is_some_and(|t| t == cur);
            if !present {
                return false;
            }
            cur = *parent;
            guard += 1;
            if guard > self.arts.len() {
                return false;
            }
        }
        true
    }

    pub(crate) fn is_hidden(&self, dir: ArtifactId, name: &str) -> bool {
        dir == self.root && self.hidden.as_deref() == Some(name)
    }

    /// Looks up a directory entry, loading it from disk on first use.
    pub(crate) fn lookup(&mut self, dir: ArtifactId, name: &str) -> Option<ArtifactId> {
        if self.is_hidden(dir, name) {
            return None;
        }
        if let Some(e) = self.art(dir).entries.get(name) {
            return e.current();
        }
        if !self.art(dir).disk_backed {
            return None;
        }
        let found = self.disk_path(dir).and_then(|p| {
            let child = p.join(name);
            fs::symlink_metadata(&child).ok().map(|m| (m, child))
        });
        let entry = match found {
            Some((meta, child)) => {
                let ft = meta.file_type();
                let kind = kind_of(&ft);
                let mut art = Artifact::new(kind);
                art.disk_backed = true;
                art.link = Some((dir, name.to_string()));
                art.committed_link = art.link.clone();
                if kind == ArtifactKind::Symlink {
                    art.dest = fs::read_link(&child)
                        .ok()
                        .map(|d| d.to_string_lossy().into_owned());
                }
                let id = self.push(art);
                Entry { committed: Some(id), pending: None }
            }
            None => Entry::default(),
        };
        self.art_mut(dir).entries.insert(name.to_string(), entry);
        entry.current()
    }

    pub fn parent(&self, a: ArtifactId) -> ArtifactId {
        if a == self.root {
            return a;
        }
        self.art(a).link.as_ref().map(|(p, _)| *p).unwrap_or(a)
    }

    // Artifact creation.

    fn new_modeled(&mut self, kind: ArtifactKind, perms: u16, acting: CmdRef, committed: bool) -> ArtifactId {
        let mut art = Artifact::new(kind);
        art.meta.push(Version {
            state: MetadataState { uid: self.uid, gid: self.gid, kind, perms },
            committed,
            producer: Some(acting),
        });
        self.push(art)
    }

    pub fn new_file(&mut self, mode: u16, acting: CmdRef, committed: bool) -> ArtifactId {
        let a = self.new_modeled(ArtifactKind::File, mode & 0o777, acting, committed);
        self.art_mut(a).content.push(Version {
            state: Some(ContentState::empty_file()),
            committed,
            producer: Some(acting),
        });
        a
    }

    pub fn new_dir(&mut self, acting: CmdRef, committed: bool) -> ArtifactId {
        let a = self.new_modeled(ArtifactKind::Dir, 0o755, acting, committed);
        self.art_mut(a).content.push(Version { state: None, committed, producer: Some(acting) });
        a
    }

    pub fn new_symlink(&mut self, dest: &str, acting: CmdRef, committed: bool) -> ArtifactId {
        let a = self.new_modeled(ArtifactKind::Symlink, 0o777, acting, committed);
        let art = self.art_mut(a);
        art.dest = Some(dest.to_string());
        art.content.push(Version {
            state: Some(ContentState::Symlink { dest: dest.to_string() }),
            committed,
            producer: Some(acting),
        });
        a
    }

    pub fn new_pipe(&mut self, acting: CmdRef) -> ArtifactId {
        self.new_modeled(ArtifactKind::Pipe, 0o600, acting, true)
    }

    pub fn special(&mut self, which: SpecialKind) -> ArtifactId {
        if which == SpecialKind::Root {
            return self.root;
        }
        if let Some(a) = self.specials.get(&(which as u8)) {
            return *a;
        }
        let mut art = Artifact::new(ArtifactKind::Special);
        art.special = Some(which);
        art.meta.push(Version {
            state: MetadataState { uid: self.uid, gid: self.gid, kind: ArtifactKind::Special, perms: 0o666 },
            committed: true,
            producer: None,
        });
        let a = self.push(art);
        self.specials.insert(which as u8, a);
        a
    }

    // State access.

    pub fn metadata(&mut self, a: ArtifactId) -> MetadataState {
        if let Some(v) = self.art(a).meta.last() {
            return v.state;
        }
        let kind = self.art(a).kind;
        let disk = self.disk_path(a).and_then(|p| fs::symlink_metadata(p).ok());
        match disk {
            Some(m) => MetadataState {
                uid: m.uid(),
                gid: m.gid(),
                kind,
                perms: (m.mode() & 0o777) as u16,
            },
            None => MetadataState { uid: self.uid, gid: self.gid, kind, perms: 0 },
        }
    }

    /// Current modeled content. Files on disk are hashed.
    pub fn content(&mut self, a: ArtifactId) -> Result<ContentState, FsError> {
        let art = self.art(a);
        match art.kind {
            ArtifactKind::Dir => Ok(ContentState::Dir { entries: self.listing(a)? }),
            ArtifactKind::Symlink => {
                Ok(ContentState::Symlink { dest: art.dest.clone().unwrap_or_default() })
            }
            ArtifactKind::Pipe => {
                Ok(ContentState::Pipe { op: PipeOp::Read, writer_epoch: art.pipe.writes })
            }
            ArtifactKind::Special => Ok(ContentState::Special { policy: self.policy(a) }),
            ArtifactKind::File => {
                if let Some(Version { state: Some(s), .. }) = art.content.last() {
                    return Ok(s.clone());
                }
                self.disk_file_state(a)
            }
        }
    }

    fn disk_file_state(&self, a: ArtifactId) -> Result<ContentState, FsError> {
        let p = self
            .disk_path(a)
            .ok_or_else(|| FsError::Integrity("file artifact has no path".into()))?;
        file_state(&p, &self.cache)
    }

    pub fn policy(&self, a: ArtifactId) -> SpecialPolicy {
        match self.art(a).special {
            Some(SpecialKind::Null) => SpecialPolicy::NeverChanged,
            Some(SpecialKind::Stdout) | Some(SpecialKind::Stderr) => SpecialPolicy::NeverChanged,
            _ => SpecialPolicy::AlwaysChanged,
        }
    }

    /// Sorted entry names of a directory.
    pub fn listing(&mut self, dir: ArtifactId) -> Result<Vec<String>, FsError> {
        let mut names = std::collections::BTreeSet::new();
        if self.art(dir).disk_backed {
            if let Some(p) = self.disk_path(dir) {
                let rd = fs::read_dir(&p).map_err(io_err(&p))?;
                for e in rd {
                    let e = e.map_err(io_err(&p))?;
                    let name = e.file_name().to_string_lossy().into_owned();
                    if !self.is_hidden(dir, &name) {
                        names.insert(name);
                    }
                }
            }
        }
        for (name, e) in &self.art(dir).entries {
            if e.current().is_some() {
                names.insert(name.clone());
            } else {
                names.remove(name);
            }
        }
        Ok(names.into_iter().collect())
    }

    pub fn match_metadata(&mut self, a: ArtifactId, expected: &MetadataState) -> bool {
        self.metadata(a) == *expected
    }

    pub fn match_content(&mut self, a: ArtifactId, expected: &ContentState) -> Result<bool, FsError> {
        let art = self.art(a);
        match (art.kind, expected) {
            (ArtifactKind::File, ContentState::File { hash, size, mtime_ns, .. }) => {
                if let Some(Version { state: Some(s), .. }) = art.content.last() {
                    return Ok(s.file_hash() == Some(*hash));
                }
                let p = self
                    .disk_path(a)
                    .ok_or_else(|| FsError::Integrity("file artifact has no path".into()))?;
                let m = fs::metadata(&p).map_err(io_err(&p))?;
                if *mtime_ns != 0 && mtime_of(&m) == *mtime_ns && m.len() == *size {
                    return Ok(true);
                }
                if m.len() != *size {
                    return Ok(false);
                }
                let bytes = fs::read(&p).map_err(io_err(&p))?;
                Ok(Digest::of(&bytes) == *hash)
            }
            (ArtifactKind::Dir, ContentState::Dir { entries }) => Ok(self.listing(a)? == *entries),
            (ArtifactKind::Symlink, ContentState::Symlink { dest }) => {
                Ok(art.dest.as_deref() == Some(dest.as_str()))
            }
            (ArtifactKind::Pipe, ContentState::Pipe { writer_epoch, .. }) => {
                Ok(!art.pipe.traced_write && art.pipe.writes == *writer_epoch)
            }
            (ArtifactKind::Special, ContentState::Special { .. }) => {
                Ok(self.policy(a) == SpecialPolicy::NeverChanged)
            }
            _ => Ok(false),
        }
    }

    /// Installs a new content version.
    pub fn update_content(&mut self, a: ArtifactId, state: ContentState, acting: CmdRef, committed: bool) {
        let art = self.art_mut(a);
        match art.kind {
            ArtifactKind::Special => {}
            ArtifactKind::Pipe => {
                art.pipe.writes += 1;
                if committed {
                    art.pipe.traced_write = true;
                } else {
                    art.pipe.emulated_write = true;
                }
                art.content.push(Version { state: Some(state), committed: false, producer: Some(acting) });
            }
            ArtifactKind::Dir => {}
            _ => art.content.push(Version { state: Some(state), committed, producer: Some(acting) }),
        }
    }

    pub fn update_metadata(&mut self, a: ArtifactId, state: MetadataState, acting: CmdRef, committed: bool) {
        let art = self.art_mut(a);
        if art.kind == ArtifactKind::Special {
            return;
        }
        art.meta.push(Version { state, committed, producer: Some(acting) });
    }

    /// Applies the truncation side of an open.
    pub(crate) fn truncate(&mut self, a: ArtifactId, acting: CmdRef, committed: bool) {
        if self.kind(a) == ArtifactKind::File {
            self.update_content(a, ContentState::empty_file(), acting, committed);
        }
    }

    /// Returns true if the outcome differs from what the trace expected.
    pub fn add_entry(
        &mut self,
        dir: ArtifactId,
        name: &str,
        target: ArtifactId,
        acting: CmdRef,
        committed: bool,
    ) -> Result<bool, FsError> {
        check_name(name)?;
        if self.kind(dir) != ArtifactKind::Dir {
            return Ok(true);
        }
        if self.lookup(dir, name).is_some() || self.is_hidden(dir, name) {
            return Ok(true);
        }
        self.link_entry(dir, name, Some(target), acting, committed);
        Ok(false)
    }

    pub fn remove_entry(
        &mut self,
        dir: ArtifactId,
        name: &str,
        target: ArtifactId,
        acting: CmdRef,
        committed: bool,
    ) -> Result<bool, FsError> {
        check_name(name)?;
        if self.kind(dir) != ArtifactKind::Dir {
            return Ok(true);
        }
        match self.lookup(dir, name) {
            Some(t) if t == target => {
                self.link_entry(dir, name, None, acting, committed);
                Ok(false)
            }
            _ => Ok(true),
        }
    }

    fn link_entry(
        &mut self,
        dir: ArtifactId,
        name: &str,
        target: Option<ArtifactId>,
        acting: CmdRef,
        committed: bool,
    ) {
        let prev = self.lookup(dir, name);
        if let Some(p) = prev {
            if self.art(p).link.as_ref().is_some_and(|(d, n)| *d == dir && n == name) {
                self.art_mut(p).link = None;
            }
            if committed {
                self.art_mut(p).committed_link = None;
            }
        }
        if let Some(t) = target {
            let art = self.art_mut(t);
            art.link = Some((dir, name.to_string()));
            if committed {
                art.committed_link = art.link.clone();
                art.disk_backed = true;
            }
        }
        let d = self.art_mut(dir);
        let e = d.entries.entry(name.to_string()).or_default();
        if committed {
            *e = Entry { committed: target, pending: None };
        } else {
            e.pending = Some(target);
        }
        d.content.push(Version { state: None, committed, producer: Some(acting) });
    }

    /// The current content version: its id, producer and whether its bytes
    /// can be restored without running the producer.
    pub fn current_version(&self, a: ArtifactId) -> Option<(StateId, Option<CmdRef>, bool)> {
        let art = self.art(a);
        let idx = art.content.len().checked_sub(1)?;
        let v = &art.content[idx];
        let cached = match (&art.kind, &v.state) {
            (ArtifactKind::Pipe, _) => false,
            (ArtifactKind::File, Some(ContentState::File { hash, cached, .. })) => {
                v.committed || (*cached && self.cache.contains(hash))
            }
            _ => true,
        };
        Some((StateId { artifact: a, version: idx as u32 }, v.producer, cached))
    }

    /// Producers of every write to a pipe this pass.
    pub fn pipe_writers(&self, a: ArtifactId) -> Vec<CmdRef> {
        let mut out: Vec<CmdRef> =
            self.art(a).content.iter().filter_map(|v| v.producer).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn pipe_had_emulated_write(&self, a: ArtifactId) -> bool {
        self.art(a).pipe.emulated_write
    }

    pub fn is_final_version(&self, s: StateId) -> bool {
        self.art(s.artifact).content.len() == s.version as usize + 1
    }

    /// Drops every uncommitted version and pending entry.
    pub fn sync(&mut self) {
        for art in &mut self.arts {
            art.meta.retain(|v| v.committed);
            art.content.retain(|v| v.committed);
            for v in art.meta.iter_mut() {
                v.producer = None;
            }
            for v in art.content.iter_mut() {
                v.producer = None;
            }
            for e in art.entries.values_mut() {
                e.pending = None;
            }
            art.link = art.committed_link.clone();
            art.pipe = PipeInfo::default();
        }
    }

    pub fn uncommitted_count(&self) -> usize {
        self.arts
            .iter()
            .map(|a| {
                a.meta.iter().filter(|v| !v.committed).count()
                    + if a.kind == ArtifactKind::Pipe {
                        0
                    } else {
                        a.content.iter().filter(|v| !v.committed).count()
                    }
                    + a.entries.values().filter(|e| e.pending.is_some()).count()
            })
            .sum()
    }

    pub fn access_allowed(&mut self, a: ArtifactId, flags: &AccessFlags) -> bool {
        let m = self.metadata(a);
        let dir = m.kind == ArtifactKind::Dir;
        (!flags.read || self.may(&m, 4, false))
            && (!flags.write || self.may(&m, 2, false))
            && (!flags.execute || self.may(&m, 1, dir))
    }

    /// Permission check for one bit (4 read, 2 write, 1 exec/search).
    pub(crate) fn may(&self, m: &MetadataState, bit: u16, dir: bool) -> bool {
        if self.uid == 0 {
            if bit == 1 && !dir {
                return m.perms & 0o111 != 0;
            }
            return true;
        }
        let shift = if m.uid == self.uid {
            6
        } else if m.gid == self.gid {
            3
        } else {
            0
        };
        m.perms & (bit << shift) != 0
    }
}

fn check_name(name: &str) -> Result<(), FsError> {
    if name.is_empty() || name.contains('/') || name == "." || name == ".." {
        return Err(FsError::InvalidName(name.to_string()));
    }
    Ok(())
}

pub(crate) fn kind_of(ft: &fs::FileType) -> ArtifactKind {
    if ft.is_dir() {
        ArtifactKind::Dir
    } else if ft.is_symlink() {
        ArtifactKind::Symlink
    } else if ft.is_fifo() || ft.is_socket() {
        ArtifactKind::Pipe
    } else if ft.is_file() {
        ArtifactKind::File
    } else {
        ArtifactKind::Special
    }
}

pub fn mtime_of(m: &fs::Metadata) -> i64 {
    m.mtime() * 1_000_000_000 + m.mtime_nsec()
}

/// Hashes a file on disk and reports whether its bytes are in the cache.
pub fn file_state(p: &Path, cache: &Cache) -> Result<ContentState, FsError> {
    let m = fs::metadata(p).map_err(io_err(p))?;
    let bytes = fs::read(p).map_err(io_err(p))?;
    let hash = Digest::of(&bytes);
    Ok(ContentState::File {
        hash,
        size: bytes.len() as u64,
        mtime_ns: mtime_of(&m),
        cached: cache.contains(&hash),
    })
}
