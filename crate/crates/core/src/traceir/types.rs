use std::collections::BTreeMap;
use std::fmt;

/// Dense command identity within one trace. Id 0 is the build tool itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CmdRef(pub u32);

impl CmdRef {
    pub const TOOL: CmdRef = CmdRef(0);
}

impl fmt::Display for CmdRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// A command-local handle to an artifact, the trace analogue of a file descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ref(pub u32);

impl Ref {
    /// Every command starts with these bound from its `Command` record.
    pub const ROOT: Ref = Ref(0);
    pub const CWD: Ref = Ref(1);
    pub const STDIN: Ref = Ref(2);
    pub const STDOUT: Ref = Ref(3);
    pub const STDERR: Ref = Ref(4);
    pub const FIRST_FREE: u32 = 5;

    pub fn for_fd(fd: u32) -> Ref {
        Ref(2 + fd)
    }
}

impl fmt::Display for Ref {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Ref::ROOT => f.write_str("ROOT"),
            Ref::CWD => f.write_str("CWD"),
            r => write!(f, "r{}", r.0),
        }
    }
}

/// What kind of statement created a ref.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefRole {
    Path,
    AnonymousFile,
    AnonymousDir,
    PipeRead,
    PipeWrite,
    Symlink,
    Special,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AccessFlags {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
    pub create: bool,
    pub exclusive: bool,
    pub truncate: bool,
    /// Do not follow a symlink in the final path component.
    pub nofollow: bool,
    /// Permission bits for a created file (rwxrwxrwx).
    pub create_mode: u16,
}

impl AccessFlags {
    pub fn read() -> Self {
        AccessFlags { read: true, ..Default::default() }
    }

    pub fn exec() -> Self {
        AccessFlags { read: true, execute: true, ..Default::default() }
    }

    /// Existence probe with lstat semantics.
    pub fn probe() -> Self {
        AccessFlags { nofollow: true, ..Default::default() }
    }

    pub fn write_truncate(mode: u16) -> Self {
        AccessFlags {
            write: true,
            create: true,
            truncate: true,
            create_mode: mode,
            ..Default::default()
        }
    }

    pub fn write_append(mode: u16) -> Self {
        AccessFlags { write: true, create: true, create_mode: mode, ..Default::default() }
    }

    pub fn is_access(&self) -> bool {
        self.read || self.write || self.execute
    }

    pub(crate) fn to_bits(self) -> u8 {
        (self.read as u8)
            | (self.write as u8) << 1
            | (self.execute as u8) << 2
            | (self.create as u8) << 3
            | (self.exclusive as u8) << 4
            | (self.truncate as u8) << 5
            | (self.nofollow as u8) << 6
    }

    pub(crate) fn from_bits(bits: u8, create_mode: u16) -> Self {
        AccessFlags {
            read: bits & 1 != 0,
            write: bits & 2 != 0,
            execute: bits & 4 != 0,
            create: bits & 8 != 0,
            exclusive: bits & 16 != 0,
            truncate: bits & 32 != 0,
            nofollow: bits & 64 != 0,
            create_mode,
        }
    }
}

impl fmt::Display for AccessFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            if self.read { 'r' } else { '-' },
            if self.write { 'w' } else { '-' },
            if self.execute { 'x' } else { '-' }
        )?;
        if self.nofollow {
            f.write_str(" nofollow")?;
        }
        if self.truncate {
            f.write_str(" truncate")?;
        }
        if self.create {
            f.write_str(" create")?;
            if self.exclusive {
                f.write_str(" exclusive")?;
            }
            write!(f, " ({})", Perms(self.create_mode))?;
        }
        Ok(())
    }
}

/// Nine permission bits rendered as `rwxrwxrwx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perms(pub u16);

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let chars = ['r', 'w', 'x'];
        for i in 0..9 {
            let bit = 1 << (8 - i);
            let c = if self.0 & bit != 0 { chars[i % 3] } else { '-' };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Outcome of resolving a path reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResultCode {
    Success,
    NoEntry,
    Access,
    Exists,
    NotDir,
    IsDir,
    Loop,
}

impl ResultCode {
    pub fn from_errno(errno: i32) -> Option<ResultCode> {
        Some(match errno {
            0 => ResultCode::Success,
            libc::ENOENT => ResultCode::NoEntry,
            libc::EACCES | libc::EPERM => ResultCode::Access,
            libc::EEXIST => ResultCode::Exists,
            libc::ENOTDIR => ResultCode::NotDir,
            libc::EISDIR => ResultCode::IsDir,
            libc::ELOOP => ResultCode::Loop,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ResultCode::Success => "SUCCESS",
            ResultCode::NoEntry => "ENOENT",
            ResultCode::Access => "EACCES",
            ResultCode::Exists => "EEXIST",
            ResultCode::NotDir => "ENOTDIR",
            ResultCode::IsDir => "EISDIR",
            ResultCode::Loop => "ELOOP",
        }
    }

    pub(crate) fn to_u8(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        use ResultCode::*;
        [Success, NoEntry, Access, Exists, NotDir, IsDir, Loop].get(v as usize).copied()
    }
}

impl fmt::Display for ResultCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArtifactKind {
    File,
    Dir,
    Symlink,
    Pipe,
    Special,
}

impl ArtifactKind {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::File => "file",
            ArtifactKind::Dir => "dir",
            ArtifactKind::Symlink => "symlink",
            ArtifactKind::Pipe => "pipe",
            ArtifactKind::Special => "special",
        }
    }

    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        use ArtifactKind::*;
        [File, Dir, Symlink, Pipe, Special].get(v as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetadataState {
    pub uid: u32,
    pub gid: u32,
    pub kind: ArtifactKind,
    pub perms: u16,
}

impl fmt::Display for MetadataState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[uid={}, gid={}, type={}, perms={}]",
            self.uid,
            self.gid,
            self.kind.name(),
            Perms(self.perms)
        )
    }
}

/// 256-bit content digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Digest {
        Digest(*blake3::hash(bytes).as_bytes())
    }

    pub fn empty() -> Digest {
        Digest::of(&[])
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hex = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(hex, 16).ok()?;
        }
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipeOp {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialPolicy {
    AlwaysChanged,
    NeverChanged,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ContentState {
    File {
        hash: Digest,
        size: u64,
        /// Nanoseconds since the epoch; 0 disables the mtime fast path.
        mtime_ns: i64,
        cached: bool,
    },
    Dir {
        /// Sorted, unique entry names.
        entries: Vec<String>,
    },
    Symlink {
        dest: String,
    },
    Pipe {
        op: PipeOp,
        writer_epoch: u64,
    },
    Special {
        policy: SpecialPolicy,
    },
}

impl ContentState {
    pub fn empty_file() -> ContentState {
        ContentState::File { hash: Digest::empty(), size: 0, mtime_ns: 0, cached: true }
    }

    pub fn file_hash(&self) -> Option<Digest> {
        match self {
            ContentState::File { hash, .. } => Some(*hash),
            _ => None,
        }
    }
}

impl fmt::Display for ContentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContentState::File { hash, size, mtime_ns, cached } => write!(
                f,
                "[mtime={}, size={}, hash={}, cached={}]",
                mtime_ns,
                size,
                &hash.to_hex()[..6],
                cached
            ),
            ContentState::Dir { entries } => {
                f.write_str("[dir: {")?;
                for (i, e) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e:?}")?;
                }
                f.write_str("}]")
            }
            ContentState::Symlink { dest } => write!(f, "[symlink: {dest:?}]"),
            ContentState::Pipe { op, writer_epoch } => {
                write!(f, "[pipe {:?} epoch={}]", op, writer_epoch)
            }
            ContentState::Special { policy } => write!(f, "[special {:?}]", policy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialKind {
    Stdin,
    Stdout,
    Stderr,
    Root,
    /// A never-changed device such as /dev/null.
    Null,
}

impl SpecialKind {
    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        use SpecialKind::*;
        [Stdin, Stdout, Stderr, Root, Null].get(v as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefComparison {
    SameInstance,
    DifferentInstance,
}

/// A launched program: what it runs, its arguments and environment, and the
/// parent refs it starts with.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Command {
    pub exe: String,
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub cwd: Ref,
    pub root: Ref,
    /// fd number to a ref in the parent's ref space.
    pub initial_fds: BTreeMap<u32, Ref>,
}

impl Command {
    pub fn new(exe: impl Into<String>, args: &[&str]) -> Command {
        let exe = exe.into();
        let mut argv = vec![exe_name(&exe).to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        Command {
            exe,
            argv,
            env: BTreeMap::new(),
            cwd: Ref::CWD,
            root: Ref::ROOT,
            initial_fds: [(0, Ref::STDIN), (1, Ref::STDOUT), (2, Ref::STDERR)].into(),
        }
    }

    /// Identity used by weak equivalence: fds are deliberately excluded.
    pub fn same_invocation(&self, other: &Command) -> bool {
        self.exe == other.exe
            && self.argv == other.argv
            && self.env == other.env
            && self.cwd == other.cwd
            && self.root == other.root
    }

    pub fn short_name(&self) -> String {
        self.argv.join(" ")
    }
}

pub fn exe_name(exe: &str) -> &str {
    exe.rsplit('/').next().unwrap_or(exe)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    PathRef { base: Ref, path: String, flags: AccessFlags, out: Ref },
    FileRef { out: Ref },
    DirRef { out: Ref },
    PipeRef { read: Ref, write: Ref },
    SymlinkRef { dest: String, out: Ref },
    SpecialRef { which: SpecialKind, out: Ref },
    CompareRefs { a: Ref, b: Ref, cmp: RefComparison },
    ExpectResult { r: Ref, expected: ResultCode },
    MatchMetadata { r: Ref, state: MetadataState },
    MatchContent { r: Ref, state: ContentState },
    ExitResult { child: CmdRef, expected: i32 },
    UpdateMetadata { r: Ref, state: MetadataState },
    UpdateContent { r: Ref, state: ContentState },
    AddEntry { dir: Ref, name: String, target: Ref },
    RemoveEntry { dir: Ref, name: String, target: Ref },
    Launch { child: CmdRef, command: Command },
    Join { child: CmdRef },
    UsingRef { r: Ref },
    DoneWithRef { r: Ref },
    Exit { code: i32 },
}

impl Statement {
    /// Checks carry an expectation that can fail during evaluation; they are
    /// the statements that get post-build counterparts.
    pub fn is_check(&self) -> bool {
        matches!(
            self,
            Statement::CompareRefs { .. }
                | Statement::ExpectResult { .. }
                | Statement::MatchMetadata { .. }
                | Statement::MatchContent { .. }
                | Statement::ExitResult { .. }
        )
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Statement::PathRef { .. } => "PathRef",
            Statement::FileRef { .. } => "FileRef",
            Statement::DirRef { .. } => "DirRef",
            Statement::PipeRef { .. } => "PipeRef",
            Statement::SymlinkRef { .. } => "SymlinkRef",
            Statement::SpecialRef { .. } => "SpecialRef",
            Statement::CompareRefs { .. } => "CompareRefs",
            Statement::ExpectResult { .. } => "ExpectResult",
            Statement::MatchMetadata { .. } => "MatchMetadata",
            Statement::MatchContent { .. } => "MatchContent",
            Statement::ExitResult { .. } => "ExitResult",
            Statement::UpdateMetadata { .. } => "UpdateMetadata",
            Statement::UpdateContent { .. } => "UpdateContent",
            Statement::AddEntry { .. } => "AddEntry",
            Statement::RemoveEntry { .. } => "RemoveEntry",
            Statement::Launch { .. } => "Launch",
            Statement::Join { .. } => "Join",
            Statement::UsingRef { .. } => "UsingRef",
            Statement::DoneWithRef { .. } => "DoneWithRef",
            Statement::Exit { .. } => "Exit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Phase {
    #[default]
    Pre,
    Post,
}

/// One trace entry: a statement, the command that issued it, and whether it
/// records pre-build or post-build state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub owner: CmdRef,
    pub phase: Phase,
    pub stmt: Statement,
}

impl Record {
    pub fn pre(owner: CmdRef, stmt: Statement) -> Record {
        Record { owner, phase: Phase::Pre, stmt }
    }

    pub fn post(owner: CmdRef, stmt: Statement) -> Record {
        Record { owner, phase: Phase::Post, stmt }
    }
}
