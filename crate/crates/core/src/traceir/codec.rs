use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::types::*;
use super::TraceError;

pub const MAGIC: &[u8; 4] = b"TBLD";
pub const FORMAT_VERSION: u32 = 1;
const POST_BIT: u8 = 0x80;

mod tag {
    pub const PATH_REF: u8 = 1;
    pub const FILE_REF: u8 = 2;
    pub const DIR_REF: u8 = 3;
    pub const PIPE_REF: u8 = 4;
    pub const SYMLINK_REF: u8 = 5;
    pub const SPECIAL_REF: u8 = 6;
    pub const COMPARE_REFS: u8 = 7;
    pub const EXPECT_RESULT: u8 = 8;
    pub const MATCH_METADATA: u8 = 9;
    pub const MATCH_CONTENT: u8 = 10;
    pub const EXIT_RESULT: u8 = 11;
    pub const UPDATE_METADATA: u8 = 12;
    pub const UPDATE_CONTENT: u8 = 13;
    pub const ADD_ENTRY: u8 = 14;
    pub const REMOVE_ENTRY: u8 = 15;
    pub const LAUNCH: u8 = 16;
    pub const JOIN: u8 = 17;
    pub const USING_REF: u8 = 18;
    pub const DONE_WITH_REF: u8 = 19;
    pub const EXIT: u8 = 20;
}

struct Enc<'a> {
    out: &'a mut Vec<u8>,
}

impl Enc<'_> {
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn r(&mut self, r: Ref) {
        self.u32(r.0);
    }
    fn str(&mut self, field: &'static str, s: &str) -> Result<(), TraceError> {
        if s.as_bytes().contains(&0) {
            return Err(TraceError::InvalidField { field });
        }
        let len = u32::try_from(s.len()).map_err(|_| TraceError::InvalidField { field })?;
        self.u32(len);
        self.out.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn count(&mut self, field: &'static str, n: usize) -> Result<(), TraceError> {
        let n = u32::try_from(n).map_err(|_| TraceError::InvalidField { field })?;
        self.u32(n);
        Ok(())
    }
    fn metadata(&mut self, m: &MetadataState) {
        self.u32(m.uid);
        self.u32(m.gid);
        self.u8(m.kind as u8);
        self.u16(m.perms);
    }
    fn content(&mut self, c: &ContentState) -> Result<(), TraceError> {
        match c {
            ContentState::File { hash, size, mtime_ns, cached } => {
                self.u8(0);
                self.out.extend_from_slice(&hash.0);
                self.u64(*size);
                self.i64(*mtime_ns);
                self.u8(*cached as u8);
            }
            ContentState::Dir { entries } => {
                self.u8(1);
                self.count("entries", entries.len())?;
                for e in entries {
                    self.str("entries", e)?;
                }
            }
            ContentState::Symlink { dest } => {
                self.u8(2);
                self.str("dest", dest)?;
            }
            ContentState::Pipe { op, writer_epoch } => {
                self.u8(3);
                self.u8(matches!(op, PipeOp::Write) as u8);
                self.u64(*writer_epoch);
            }
            ContentState::Special { policy } => {
                self.u8(4);
                self.u8(matches!(policy, SpecialPolicy::NeverChanged) as u8);
            }
        }
        Ok(())
    }
    fn command(&mut self, c: &Command) -> Result<(), TraceError> {
        self.str("exe", &c.exe)?;
        self.count("argv", c.argv.len())?;
        for a in &c.argv {
            self.str("argv", a)?;
        }
        self.count("env", c.env.len())?;
        for (k, v) in &c.env {
            if k.contains('=') {
                return Err(TraceError::InvalidField { field: "env" });
            }
            self.str("env", k)?;
            self.str("env", v)?;
        }
        self.r(c.cwd);
        self.r(c.root);
        self.count("initial_fds", c.initial_fds.len())?;
        for (fd, r) in &c.initial_fds {
            self.u32(*fd);
            self.r(*r);
        }
        Ok(())
    }
}

/// Appends one self-delimiting record to `out`. Returns the bytes written.
pub fn encode_record(rec: &Record, out: &mut Vec<u8>) -> Result<usize, TraceError> {
    let start = out.len();
    out.push(0);
    out.extend_from_slice(&[0; 4]);
    let body = out.len();
    let mut e = Enc { out };
    e.u32(rec.owner.0);
    let t = match &rec.stmt {
        Statement::PathRef { base, path, flags, out } => {
            e.r(*base);
            e.str("path", path)?;
            e.u8(flags.to_bits());
            e.u16(flags.create_mode);
            e.r(*out);
            tag::PATH_REF
        }
        Statement::FileRef { out } => {
            e.r(*out);
            tag::FILE_REF
        }
        Statement::DirRef { out } => {
            e.r(*out);
            tag::DIR_REF
        }
        Statement::PipeRef { read, write } => {
            e.r(*read);
            e.r(*write);
            tag::PIPE_REF
        }
        Statement::SymlinkRef { dest, out } => {
            e.str("dest", dest)?;
            e.r(*out);
            tag::SYMLINK_REF
        }
        Statement::SpecialRef { which, out } => {
            e.u8(*which as u8);
            e.r(*out);
            tag::SPECIAL_REF
        }
        Statement::CompareRefs { a, b, cmp } => {
            e.r(*a);
            e.r(*b);
            e.u8(matches!(cmp, RefComparison::DifferentInstance) as u8);
            tag::COMPARE_REFS
        }
        Statement::ExpectResult { r, expected } => {
            e.r(*r);
            e.u8(expected.to_u8());
            tag::EXPECT_RESULT
        }
        Statement::MatchMetadata { r, state } => {
            e.r(*r);
            e.metadata(state);
            tag::MATCH_METADATA
        }
        Statement::MatchContent { r, state } => {
            e.r(*r);
            e.content(state)?;
            tag::MATCH_CONTENT
        }
        Statement::ExitResult { child, expected } => {
            e.u32(child.0);
            e.i32(*expected);
            tag::EXIT_RESULT
        }
        Statement::UpdateMetadata { r, state } => {
            e.r(*r);
            e.metadata(state);
            tag::UPDATE_METADATA
        }
        Statement::UpdateContent { r, state } => {
            e.r(*r);
            e.content(state)?;
            tag::UPDATE_CONTENT
        }
        Statement::AddEntry { dir, name, target } => {
            e.r(*dir);
            e.str("name", name)?;
            e.r(*target);
            tag::ADD_ENTRY
        }
        Statement::RemoveEntry { dir, name, target } => {
            e.r(*dir);
            e.str("name", name)?;
            e.r(*target);
            tag::REMOVE_ENTRY
        }
        Statement::Launch { child, command } => {
            e.u32(child.0);
            e.command(command)?;
            tag::LAUNCH
        }
        Statement::Join { child } => {
            e.u32(child.0);
            tag::JOIN
        }
        Statement::UsingRef { r } => {
            e.r(*r);
            tag::USING_REF
        }
        Statement::DoneWithRef { r } => {
            e.r(*r);
            tag::DONE_WITH_REF
        }
        Statement::Exit { code } => {
            e.i32(*code);
            tag::EXIT
        }
    };
    let len = (out.len() - body) as u32;
    out[start] = t | if rec.phase == Phase::Post { POST_BIT } else { 0 };
    out[start + 1..body].copy_from_slice(&len.to_le_bytes());
    Ok(out.len() - start)
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    /// File offset of the record start, for diagnostics.
    base: u64,
}

impl Dec<'_> {
    fn corrupt(&self) -> TraceError {
        TraceError::Corrupt { offset: self.base + self.pos as u64 }
    }
    fn take(&mut self, n: usize) -> Result<&[u8], TraceError> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TraceError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32, TraceError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, TraceError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn r(&mut self) -> Result<Ref, TraceError> {
        Ok(Ref(self.u32()?))
    }
    fn str(&mut self) -> Result<String, TraceError> {
        let n = self.u32()? as usize;
        let pos = self.pos;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes)
            .map_err(|_| TraceError::Corrupt { offset: self.base + pos as u64 })
    }
    fn count(&mut self) -> Result<usize, TraceError> {
        let n = self.u32()? as usize;
        // Every counted element occupies at least four bytes.
        if n > (self.buf.len() - self.pos) / 4 + 1 {
            return Err(self.corrupt());
        }
        Ok(n)
    }
    fn metadata(&mut self) -> Result<MetadataState, TraceError> {
        let uid = self.u32()?;
        let gid = self.u32()?;
        let kind = ArtifactKind::from_u8(self.u8()?).ok_or_else(|| self.corrupt())?;
        let perms = self.u16()?;
        Ok(MetadataState { uid, gid, kind, perms })
    }
    fn content(&mut self) -> Result<ContentState, TraceError> {
        Ok(match self.u8()? {
            0 => {
                let mut hash = [0u8; 32];
                hash.copy_from_slice(self.take(32)?);
                ContentState::File {
                    hash: Digest(hash),
                    size: self.u64()?,
                    mtime_ns: self.i64()?,
                    cached: self.u8()? != 0,
                }
            }
            1 => {
                let n = self.count()?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push(self.str()?);
                }
                ContentState::Dir { entries }
            }
            2 => ContentState::Symlink { dest: self.str()? },
            3 => ContentState::Pipe {
                op: if self.u8()? != 0 { PipeOp::Write } else { PipeOp::Read },
                writer_epoch: self.u64()?,
            },
            4 => ContentState::Special {
                policy: if self.u8()? != 0 {
                    SpecialPolicy::NeverChanged
                } else {
                    SpecialPolicy::AlwaysChanged
                },
            },
            _ => return Err(self.corrupt()),
        })
    }
    fn command(&mut self) -> Result<Command, TraceError> {
        let exe = self.str()?;
        let n = self.count()?;
        let mut argv = Vec::with_capacity(n);
        for _ in 0..n {
            argv.push(self.str()?);
        }
        let n = self.count()?;
        let mut env = BTreeMap::new();
        for _ in 0..n {
            let k = self.str()?;
            let v = self.str()?;
            env.insert(k, v);
        }
        let cwd = self.r()?;
        let root = self.r()?;
        let n = self.count()?;
        let mut initial_fds = BTreeMap::new();
        for _ in 0..n {
            let fd = self.u32()?;
            initial_fds.insert(fd, self.r()?);
        }
        Ok(Command { exe, argv, env, cwd, root, initial_fds })
    }
}

fn decode_body(t: u8, body: &[u8], base: u64) -> Result<(CmdRef, Statement), TraceError> {
    let mut d = Dec { buf: body, pos: 0, base };
    let owner = CmdRef(d.u32()?);
    let stmt = match t {
        tag::PATH_REF => {
            let base = d.r()?;
            let path = d.str()?;
            let bits = d.u8()?;
            let mode = d.u16()?;
            Statement::PathRef { base, path, flags: AccessFlags::from_bits(bits, mode), out: d.r()? }
        }
        tag::FILE_REF => Statement::FileRef { out: d.r()? },
        tag::DIR_REF => Statement::DirRef { out: d.r()? },
        tag::PIPE_REF => Statement::PipeRef { read: d.r()?, write: d.r()? },
        tag::SYMLINK_REF => Statement::SymlinkRef { dest: d.str()?, out: d.r()? },
        tag::SPECIAL_REF => {
            let which = SpecialKind::from_u8(d.u8()?).ok_or_else(|| d.corrupt())?;
            Statement::SpecialRef { which, out: d.r()? }
        }
        tag::COMPARE_REFS => Statement::CompareRefs {
            a: d.r()?,
            b: d.r()?,
            cmp: if d.u8()? != 0 {
                RefComparison::DifferentInstance
            } else {
                RefComparison::SameInstance
            },
        },
        tag::EXPECT_RESULT => {
            let r = d.r()?;
            let expected = ResultCode::from_u8(d.u8()?).ok_or_else(|| d.corrupt())?;
            Statement::ExpectResult { r, expected }
        }
        tag::MATCH_METADATA => Statement::MatchMetadata { r: d.r()?, state: d.metadata()? },
        tag::MATCH_CONTENT => Statement::MatchContent { r: d.r()?, state: d.content()? },
        tag::EXIT_RESULT => Statement::ExitResult { child: CmdRef(d.u32()?), expected: d.i32()? },
        tag::UPDATE_METADATA => Statement::UpdateMetadata { r: d.r()?, state: d.metadata()? },
        tag::UPDATE_CONTENT => Statement::UpdateContent { r: d.r()?, state: d.content()? },
        tag::ADD_ENTRY => Statement::AddEntry { dir: d.r()?, name: d.str()?, target: d.r()? },
        tag::REMOVE_ENTRY => {
            Statement::RemoveEntry { dir: d.r()?, name: d.str()?, target: d.r()? }
        }
        tag::LAUNCH => Statement::Launch { child: CmdRef(d.u32()?), command: d.command()? },
        tag::JOIN => Statement::Join { child: CmdRef(d.u32()?) },
        tag::USING_REF => Statement::UsingRef { r: d.r()? },
        tag::DONE_WITH_REF => Statement::DoneWithRef { r: d.r()? },
        tag::EXIT => Statement::Exit { code: d.i32()? },
        other => return Err(TraceError::UnsupportedVersion { tag: other }),
    };
    if d.pos != body.len() {
        return Err(d.corrupt());
    }
    Ok((owner, stmt))
}

/// Decodes one record from the front of `bytes`. Returns the record and the
/// number of bytes consumed, or `None` at end of input.
pub fn decode_record(bytes: &[u8]) -> Result<Option<(Record, usize)>, TraceError> {
    if bytes.is_empty() {
        return Ok(None);
    }
    if bytes.len() < 5 {
        return Err(TraceError::Corrupt { offset: bytes.len() as u64 });
    }
    let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    if bytes.len() - 5 < len {
        return Err(TraceError::Corrupt { offset: bytes.len() as u64 });
    }
    let (owner, stmt) = decode_body(bytes[0] & !POST_BIT, &bytes[5..5 + len], 5)?;
    let phase = if bytes[0] & POST_BIT != 0 { Phase::Post } else { Phase::Pre };
    Ok(Some((Record { owner, phase, stmt }, 5 + len)))
}

/// Streaming reader. Holds at most one record body in memory at a time.
pub struct TraceReader<R> {
    src: R,
    buf: Vec<u8>,
    offset: u64,
    peak: usize,
    done: bool,
}

impl<R: Read> TraceReader<R> {
    /// Validates the header and positions at the first record.
    pub fn new(mut src: R) -> Result<Self, TraceError> {
        let mut header = [0u8; 8];
        read_full(&mut src, &mut header, 0)?;
        if &header[..4] != MAGIC {
            return Err(TraceError::BadMagic);
        }
        let version = u32::from_le_bytes(header[4..].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TraceError::UnsupportedFormat { version });
        }
        Ok(TraceReader { src, buf: Vec::new(), offset: 8, peak: 0, done: false })
    }

    /// Reader that yields nothing, for a missing trace file.
    pub fn empty(src: R) -> Self {
        TraceReader { src, buf: Vec::new(), offset: 0, peak: 0, done: true }
    }

    /// Largest buffer capacity used so far.
    pub fn peak_buffer(&self) -> usize {
        self.peak
    }

    pub fn next_record(&mut self) -> Result<Option<Record>, TraceError> {
        if self.done {
            return Ok(None);
        }
        let mut head = [0u8; 5];
        let start = self.offset;
        let n = read_some(&mut self.src, &mut head)?;
        if n == 0 {
            self.done = true;
            return Ok(None);
        }
        if n < 5 {
            return Err(TraceError::Corrupt { offset: start + n as u64 });
        }
        let len = u32::from_le_bytes(head[1..].try_into().unwrap()) as usize;
        self.buf.clear();
        // Grow gradually so a corrupt length cannot force a huge allocation.
        let mut remaining = len;
        while remaining > 0 {
            let chunk = remaining.min(64 * 1024);
            let at = self.buf.len();
            self.buf.resize(at + chunk, 0);
            read_full(&mut self.src, &mut self.buf[at..], start + 5 + at as u64)?;
            remaining -= chunk;
        }
        self.peak = self.peak.max(self.buf.capacity());
        self.offset = start + 5 + len as u64;
        let (owner, stmt) = decode_body(head[0] & !POST_BIT, &self.buf, start + 5)?;
        let phase = if head[0] & POST_BIT != 0 { Phase::Post } else { Phase::Pre };
        Ok(Some(Record { owner, phase, stmt }))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<Record, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_some<R: Read>(src: &mut R, buf: &mut [u8]) -> Result<usize, TraceError> {
    let mut n = 0;
    while n < buf.len() {
        match src.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(n)
}

fn read_full<R: Read>(src: &mut R, buf: &mut [u8], offset: u64) -> Result<(), TraceError> {
    let n = read_some(src, buf)?;
    if n < buf.len() {
        return Err(TraceError::Corrupt { offset: offset + n as u64 });
    }
    Ok(())
}

/// Opens a trace file. A missing file reads as an empty trace.
pub fn open_trace(path: &Path) -> Result<TraceReader<BufReader<File>>, TraceError> {
    match File::open(path) {
        Ok(f) => TraceReader::new(BufReader::new(f)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            // Any readable handle will do; it is never read.
            let f = File::open("/dev/null")?;
            Ok(TraceReader::empty(BufReader::new(f)))
        }
        Err(e) => Err(e.into()),
    }
}

/// Streaming writer. Records go to a temporary sibling file which replaces
/// the destination on `finish`.
pub struct TraceWriter {
    out: BufWriter<File>,
    tmp: PathBuf,
    dest: PathBuf,
    buf: Vec<u8>,
    count: u64,
}

impl TraceWriter {
    pub fn create(dest: &Path) -> Result<Self, TraceError> {
        let tmp = dest.with_extension("tmp");
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        Ok(TraceWriter { out, tmp, dest: dest.to_path_buf(), buf: Vec::new(), count: 0 })
    }

    pub fn write(&mut self, rec: &Record) -> Result<usize, TraceError> {
        self.buf.clear();
        let n = encode_record(rec, &mut self.buf)?;
        self.out.write_all(&self.buf)?;
        self.count += 1;
        Ok(n)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(self) -> Result<(), TraceError> {
        let f = self.out.into_inner().map_err(|e| e.into_error())?;
        f.sync_all()?;
        drop(f);
        fs::rename(&self.tmp, &self.dest)?;
        Ok(())
    }
}

/// Writes a whole trace atomically.
pub fn write_trace<'a, I>(path: &Path, records: I) -> Result<u64, TraceError>
where
    I: IntoIterator<Item = &'a Record>,
{
    let mut w = TraceWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    let n = w.count();
    w.finish()?;
    Ok(n)
}

/// Reads a whole trace into memory.
pub fn read_trace(path: &Path) -> Result<Vec<Record>, TraceError> {
    open_trace(path)?.collect()
}
