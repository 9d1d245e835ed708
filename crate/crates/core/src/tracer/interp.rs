use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::{symlink, MetadataExt, OpenOptionsExt, PermissionsExt};

use super::script::{self, hashcopy_output, Block, Instr, Port, Word};
use super::translate::{translate, TraceEvent};
use super::{FdTarget, Host, TracerError};
use crate::fsmodel::{kind_of, mtime_of};
use crate::traceir::{
    exe_name, AccessFlags, CmdRef, Command, ContentState, Digest, MetadataState, PipeOp, Ref,
    ResultCode, SpecialKind,
};

/// Outcome of one scheduling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Ran,
    Blocked,
    Exited(i32),
}

enum Flow {
    Next,
    Blocked,
    Fail(String),
    Exit(i32),
}

type Res = Result<Flow, TracerError>;

struct Frame {
    body: Block,
    pc: usize,
    each: Option<(String, Vec<String>, usize)>,
}

/// A running BuildScript command.
pub struct Process {
    pub id: CmdRef,
    command: Command,
    frames: Vec<Frame>,
    vars: HashMap<String, String>,
    next_ref: u32,
    pipes: HashMap<String, (Option<Ref>, Option<Ref>)>,
    children: HashMap<String, CmdRef>,
    seen: HashSet<(String, Digest)>,
    tmp_counter: u32,
    started: bool,
    exit: Option<i32>,
}

fn code_of(e: &io::Error) -> ResultCode {
    e.raw_os_error().and_then(ResultCode::from_errno).unwrap_or(ResultCode::Access)
}

fn split_parent(path: &str) -> Option<(String, String)> {
    let p = path.trim_end_matches('/');
    let (dir, name) = match p.rfind('/') {
        Some(0) => ("/".to_string(), &p[1..]),
        Some(i) => (p[..i].to_string(), &p[i + 1..]),
        None => (".".to_string(), p),
    };
    if name.is_empty() || name == "." || name == ".." {
        None
    } else {
        Some((dir, name.to_string()))
    }
}

/// Shell-style match supporting `*` and `?`.
pub fn glob_match(pat: &str, name: &str) -> bool {
    let p: Vec<char> = pat.chars().collect();
    let n: Vec<char> = name.chars().collect();
    let (mut i, mut j) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while j < n.len() {
        if i < p.len() && (p[i] == '?' || p[i] == n[j]) {
            i += 1;
            j += 1;
        } else if i < p.len() && p[i] == '*' {
            star = Some((i, j));
            i += 1;
        } else if let Some((si, sj)) = star {
            i = si + 1;
            j = sj + 1;
            star = Some((si, sj + 1));
        } else {
            return false;
        }
    }
    while i < p.len() && p[i] == '*' {
        i += 1;
    }
    i == p.len()
}

impl Process {
    pub fn new(id: CmdRef, command: Command) -> Process {
        Process {
            id,
            command,
            frames: Vec::new(),
            vars: HashMap::new(),
            next_ref: Ref::FIRST_FREE,
            pipes: HashMap::new(),
            children: HashMap::new(),
            seen: HashSet::new(),
            tmp_counter: 0,
            started: false,
            exit: None,
        }
    }

    pub fn command(&self) -> &Command {
        &self.command
    }

    pub fn exited(&self) -> Option<i32> {
        self.exit
    }

    /// Runs until the next instruction boundary.
    pub fn step(&mut self, h: &mut dyn Host) -> Result<Step, TracerError> {
        if let Some(c) = self.exit {
            return Ok(Step::Exited(c));
        }
        let flow = if !self.started {
            self.started = true;
            self.load(h)?
        } else {
            self.next_instr(h)?
        };
        match flow {
            Flow::Next => Ok(Step::Ran),
            Flow::Blocked => Ok(Step::Blocked),
            Flow::Fail(msg) => {
                let line = format!("{}: {msg}\n", self.command.argv[0]);
                h.console(self.id, 2, line.as_bytes());
                self.finish(h, 1)
            }
            Flow::Exit(code) => self.finish(h, code),
        }
    }

    fn finish(&mut self, h: &mut dyn Host, code: i32) -> Result<Step, TracerError> {
        self.event(h, TraceEvent::Exit { code })?;
        self.exit = Some(code);
        Ok(Step::Exited(code))
    }

    fn event(&mut self, h: &mut dyn Host, ev: TraceEvent) -> Result<(), TracerError> {
        for s in translate(ev) {
            h.emit(self.id, s)?;
        }
        Ok(())
    }

    fn fresh(&mut self) -> Ref {
        let r = Ref(self.next_ref);
        self.next_ref += 1;
        r
    }

    fn load(&mut self, h: &mut dyn Host) -> Res {
        let exe = self.command.exe.clone();
        let (r, code) = self.open(h, &exe, AccessFlags::read())?;
        if code != ResultCode::Success {
            h.console(self.id, 2, format!("{exe}: {code}\n").as_bytes());
            return Ok(Flow::Exit(127));
        }
        let bytes = match fs::read(h.real_path(self.id, &exe)) {
            Ok(b) => b,
            Err(e) => {
                h.console(self.id, 2, format!("{exe}: {e}\n").as_bytes());
                return Ok(Flow::Exit(127));
            }
        };
        self.observe_read(h, r, &exe, &bytes)?;
        let text = String::from_utf8_lossy(&bytes);
        match script::parse(&text) {
            Ok(prog) => {
                self.frames.push(Frame { body: prog.into(), pc: 0, each: None });
                Ok(Flow::Next)
            }
            Err(e) => {
                h.console(self.id, 2, format!("{exe}: {e}\n").as_bytes());
                Ok(Flow::Exit(127))
            }
        }
    }

    fn next_instr(&mut self, h: &mut dyn Host) -> Res {
        loop {
            let Some(top) = self.frames.last_mut() else { return Ok(Flow::Exit(0)) };
            if top.pc < top.body.len() {
                break;
            }
            match &mut top.each {
                Some((var, items, idx)) if *idx + 1 < items.len() => {
                    *idx += 1;
                    let (var, val) = (var.clone(), items[*idx].clone());
                    top.pc = 0;
                    self.vars.insert(var, val);
                }
                _ => {
                    self.frames.pop();
                }
            }
        }
        let depth = self.frames.len() - 1;
        let instr = {
            let top = &mut self.frames[depth];
            top.pc += 1;
            top.body[top.pc - 1].clone()
        };
        let flow = self.exec(h, &instr)?;
        if matches!(flow, Flow::Blocked) {
            self.frames[depth].pc -= 1;
        }
        Ok(flow)
    }

    fn lookup_var(&self, name: &str) -> String {
        let argv = &self.command.argv;
        if let Ok(n) = name.parse::<usize>() {
            return argv.get(n).cloned().unwrap_or_default();
        }
        match name {
            "@" => argv[1..].join(" "),
            "#" => (argv.len() - 1).to_string(),
            _ => self.vars.get(name).cloned().unwrap_or_default(),
        }
    }

    fn subst(&self, text: &str) -> String {
        let mut out = String::new();
        let cs: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < cs.len() {
            if cs[i] != '$' || i + 1 == cs.len() {
                out.push(cs[i]);
                i += 1;
                continue;
            }
            let c = cs[i + 1];
            if c == '{' {
                if let Some(end) = cs[i + 2..].iter().position(|&c| c == '}') {
                    let name: String = cs[i + 2..i + 2 + end].iter().collect();
                    out.push_str(&self.lookup_var(&name));
                    i += end + 3;
                    continue;
                }
            } else if c == '@' || c == '#' {
                out.push_str(&self.lookup_var(&c.to_string()));
                i += 2;
                continue;
            } else if c.is_ascii_alphanumeric() || c == '_' {
                let mut j = i + 1;
                while j < cs.len() && (cs[j].is_ascii_alphanumeric() || cs[j] == '_') {
                    j += 1;
                }
                let name: String = cs[i + 1..j].iter().collect();
                out.push_str(&self.lookup_var(&name));
                i = j;
                continue;
            }
            out.push('$');
            i += 1;
        }
        out
    }

    fn expand(&self, w: &Word) -> Vec<String> {
        if w.quoted {
            return vec![w.text.clone()];
        }
        if w.text == "$@" {
            return self.command.argv[1..].to_vec();
        }
        self.subst(&w.text).split_whitespace().map(str::to_string).collect()
    }

    fn expand_all(&self, ws: &[Word]) -> Vec<String> {
        ws.iter().flat_map(|w| self.expand(w)).collect()
    }

    fn expand1(&self, w: &Word) -> String {
        self.expand(w).join(" ")
    }

    /// Resolves `path` for real and records the resolution.
    fn open(&mut self, h: &mut dyn Host, path: &str, flags: AccessFlags) -> Result<(Ref, ResultCode), TracerError> {
        let code = if path.is_empty() {
            ResultCode::NoEntry
        } else {
            h.prepare(self.id, path, !flags.nofollow)?;
            let real = h.real_path(self.id, path);
            if flags.is_access() || flags.create || flags.truncate {
                let created = flags.create && fs::symlink_metadata(&real).is_err();
                let mut o = OpenOptions::new();
                o.read(flags.read || !flags.write).write(flags.write);
                o.create(flags.create).truncate(flags.truncate).create_new(flags.exclusive);
                if flags.create {
                    o.mode(flags.create_mode as u32);
                }
                if flags.nofollow {
                    o.custom_flags(libc::O_NOFOLLOW);
                }
                match o.open(&real) {
                    Ok(_) => {
                        if created {
                            let _ = fs::set_permissions(
                                &real,
                                fs::Permissions::from_mode(flags.create_mode as u32),
                            );
                        }
                        ResultCode::Success
                    }
                    Err(e) => code_of(&e),
                }
            } else {
                let m = if flags.nofollow { fs::symlink_metadata(&real) } else { fs::metadata(&real) };
                match m {
                    Ok(_) => ResultCode::Success,
                    Err(e) => code_of(&e),
                }
            }
        };
        let out = self.fresh();
        self.event(h, TraceEvent::Open { base: Ref::CWD, path: path.to_string(), flags, out, code })?;
        Ok((out, code))
    }

    fn file_state(&self, h: &dyn Host, path: &str, bytes: &[u8], cached: bool) -> ContentState {
        let mtime_ns = fs::metadata(h.real_path(self.id, path)).map(|m| mtime_of(&m)).unwrap_or(0);
        ContentState::File { hash: Digest::of(bytes), size: bytes.len() as u64, mtime_ns, cached }
    }

    fn observe_read(&mut self, h: &mut dyn Host, r: Ref, path: &str, bytes: &[u8]) -> Result<(), TracerError> {
        let state = self.file_state(h, path, bytes, false);
        let key = (path.to_string(), Digest::of(bytes));
        if self.seen.insert(key) {
            self.event(h, TraceEvent::Read { r, state })?;
        }
        Ok(())
    }

    fn read_path(&mut self, h: &mut dyn Host, p: &str) -> Result<Result<Vec<u8>, Flow>, TracerError> {
        let (r, code) = self.open(h, p, AccessFlags::read())?;
        if code != ResultCode::Success {
            return Ok(Err(Flow::Fail(format!("{p}: {code}"))));
        }
        match fs::read(h.real_path(self.id, p)) {
            Ok(b) => {
                self.observe_read(h, r, p, &b)?;
                Ok(Ok(b))
            }
            Err(e) => Ok(Err(Flow::Fail(format!("{p}: {e}")))),
        }
    }

    fn read_fd(&mut self, h: &mut dyn Host, r: Ref) -> Result<Result<Vec<u8>, Flow>, TracerError> {
        match h.fd_target(self.id, r)? {
            FdTarget::File(real) => {
                let b = match fs::read(&real) {
                    Ok(b) => b,
                    Err(e) => return Ok(Err(Flow::Fail(format!("{}: {e}", real.display())))),
                };
                let mtime_ns = fs::metadata(&real).map(|m| mtime_of(&m)).unwrap_or(0);
                let state = ContentState::File {
                    hash: Digest::of(&b),
                    size: b.len() as u64,
                    mtime_ns,
                    cached: false,
                };
                self.event(h, TraceEvent::Read { r, state })?;
                Ok(Ok(b))
            }
            FdTarget::Pipe(a) => {
                if h.pipe_blocked(self.id, a) {
                    return Ok(Err(Flow::Blocked));
                }
                let data = h.pipe_take(a);
                if let Some(state) = h.model_content(self.id, r)? {
                    self.event(h, TraceEvent::Read { r, state })?;
                }
                Ok(Ok(data))
            }
            FdTarget::Special(SpecialKind::Stdin) | FdTarget::Special(SpecialKind::Null) => {
                if let Some(state) = h.model_content(self.id, r)? {
                    self.event(h, TraceEvent::Read { r, state })?;
                }
                Ok(Ok(Vec::new()))
            }
            _ => Ok(Err(Flow::Fail(format!("{r} is not readable")))),
        }
    }

    fn write_path(&mut self, h: &mut dyn Host, p: &str, data: &[u8], append: bool) -> Res {
        let flags = if append { AccessFlags::write_append(0o644) } else { AccessFlags::write_truncate(0o644) };
        let (r, code) = self.open(h, p, flags)?;
        if code != ResultCode::Success {
            return Ok(Flow::Fail(format!("{p}: {code}")));
        }
        let real = h.real_path(self.id, p);
        let prior = if append {
            match fs::read(&real) {
                Ok(b) => Some(b),
                Err(e) => return Ok(Flow::Fail(format!("{p}: {e}"))),
            }
        } else {
            None
        };
        let prior_state = prior.as_ref().map(|b| self.file_state(h, p, b, false));
        let mut all = prior.unwrap_or_default();
        all.extend_from_slice(data);
        if let Err(e) = fs::write(&real, &all) {
            return Ok(Flow::Fail(format!("{p}: {e}")));
        }
        let cached = h.store(&all);
        let state = self.file_state(h, p, &all, cached);
        self.seen.insert((p.to_string(), Digest::of(&all)));
        self.event(h, TraceEvent::Write { r, prior: prior_state, state })?;
        Ok(Flow::Next)
    }

    fn write_fd(&mut self, h: &mut dyn Host, r: Ref, data: &[u8]) -> Res {
        match h.fd_target(self.id, r)? {
            FdTarget::File(real) => {
                let prior = fs::read(&real).unwrap_or_default();
                let mtime_ns = fs::metadata(&real).map(|m| mtime_of(&m)).unwrap_or(0);
                let prior_state = ContentState::File {
                    hash: Digest::of(&prior),
                    size: prior.len() as u64,
                    mtime_ns,
                    cached: false,
                };
                let appended = OpenOptions::new().append(true).open(&real).and_then(|mut f| f.write_all(data));
                if let Err(e) = appended {
                    return Ok(Flow::Fail(format!("{}: {e}", real.display())));
                }
                let mut all = prior;
                all.extend_from_slice(data);
                let cached = h.store(&all);
                let mtime_ns = fs::metadata(&real).map(|m| mtime_of(&m)).unwrap_or(0);
                let state =
                    ContentState::File { hash: Digest::of(&all), size: all.len() as u64, mtime_ns, cached };
                self.event(h, TraceEvent::Write { r, prior: Some(prior_state), state })?;
                Ok(Flow::Next)
            }
            FdTarget::Pipe(a) => {
                let epoch = match h.model_content(self.id, r)? {
                    Some(ContentState::Pipe { writer_epoch, .. }) => writer_epoch,
                    _ => 0,
                };
                h.pipe_put(a, data);
                let state = ContentState::Pipe { op: PipeOp::Write, writer_epoch: epoch + 1 };
                self.event(h, TraceEvent::Write { r, prior: None, state })?;
                Ok(Flow::Next)
            }
            FdTarget::Special(SpecialKind::Stdout) => {
                h.console(self.id, 1, data);
                Ok(Flow::Next)
            }
            FdTarget::Special(SpecialKind::Stderr) => {
                h.console(self.id, 2, data);
                Ok(Flow::Next)
            }
            FdTarget::Special(SpecialKind::Null) => Ok(Flow::Next),
            _ => Ok(Flow::Fail(format!("{r} is not writable"))),
        }
    }

    fn list(&mut self, h: &mut dyn Host, p: &str) -> Result<Result<Vec<String>, Flow>, TracerError> {
        let (r, code) = self.open(h, p, AccessFlags::read())?;
        if code != ResultCode::Success {
            return Ok(Err(Flow::Fail(format!("{p}: {code}"))));
        }
        h.prepare_listing(self.id, r)?;
        let rd = match fs::read_dir(h.real_path(self.id, p)) {
            Ok(rd) => rd,
            Err(e) => return Ok(Err(Flow::Fail(format!("{p}: {e}")))),
        };
        let mut names: Vec<String> = rd
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !h.hidden(p, n))
            .collect();
        names.sort();
        self.event(h, TraceEvent::Read { r, state: ContentState::Dir { entries: names.clone() } })?;
        Ok(Ok(names))
    }

    /// Removes whatever `path` names, for real and in the trace.
    fn unlink(&mut self, h: &mut dyn Host, path: &str, target: Ref, parent: Ref, name: &str) -> Res {
        let real = h.real_path(self.id, path);
        let res = match fs::symlink_metadata(&real) {
            Ok(m) if m.is_dir() => fs::remove_dir(&real),
            _ => fs::remove_file(&real),
        };
        if let Err(e) = res {
            return Ok(Flow::Fail(format!("{path}: {e}")));
        }
        self.event(h, TraceEvent::Unlink { parent, name: name.to_string(), target })?;
        Ok(Flow::Next)
    }

    fn exec(&mut self, h: &mut dyn Host, instr: &Instr) -> Res {
        macro_rules! take {
            ($e:expr) => {
                match $e? {
                    Ok(v) => v,
                    Err(flow) => return Ok(flow),
                }
            };
        }
        match instr {
            Instr::Set { var, value } => {
                let v = self.expand_all(value).join(" ");
                self.vars.insert(var.clone(), v);
            }
            Instr::Read { src, var } => {
                let bytes = match src {
                    Port::Path(w) => {
                        let p = self.expand1(w);
                        take!(self.read_path(h, &p))
                    }
                    Port::Stdin => take!(self.read_fd(h, Ref::STDIN)),
                    Port::Pipe(n) => match self.pipes.get(n).and_then(|e| e.0) {
                        Some(r) => take!(self.read_fd(h, r)),
                        None => return Ok(Flow::Fail(format!("no read end for |{n}"))),
                    },
                    Port::Stdout => return Ok(Flow::Fail("cannot read stdout".into())),
                };
                if let Some(v) = var {
                    self.vars.insert(v.clone(), String::from_utf8_lossy(&bytes).into_owned());
                }
            }
            Instr::Write { dst, value, append } => {
                let data = self.expand_all(value).join(" ").into_bytes();
                return match dst {
                    Port::Path(w) => {
                        let p = self.expand1(w);
                        self.write_path(h, &p, &data, *append)
                    }
                    Port::Stdout => self.write_fd(h, Ref::STDOUT, &data),
                    Port::Pipe(n) => match self.pipes.get(n).and_then(|e| e.1) {
                        Some(r) => self.write_fd(h, r, &data),
                        None => Ok(Flow::Fail(format!("no write end for |{n}"))),
                    },
                    Port::Stdin => Ok(Flow::Fail("cannot write stdin".into())),
                };
            }
            Instr::Stat { path } => {
                let p = self.expand1(path);
                let (r, code) = self.open(h, &p, AccessFlags::default())?;
                if code != ResultCode::Success {
                    return Ok(Flow::Fail(format!("{p}: {code}")));
                }
                let m = match fs::metadata(h.real_path(self.id, &p)) {
                    Ok(m) => m,
                    Err(e) => return Ok(Flow::Fail(format!("{p}: {e}"))),
                };
                let meta = MetadataState {
                    uid: m.uid(),
                    gid: m.gid(),
                    kind: kind_of(&m.file_type()),
                    perms: (m.mode() & 0o777) as u16,
                };
                self.event(h, TraceEvent::Stat { r, meta })?;
            }
            Instr::List { path, var } => {
                let p = self.expand1(path);
                let names = take!(self.list(h, &p));
                if let Some(v) = var {
                    self.vars.insert(v.clone(), names.join(" "));
                }
            }
            Instr::Glob { pattern, var } => {
                let pat = self.expand1(pattern);
                let (dir, fp) = match pat.rfind('/') {
                    Some(i) => (pat[..i].to_string(), pat[i + 1..].to_string()),
                    None => (".".to_string(), pat.clone()),
                };
                let names = take!(self.list(h, &dir));
                let hits: Vec<String> = names
                    .into_iter()
                    .filter(|n| glob_match(&fp, n) && (!n.starts_with('.') || fp.starts_with('.')))
                    .map(|n| if dir == "." { n } else { format!("{dir}/{n}") })
                    .collect();
                self.vars.insert(var.clone(), hits.join(" "));
            }
            Instr::Mkdir { path } => {
                let p = self.expand1(path);
                let mut prefix = if p.starts_with('/') { "/".to_string() } else { String::new() };
                for comp in p.split('/').filter(|c| !c.is_empty() && *c != ".") {
                    if !prefix.is_empty() && !prefix.ends_with('/') {
                        prefix.push('/');
                    }
                    prefix.push_str(comp);
                    let (_, code) = self.open(h, &prefix, AccessFlags::probe())?;
                    let real = h.real_path(self.id, &prefix);
                    if code == ResultCode::Success {
                        if !fs::metadata(&real).map(|m| m.is_dir()).unwrap_or(false) {
                            return Ok(Flow::Fail(format!("{prefix}: {}", ResultCode::Exists)));
                        }
                        continue;
                    }
                    if code != ResultCode::NoEntry {
                        return Ok(Flow::Fail(format!("{prefix}: {code}")));
                    }
                    let Some((parent, name)) = split_parent(&prefix) else {
                        return Ok(Flow::Fail(format!("{prefix}: bad name")));
                    };
                    let (dr, dcode) = self.open(h, &parent, AccessFlags::default())?;
                    if dcode != ResultCode::Success {
                        return Ok(Flow::Fail(format!("{parent}: {dcode}")));
                    }
                    if let Err(e) = fs::create_dir(&real) {
                        return Ok(Flow::Fail(format!("{prefix}: {e}")));
                    }
                    let _ = fs::set_permissions(&real, fs::Permissions::from_mode(0o755));
                    let out = self.fresh();
                    self.event(h, TraceEvent::Mkdir { parent: dr, name, out })?;
                }
            }
            Instr::Rm { path } => {
                let p = self.expand1(path);
                let (pr, code) = self.open(h, &p, AccessFlags::probe())?;
                if code == ResultCode::NoEntry {
                    return Ok(Flow::Next);
                }
                if code != ResultCode::Success {
                    return Ok(Flow::Fail(format!("{p}: {code}")));
                }
                let Some((parent, name)) = split_parent(&p) else {
                    return Ok(Flow::Fail(format!("{p}: bad name")));
                };
                let (dr, dcode) = self.open(h, &parent, AccessFlags::default())?;
                if dcode != ResultCode::Success {
                    return Ok(Flow::Fail(format!("{parent}: {dcode}")));
                }
                return self.unlink(h, &p, pr, dr, &name);
            }
            Instr::Symlink { dest, name } => {
                let d = self.expand1(dest);
                let n = self.expand1(name);
                let (pr, code) = self.open(h, &n, AccessFlags::probe())?;
                let Some((parent, base)) = split_parent(&n) else {
                    return Ok(Flow::Fail(format!("{n}: bad name")));
                };
                let (dr, dcode) = self.open(h, &parent, AccessFlags::default())?;
                if dcode != ResultCode::Success {
                    return Ok(Flow::Fail(format!("{parent}: {dcode}")));
                }
                if code == ResultCode::Success {
                    let flow = self.unlink(h, &n, pr, dr, &base)?;
                    if !matches!(flow, Flow::Next) {
                        return Ok(flow);
                    }
                } else if code != ResultCode::NoEntry {
                    return Ok(Flow::Fail(format!("{n}: {code}")));
                }
                if let Err(e) = symlink(&d, h.real_path(self.id, &n)) {
                    return Ok(Flow::Fail(format!("{n}: {e}")));
                }
                let out = self.fresh();
                self.event(h, TraceEvent::Symlink { parent: dr, name: base, dest: d, out })?;
            }
            Instr::Pipe { name } => {
                let read = self.fresh();
                let write = self.fresh();
                self.event(h, TraceEvent::Pipe { read, write })?;
                self.pipes.insert(name.clone(), (Some(read), Some(write)));
            }
            Instr::Close { port } => {
                let refs = match port {
                    Port::Pipe(name) => match self.pipes.remove(name) {
                        Some((r, w)) => vec![r, w],
                        None => return Ok(Flow::Fail(format!("no pipe |{name}"))),
                    },
                    Port::Stdin => vec![Some(Ref::STDIN)],
                    Port::Stdout => vec![Some(Ref::STDOUT)],
                    Port::Path(_) => unreachable!("rejected by the parser"),
                };
                for x in refs.into_iter().flatten() {
                    self.event(h, TraceEvent::Close { r: x })?;
                }
            }
            Instr::Spawn { id, exe, args, stdin, stdout } => {
                let exe = self.expand1(exe);
                let mut argv = vec![exe_name(&exe).to_string()];
                argv.extend(self.expand_all(args));
                let mut fds: std::collections::BTreeMap<u32, Ref> =
                    [(0, Ref::STDIN), (1, Ref::STDOUT), (2, Ref::STDERR)].into();
                let mut done = Vec::new();
                if let Some(port) = stdin {
                    let r = match port {
                        Port::Path(w) => {
                            let p = self.expand1(w);
                            let (r, code) = self.open(h, &p, AccessFlags::read())?;
                            if code != ResultCode::Success {
                                return Ok(Flow::Fail(format!("{p}: {code}")));
                            }
                            r
                        }
                        Port::Pipe(n) => match self.pipes.get_mut(n).and_then(|e| e.0.take()) {
                            Some(r) => r,
                            None => return Ok(Flow::Fail(format!("no read end for |{n}"))),
                        },
                        _ => return Ok(Flow::Fail("bad redirection".into())),
                    };
                    fds.insert(0, r);
                    done.push(r);
                }
                if let Some(port) = stdout {
                    let r = match port {
                        Port::Path(w) => {
                            let p = self.expand1(w);
                            let (r, code) = self.open(h, &p, AccessFlags::write_truncate(0o644))?;
                            if code != ResultCode::Success {
                                return Ok(Flow::Fail(format!("{p}: {code}")));
                            }
                            let state = ContentState::empty_file();
                            self.event(h, TraceEvent::Write { r, prior: None, state })?;
                            r
                        }
                        Port::Pipe(n) => match self.pipes.get_mut(n).and_then(|e| e.1.take()) {
                            Some(r) => r,
                            None => return Ok(Flow::Fail(format!("no write end for |{n}"))),
                        },
                        _ => return Ok(Flow::Fail("bad redirection".into())),
                    };
                    fds.insert(1, r);
                    done.push(r);
                }
                let command = Command {
                    exe,
                    argv,
                    env: Default::default(),
                    cwd: Ref::CWD,
                    root: Ref::ROOT,
                    initial_fds: fds,
                };
                let child = h.spawn(self.id, command)?;
                self.children.insert(id.clone(), child);
                for r in done {
                    self.event(h, TraceEvent::Close { r })?;
                }
            }
            Instr::Wait { id, var } => {
                let Some(&child) = self.children.get(id) else {
                    return Ok(Flow::Fail(format!("no child {id}")));
                };
                let Some(code) = h.exit_status(child) else { return Ok(Flow::Blocked) };
                self.event(h, TraceEvent::Wait { child, code })?;
                if let Some(v) = var {
                    self.vars.insert(v.clone(), code.to_string());
                }
            }
            Instr::Exit { code } => {
                let c = self.expand1(code);
                return match c.parse::<i32>() {
                    Ok(c) => Ok(Flow::Exit(c)),
                    Err(_) => Ok(Flow::Fail(format!("bad exit code {c:?}"))),
                };
            }
            Instr::IfContains { path, needle, body } => {
                let p = self.expand1(path);
                let needle = self.expand1(needle);
                let (r, code) = self.open(h, &p, AccessFlags::read())?;
                let mut hit = false;
                if code == ResultCode::Success {
                    if let Ok(b) = fs::read(h.real_path(self.id, &p)) {
                        self.observe_read(h, r, &p, &b)?;
                        hit = String::from_utf8_lossy(&b).contains(&needle);
                    }
                }
                if hit {
                    self.frames.push(Frame { body: body.clone(), pc: 0, each: None });
                }
            }
            Instr::IfEq { a, b, negate, body } => {
                if (self.expand1(a) == self.expand1(b)) != *negate {
                    self.frames.push(Frame { body: body.clone(), pc: 0, each: None });
                }
            }
            Instr::For { var, words, body } => {
                let items = self.expand_all(words);
                if let Some(first) = items.first() {
                    self.vars.insert(var.clone(), first.clone());
                    let each = Some((var.clone(), items, 0));
                    self.frames.push(Frame { body: body.clone(), pc: 0, each });
                }
            }
            Instr::Tmpfile { var, suffix } => {
                self.tmp_counter += 1;
                let suffix = suffix.as_ref().map(|s| self.expand1(s)).unwrap_or_default();
                let name = h.temp_name(self.id, self.tmp_counter, &suffix);
                self.vars.insert(var.clone(), name);
            }
            Instr::HashCopy { srcs, dst } => {
                let mut data = Vec::new();
                for p in self.expand_all(srcs) {
                    data.extend(take!(self.read_path(h, &p)));
                }
                let out = hashcopy_output(&data);
                let d = self.expand1(dst);
                return self.write_path(h, &d, &out, false);
            }
        }
        Ok(Flow::Next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn globbing() {
        assert!(glob_match("*.c", "a.c"));
        assert!(!glob_match("*.c", "a.h"));
        assert!(glob_match("a?c*", "abcdef"));
        assert!(glob_match("*", ""));
        assert!(!glob_match("?", ""));
    }

    #[test]
    fn parents() {
        assert_eq!(split_parent("a/b/c"), Some(("a/b".into(), "c".into())));
        assert_eq!(split_parent("c"), Some((".".into(), "c".into())));
        assert_eq!(split_parent("/c"), Some(("/".into(), "c".into())));
        assert_eq!(split_parent("a/.."), None);
    }

    #[test]
    fn substitution() {
        let mut p = Process::new(CmdRef(1), Command::new("s.bsh", &["x", "y z"]));
        p.vars.insert("f".into(), "main".into());
        assert_eq!(p.subst("obj/$f.o"), "obj/main.o");
        assert_eq!(p.subst("${f}x $1 $#"), "mainx x 2");
        assert_eq!(p.expand(&Word::lit("$@")), vec!["x".to_string(), "y z".to_string()]);
        assert_eq!(p.expand(&Word::lit("$2")), vec!["y".to_string(), "z".to_string()]);
        assert_eq!(p.subst("a$"), "a$");
    }
}
