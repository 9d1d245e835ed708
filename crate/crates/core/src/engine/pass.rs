//! One evaluation pass over the previous trace.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::PathBuf;

use super::index::{template, TraceIndex};
use super::EngineError;
use crate::evaluator::{Evaluator, Mode, PassOutput};
use crate::fsmodel::{ArtifactId, Env};
use crate::tracer::{translate, FdTarget, Host, Process, Step, TraceEvent, TracerError};
use crate::traceir::{
    AccessFlags, ArtifactKind, CmdRef, Command, ContentState, Phase, Record, Ref, Statement,
};

pub(crate) struct PassConfig<'a> {
    pub nonce: u64,
    pub phase: usize,
    pub temp_roots: &'a [String],
    pub show: bool,
}

pub(crate) struct PassResult {
    pub output: PassOutput,
    pub traced: Vec<String>,
    pub skipped: Vec<String>,
    pub cache_misses: usize,
    /// Commands whose children's exit codes changed.
    pub exit_changes: Vec<String>,
}

pub(crate) struct Pass<'a> {
    env: &'a mut Env,
    ev: Evaluator,
    old: &'a [Record],
    idx: &'a TraceIndex,
    run: &'a BTreeSet<CmdRef>,
    replaced: BTreeSet<CmdRef>,
    map: HashMap<CmdRef, CmdRef>,
    active: HashSet<CmdRef>,
    consumed: HashSet<CmdRef>,
    procs: Vec<Option<Process>>,
    buffers: HashMap<ArtifactId, Vec<u8>>,
    cfg: PassConfig<'a>,
    out: &'a mut dyn Write,
    traced: Vec<String>,
    skipped: Vec<String>,
    cache_misses: usize,
}

impl<'a> Pass<'a> {
    pub fn new(
        env: &'a mut Env,
        old: &'a [Record],
        idx: &'a TraceIndex,
        run: &'a BTreeSet<CmdRef>,
        post: bool,
        cfg: PassConfig<'a>,
        out: &'a mut dyn Write,
    ) -> Pass<'a> {
        let mut map = HashMap::new();
        map.insert(CmdRef::TOOL, CmdRef::TOOL);
        Pass {
            env,
            ev: Evaluator::new(post),
            old,
            idx,
            run,
            replaced: idx.replaced(run),
            map,
            active: [CmdRef::TOOL].into(),
            consumed: HashSet::new(),
            procs: Vec::new(),
            buffers: HashMap::new(),
            cfg,
            out,
            traced: Vec::new(),
            skipped: Vec::new(),
            cache_misses: 0,
        }
    }

    fn new_id(&self, old: CmdRef) -> Result<CmdRef, EngineError> {
        self.map
            .get(&old)
            .copied()
            .ok_or_else(|| EngineError::Integrity(format!("reference to unlaunched {old}")))
    }

    pub fn run(mut self) -> Result<PassResult, EngineError> {
        let old = self.old;
        for rec in old {
            if !self.active.contains(&rec.owner) {
                continue;
            }
            if rec.phase == Phase::Post && self.ev.is_post_pass() {
                continue;
            }
            let owner = self.new_id(rec.owner)?;
            match &rec.stmt {
                Statement::Launch { child, command } => {
                    let new = self.ev.alloc_cmd(owner);
                    self.map.insert(*child, new);
                    let stmt = Statement::Launch { child: new, command: command.clone() };
                    self.ev.eval(self.env, &Record { owner, phase: rec.phase, stmt }, Mode::Emulated)?;
                    let ran = self.idx.get(*child).is_some_and(|c| c.exited);
                    if self.run.contains(child) {
                        self.start_traced(new, command.clone());
                    } else if !ran {
                        self.ev.mark(new, "has not run yet");
                    } else {
                        self.active.insert(*child);
                    }
                }
                Statement::Join { child } => {
                    let new = self.new_id(*child)?;
                    if self.ev.cmd(new).traced {
                        self.run_until(Some(new))?;
                    }
                    let stmt = Statement::Join { child: new };
                    self.ev.eval(self.env, &Record { owner, phase: rec.phase, stmt }, Mode::Emulated)?;
                }
                Statement::ExitResult { child, expected } => {
                    let stmt = Statement::ExitResult { child: self.new_id(*child)?, expected: *expected };
                    self.ev.eval(self.env, &Record { owner, phase: rec.phase, stmt }, Mode::Emulated)?;
                }
                stmt => {
                    let r = Record { owner, phase: rec.phase, stmt: stmt.clone() };
                    self.ev.eval(self.env, &r, Mode::Emulated)?;
                }
            }
        }
        self.run_until(None)?;
        let exit_changes = self
            .ev
            .exit_changes
            .iter()
            .map(|c| self.ev.cmd(*c).command.as_ref().map(|k| k.short_name()).unwrap_or_default())
            .collect();
        let output = self.ev.finish(self.env);
        Ok(PassResult {
            output,
            traced: self.traced,
            skipped: self.skipped,
            cache_misses: self.cache_misses,
            exit_changes,
        })
    }

    fn start_traced(&mut self, id: CmdRef, command: Command) {
        self.ev.set_traced(id);
        let name = command.short_name();
        if self.cfg.show {
            eprintln!("{name}");
        }
        self.traced.push(name);
        self.procs.push(Some(Process::new(id, command)));
    }

    /// Round-robin over traced processes until `target` (or every process) exits.
    fn run_until(&mut self, target: Option<CmdRef>) -> Result<(), EngineError> {
        loop {
            if let Some(t) = target {
                if self.ev.exit_code(t).is_some() {
                    return Ok(());
                }
            }
            let mut live = false;
            let mut progressed = false;
            let n = self.procs.len();
            for i in 0..n {
                let Some(mut p) = self.procs[i].take() else { continue };
                if p.exited().is_some() {
                    self.procs[i] = Some(p);
                    continue;
                }
                live = true;
                let st = p.step(self);
                self.procs[i] = Some(p);
                if st? != Step::Blocked {
                    progressed = true;
                }
            }
            if !live {
                return match target {
                    Some(t) if self.ev.exit_code(t).is_none() => {
                        Err(EngineError::Integrity(format!("{t} was joined but never exited")))
                    }
                    _ => Ok(()),
                };
            }
            if !progressed {
                return Err(EngineError::Deadlock);
            }
        }
    }

    fn is_live(&self, c: CmdRef) -> bool {
        self.procs.iter().flatten().any(|p| p.id == c && p.exited().is_none())
    }

    /// Replays a matching subtree from the previous trace in place of running
    /// the command. Returns false if nothing suitable was found.
    fn try_skip(&mut self, new: CmdRef, command: &Command) -> Result<bool, EngineError> {
        let (tmpl, temps) = template(command, self.cfg.temp_roots);
        let mut cands: Vec<CmdRef> = self
            .idx
            .cmds
            .iter()
            .filter(|(k, c)| {
                c.template == tmpl
                    && self.replaced.contains(k)
                    && !self.consumed.contains(k)
                    && !self.active.contains(k)
                    && !self.run.contains(k)
            })
            .map(|(k, _)| *k)
            .collect();
        cands.sort_by_key(|k| std::cmp::Reverse(self.idx.cmds[k].launch_idx));
        let cwd = self.ev.binding(new, Ref::CWD).and_then(|b| b.artifact).unwrap_or(self.env.root());
        'cands: for k in cands {
            if self.idx.subtree(k).iter().any(|c| self.run.contains(c)) {
                continue;
            }
            match self.idx.replayable(k, self.env.cache()) {
                Ok(()) => {}
                Err("uncached") => {
                    self.cache_misses += 1;
                    continue;
                }
                Err(_) => continue,
            }
            let info = &self.idx.cmds[&k];
            for (i, hash) in &info.required {
                let Some(path) = temps.get(*i) else { continue 'cands };
                let res = self.env.resolve(cwd, path, &AccessFlags::read(), new, true);
                let Some(a) = res.target else { continue 'cands };
                if self.env.kind(a) != ArtifactKind::File {
                    continue 'cands;
                }
                if self.env.content(a)?.file_hash() != Some(*hash) {
                    continue 'cands;
                }
            }
            let tmap: Vec<(String, String)> =
                info.temps.iter().cloned().zip(temps.iter().cloned()).collect();
            if self.echo(k, new, &tmap)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn echo(&mut self, k: CmdRef, new: CmdRef, tmap: &[(String, String)]) -> Result<bool, EngineError> {
        let snap_env = self.env.clone();
        let snap_ev = self.ev.clone();
        let snap_map = self.map.clone();
        let before = self.ev.change_count();
        self.map.insert(k, new);
        let subst = |s: &str| -> String {
            let mut s = s.to_string();
            for (o, n) in tmap {
                if o != n {
                    s = s.replace(o.as_str(), n.as_str());
                }
            }
            s
        };
        let mut ok = true;
        for i in self.idx.subtree_records(k) {
            let rec = &self.old[i];
            let owner = self.new_id(rec.owner)?;
            let stmt = match &rec.stmt {
                Statement::Launch { child, command } => {
                    let c = self.ev.alloc_cmd(owner);
                    self.map.insert(*child, c);
                    let mut command = command.clone();
                    command.exe = subst(&command.exe);
                    command.argv = command.argv.iter().map(|a| subst(a)).collect();
                    Statement::Launch { child: c, command }
                }
                Statement::Join { child } => Statement::Join { child: self.new_id(*child)? },
                Statement::ExitResult { child, expected } => {
                    Statement::ExitResult { child: self.new_id(*child)?, expected: *expected }
                }
                Statement::PathRef { base, path, flags, out } => {
                    Statement::PathRef { base: *base, path: subst(path), flags: *flags, out: *out }
                }
                s => s.clone(),
            };
            self.ev.eval(self.env, &Record::pre(owner, stmt), Mode::Emulated)?;
            if self.ev.change_count() != before {
                ok = false;
                break;
            }
        }
        if !ok {
            *self.env = snap_env;
            self.ev = snap_ev;
            self.map = snap_map;
            return Ok(false);
        }
        for c in self.idx.subtree(k) {
            self.consumed.insert(c);
            if let Some(info) = self.idx.get(c) {
                self.skipped.push(info.command.short_name());
            }
        }
        Ok(true)
    }

    fn artifact(&self, cmd: CmdRef, r: Ref) -> Option<ArtifactId> {
        self.ev.binding(cmd, r).filter(|b| !b.closed).and_then(|b| b.artifact)
    }
}

impl From<EngineError> for TracerError {
    fn from(e: EngineError) -> TracerError {
        match e {
            EngineError::Eval(e) => TracerError::Eval(e),
            EngineError::Fs(e) => TracerError::Fs(e),
            EngineError::Tracer(e) => e,
            other => TracerError::Host(other.to_string()),
        }
    }
}

impl Host for Pass<'_> {
    fn emit(&mut self, cmd: CmdRef, stmt: Statement) -> Result<(), TracerError> {
        self.ev.eval(self.env, &Record::pre(cmd, stmt), Mode::Traced)?;
        Ok(())
    }

    fn prepare(&mut self, cmd: CmdRef, path: &str, follow: bool) -> Result<(), TracerError> {
        let base = self.artifact(cmd, Ref::CWD).unwrap_or(self.env.root());
        self.env.prepare_path(base, path, follow)?;
        Ok(())
    }

    fn prepare_listing(&mut self, cmd: CmdRef, r: Ref) -> Result<(), TracerError> {
        if let Some(a) = self.artifact(cmd, r) {
            if self.env.kind(a) == ArtifactKind::Dir {
                self.env.commit_listing(a)?;
            }
        }
        Ok(())
    }

    fn real_path(&self, cmd: CmdRef, path: &str) -> PathBuf {
        if let Some(rel) = path.strip_prefix('/') {
            return self.env.root_dir().join(rel.trim_start_matches('/'));
        }
        let base = self
            .artifact(cmd, Ref::CWD)
            .and_then(|a| self.env.disk_path(a))
            .unwrap_or_else(|| self.env.root_dir().to_path_buf());
        base.join(path)
    }

    fn hidden(&self, dir: &str, name: &str) -> bool {
        let d = dir.trim_end_matches('/');
        matches!(d, "" | "." | "/") && self.env.is_hidden(self.env.root(), name)
    }

    fn fd_target(&mut self, cmd: CmdRef, r: Ref) -> Result<FdTarget, TracerError> {
        let Some(a) = self.artifact(cmd, r) else { return Ok(FdTarget::Unusable) };
        Ok(match self.env.kind(a) {
            ArtifactKind::File => {
                self.env.commit_artifact(a)?;
                match self.env.disk_path(a) {
                    Some(p) => FdTarget::File(p),
                    None => FdTarget::Unusable,
                }
            }
            ArtifactKind::Pipe => FdTarget::Pipe(a),
            ArtifactKind::Special => match self.env.special_kind(a) {
                Some(k) => FdTarget::Special(k),
                None => FdTarget::Unusable,
            },
            _ => FdTarget::Unusable,
        })
    }

    fn model_content(&mut self, cmd: CmdRef, r: Ref) -> Result<Option<ContentState>, TracerError> {
        match self.artifact(cmd, r) {
            Some(a) => Ok(Some(self.env.content(a)?)),
            None => Ok(None),
        }
    }

    fn pipe_blocked(&self, cmd: CmdRef, pipe: ArtifactId) -> bool {
        self.procs.iter().flatten().any(|p| {
            p.id != cmd
                && self.is_live(p.id)
                && self.ev.open_refs(p.id).any(|(_, b)| {
                    b.role == crate::traceir::RefRole::PipeWrite && b.artifact == Some(pipe)
                })
        })
    }

    fn pipe_take(&mut self, pipe: ArtifactId) -> Vec<u8> {
        self.buffers.remove(&pipe).unwrap_or_default()
    }

    fn pipe_put(&mut self, pipe: ArtifactId, data: &[u8]) {
        self.buffers.entry(pipe).or_default().extend_from_slice(data);
    }

    fn spawn(&mut self, parent: CmdRef, command: Command) -> Result<CmdRef, TracerError> {
        let new = self.ev.alloc_cmd(parent);
        for s in translate(TraceEvent::Spawn { child: new, command: command.clone() }) {
            self.ev.eval(self.env, &Record::pre(parent, s), Mode::Traced)?;
        }
        if !self.try_skip(new, &command)? {
            self.start_traced(new, command);
        }
        Ok(new)
    }

    fn exit_status(&self, child: CmdRef) -> Option<i32> {
        self.ev.exit_code(child)
    }

    fn store(&mut self, bytes: &[u8]) -> bool {
        self.env.cache().store(bytes).is_ok()
    }

    fn temp_name(&mut self, cmd: CmdRef, counter: u32, suffix: &str) -> String {
        let mut h = blake3::Hasher::new();
        h.update(&self.cfg.nonce.to_le_bytes());
        h.update(&(self.cfg.phase as u64).to_le_bytes());
        h.update(&cmd.0.to_le_bytes());
        if let Some(c) = &self.ev.cmd(cmd).command {
            for a in &c.argv {
                h.update(a.as_bytes());
                h.update(b"\0");
            }
        }
        h.update(&counter.to_le_bytes());
        let hex = h.finalize().to_hex();
        format!("tmp/{}{}", &hex[..16], suffix)
    }

    fn console(&mut self, _cmd: CmdRef, fd: u32, bytes: &[u8]) {
        if fd == 1 {
            let _ = self.out.write_all(bytes);
        } else {
            let _ = std::io::stderr().write_all(bytes);
        }
    }
}
