//! Statement evaluation against the filesystem model.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::fsmodel::{ArtifactId, Env, FsError, StateId};
use crate::traceir::{
    ArtifactKind, CmdRef, Command, ContentState, Phase, Record, Ref, RefComparison, RefRole,
    ResultCode, Statement,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Fs(#[from] FsError),
}

/// Statements from a command that is being re-executed commit their
/// effects; emulated statements only touch the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Emulated,
    Traced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binding {
    pub artifact: Option<ArtifactId>,
    pub code: ResultCode,
    pub role: RefRole,
    pub closed: bool,
}

#[derive(Debug, Clone)]
pub struct CmdState {
    pub parent: Option<CmdRef>,
    pub command: Option<Command>,
    pub exit: Option<i32>,
    pub traced: bool,
    refs: HashMap<Ref, Binding>,
}

impl CmdState {
    fn new(parent: Option<CmdRef>) -> CmdState {
        CmdState { parent, command: None, exit: None, traced: false, refs: HashMap::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub producer: CmdRef,
    pub consumer: CmdRef,
    pub state: StateId,
    pub cached: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipeUse {
    pub readers: BTreeSet<CmdRef>,
    pub writers: BTreeSet<CmdRef>,
}

/// Producer to consumer command graph for one pass.
#[derive(Debug, Clone, Default)]
pub struct DepGraph {
    pub edges: BTreeSet<Edge>,
    pub inputs: BTreeMap<CmdRef, BTreeSet<StateId>>,
    pub outputs: BTreeMap<CmdRef, BTreeSet<StateId>>,
    pub cached: BTreeMap<StateId, bool>,
    pub persists: BTreeSet<StateId>,
    pub pipes: BTreeMap<ArtifactId, PipeUse>,
}

impl DepGraph {
    pub fn record_dependency(&mut self, producer: CmdRef, consumer: CmdRef, state: StateId, cached: bool) {
        if producer == consumer {
            return;
        }
        self.edges.insert(Edge { producer, consumer, state, cached });
    }

    pub fn add_input(&mut self, c: CmdRef, s: StateId, cached: bool) {
        self.inputs.entry(c).or_default().insert(s);
        self.cached.entry(s).or_insert(cached);
    }

    pub fn add_output(&mut self, c: CmdRef, s: StateId, cached: bool) {
        self.outputs.entry(c).or_default().insert(s);
        self.cached.insert(s, cached);
    }

    pub fn is_cached(&self, s: &StateId) -> bool {
        self.cached.get(s).copied().unwrap_or(true)
    }
}

/// Result of one pass over a trace.
#[derive(Debug, Clone, Default)]
pub struct PassOutput {
    pub trace: Vec<Record>,
    pub deps: DepGraph,
    pub marked: BTreeSet<CmdRef>,
    pub reasons: BTreeMap<CmdRef, Vec<String>>,
    pub commands: Vec<CmdState>,
}

#[derive(Debug, Clone)]
pub struct Evaluator {
    pub cmds: Vec<CmdState>,
    pub deps: DepGraph,
    pub out: Vec<Record>,
    pub r_pre: BTreeSet<CmdRef>,
    pub r_post: BTreeSet<CmdRef>,
    pub has_post: BTreeSet<CmdRef>,
    /// Marked regardless of post-build checks.
    pub forced: BTreeSet<CmdRef>,
    pub reasons: BTreeMap<CmdRef, Vec<String>>,
    pub exit_changes: Vec<CmdRef>,
    post: bool,
}

impl Evaluator {
    /// `post` selects the post-build pass, which records end-of-build
    /// observations next to every check.
    pub fn new(post: bool) -> Evaluator {
        Evaluator {
            cmds: vec![CmdState::new(None)],
            deps: DepGraph::default(),
            out: Vec::new(),
            r_pre: BTreeSet::new(),
            r_post: BTreeSet::new(),
            has_post: BTreeSet::new(),
            forced: BTreeSet::new(),
            reasons: BTreeMap::new(),
            exit_changes: Vec::new(),
            post,
        }
    }

    pub fn is_post_pass(&self) -> bool {
        self.post
    }

    /// Allocates the next dense command id.
    pub fn alloc_cmd(&mut self, parent: CmdRef) -> CmdRef {
        self.cmds.push(CmdState::new(Some(parent)));
        CmdRef(self.cmds.len() as u32 - 1)
    }

    pub fn cmd(&self, c: CmdRef) -> &CmdState {
        &self.cmds[c.0 as usize]
    }

    pub fn set_traced(&mut self, c: CmdRef) {
        self.cmds[c.0 as usize].traced = true;
    }

    pub fn exit_code(&self, c: CmdRef) -> Option<i32> {
        self.cmds.get(c.0 as usize).and_then(|s| s.exit)
    }

    pub fn binding(&self, c: CmdRef, r: Ref) -> Option<&Binding> {
        self.cmds.get(c.0 as usize)?.refs.get(&r)
    }

    /// Open refs held by a command.
    pub fn open_refs(&self, c: CmdRef) -> impl Iterator<Item = (&Ref, &Binding)> {
        self.cmds[c.0 as usize].refs.iter().filter(|(_, b)| !b.closed)
    }

    pub fn bind(&mut self, c: CmdRef, r: Ref, b: Binding) {
        self.cmds[c.0 as usize].refs.insert(r, b);
    }

    pub fn mark(&mut self, c: CmdRef, reason: impl Into<String>) {
        self.forced.insert(c);
        self.reasons.entry(c).or_default().push(reason.into());
    }

    fn change(&mut self, c: CmdRef, phase: Phase, why: String) {
        match phase {
            Phase::Pre => {
                self.r_pre.insert(c);
            }
            Phase::Post => {
                self.r_post.insert(c);
            }
        }
        let tag = if phase == Phase::Post { "post-build " } else { "" };
        self.reasons.entry(c).or_default().push(format!("{tag}{why}"));
    }

    /// Number of changes observed so far, used to detect changes in a span.
    pub fn change_count(&self) -> usize {
        self.r_pre.len() + self.r_post.len() + self.forced.len() + self.exit_changes.len()
    }

    fn get(&self, c: CmdRef, r: Ref) -> Result<Binding, EvalError> {
        match self.binding(c, r) {
            Some(b) if !b.closed => Ok(*b),
            Some(_) => Err(EvalError::Integrity(format!("{c} used {r} after DoneWithRef"))),
            None => Err(EvalError::Integrity(format!("{c} used unknown ref {r}"))),
        }
    }

    fn bind_new(&mut self, c: CmdRef, r: Ref, artifact: Option<ArtifactId>, code: ResultCode, role: RefRole) {
        self.bind(c, r, Binding { artifact, code, role, closed: false });
    }

    /// Evaluates one record and appends it (and any post-build observation)
    /// to the output trace.
    pub fn eval(&mut self, env: &mut Env, rec: &Record, mode: Mode) -> Result<(), EvalError> {
        let owner = rec.owner;
        if owner.0 as usize >= self.cmds.len() {
            return Err(EvalError::Integrity(format!("statement owned by unlaunched {owner}")));
        }
        let committed = mode == Mode::Traced;
        let flag = mode == Mode::Emulated;
        let phase = rec.phase;
        if phase == Phase::Post {
            self.has_post.insert(owner);
            if !rec.stmt.is_check() {
                return Err(EvalError::Integrity("post-build record is not a check".into()));
            }
        }
        let mut observed: Option<Statement> = None;

        match &rec.stmt {
            Statement::PathRef { base, path, flags, out } => {
                let b = self.get(owner, *base)?;
                let res = match b.artifact {
                    Some(dir) => env.resolve(dir, path, flags, owner, committed),
                    None => crate::fsmodel::Resolution { code: ResultCode::NoEntry, target: None },
                };
                self.bind_new(owner, *out, res.target, res.code, RefRole::Path);
            }
            Statement::FileRef { out } => {
                let a = env.new_file(0o644, owner, committed);
                self.bind_new(owner, *out, Some(a), ResultCode::Success, RefRole::AnonymousFile);
            }
            Statement::DirRef { out } => {
                let a = env.new_dir(owner, committed);
                self.bind_new(owner, *out, Some(a), ResultCode::Success, RefRole::AnonymousDir);
            }
            Statement::SymlinkRef { dest, out } => {
                let a = env.new_symlink(dest, owner, committed);
                self.bind_new(owner, *out, Some(a), ResultCode::Success, RefRole::Symlink);
            }
            Statement::PipeRef { read, write } => {
                let a = env.new_pipe(owner);
                self.bind_new(owner, *read, Some(a), ResultCode::Success, RefRole::PipeRead);
                self.bind_new(owner, *write, Some(a), ResultCode::Success, RefRole::PipeWrite);
            }
            Statement::SpecialRef { which, out } => {
                let a = env.special(*which);
                self.bind_new(owner, *out, Some(a), ResultCode::Success, RefRole::Special);
            }
            Statement::CompareRefs { a, b, cmp } => {
                let x = self.get(owner, *a)?.artifact;
                let y = self.get(owner, *b)?.artifact;
                let same = x.is_some() && x == y;
                let actual =
                    if same { RefComparison::SameInstance } else { RefComparison::DifferentInstance };
                if flag && actual != *cmp {
                    self.change(owner, phase, format!("{a} and {b} changed identity"));
                }
                observed = Some(Statement::CompareRefs { a: *a, b: *b, cmp: actual });
            }
            Statement::ExpectResult { r, expected } => {
                let b = self.get(owner, *r)?;
                if flag && b.code != *expected {
                    self.change(owner, phase, format!("{r}: expected {expected}, got {}", b.code));
                }
                observed = Some(Statement::ExpectResult { r: *r, expected: b.code });
            }
            Statement::MatchMetadata { r, state } => {
                let b = self.get(owner, *r)?;
                match b.artifact {
                    Some(a) => {
                        if flag && !env.match_metadata(a, state) {
                            self.change(owner, phase, format!("{r}: metadata changed"));
                        }
                        observed = Some(Statement::MatchMetadata { r: *r, state: env.metadata(a) });
                    }
                    None => {
                        if flag {
                            self.change(owner, phase, format!("{r}: unresolved"));
                        }
                    }
                }
            }
            Statement::MatchContent { r, state } => {
                let b = self.get(owner, *r)?;
                match b.artifact {
                    Some(a) => {
                        self.record_read(env, owner, a);
                        if env.kind(a) == ArtifactKind::Pipe
                            && mode == Mode::Traced
                            && env.pipe_had_emulated_write(a)
                        {
                            self.mark(owner, format!("{r}: read a pipe fed by an emulated writer"));
                        }
                        if flag && !env.match_content(a, state)? {
                            self.change(owner, phase, format!("{r}: content changed"));
                        }
                        if self.post && phase == Phase::Pre {
                            observed = Some(Statement::MatchContent { r: *r, state: env.content(a)? });
                        }
                    }
                    None => {
                        if flag {
                            self.change(owner, phase, format!("{r}: unresolved"));
                        }
                    }
                }
            }
            Statement::ExitResult { child, expected } => {
                let actual = self.exit_code(*child);
                if flag && actual != Some(*expected) {
                    self.change(owner, phase, format!("child {child} exit changed"));
                    if phase == Phase::Pre {
                        self.exit_changes.push(owner);
                    }
                }
                if let Some(code) = actual {
                    observed = Some(Statement::ExitResult { child: *child, expected: code });
                }
            }
            Statement::UpdateMetadata { r, state } => {
                let b = self.get(owner, *r)?;
                match b.artifact {
                    Some(a) => env.update_metadata(a, *state, owner, committed),
                    None if flag => self.change(owner, phase, format!("{r}: update of unresolved ref")),
                    None => {}
                }
            }
            Statement::UpdateContent { r, state } => {
                let b = self.get(owner, *r)?;
                match b.artifact {
                    Some(a) => self.apply_update(env, owner, a, state.clone(), committed),
                    None if flag => self.change(owner, phase, format!("{r}: update of unresolved ref")),
                    None => {}
                }
            }
            Statement::AddEntry { dir, name, target } => {
                let d = self.get(owner, *dir)?.artifact;
                let t = self.get(owner, *target)?.artifact;
                let changed = match (d, t) {
                    (Some(d), Some(t)) => {
                        let c = env.add_entry(d, name, t, owner, committed)?;
                        if !c {
                            self.record_write(env, owner, d);
                        }
                        c
                    }
                    _ => true,
                };
                if flag && changed {
                    self.change(owner, phase, format!("add entry {name:?} did not apply"));
                }
            }
            Statement::RemoveEntry { dir, name, target } => {
                let d = self.get(owner, *dir)?.artifact;
                let t = self.get(owner, *target)?.artifact;
                let changed = match (d, t) {
                    (Some(d), Some(t)) => {
                        let c = env.remove_entry(d, name, t, owner, committed)?;
                        if !c {
                            self.record_write(env, owner, d);
                        }
                        c
                    }
                    _ => true,
                };
                if flag && changed {
                    self.change(owner, phase, format!("remove entry {name:?} did not apply"));
                }
            }
            Statement::Launch { child, command } => {
                if child.0 as usize >= self.cmds.len() {
                    return Err(EvalError::Integrity(format!("launch of unallocated {child}")));
                }
                let mut refs = HashMap::new();
                let mut inherit = |to: Ref, from: Ref| -> Result<(), EvalError> {
                    let b = self.get(owner, from)?;
                    refs.insert(to, Binding { closed: false, ..b });
                    Ok(())
                };
                inherit(Ref::ROOT, command.root)?;
                inherit(Ref::CWD, command.cwd)?;
                for (fd, r) in &command.initial_fds {
                    inherit(Ref::for_fd(*fd), *r)?;
                }
                let st = &mut self.cmds[child.0 as usize];
                st.refs = refs;
                st.command = Some(command.clone());
                st.parent = Some(owner);
            }
            Statement::Join { child } => {
                if child.0 as usize >= self.cmds.len() {
                    return Err(EvalError::Integrity(format!("join on unlaunched {child}")));
                }
            }
            Statement::UsingRef { r } => {
                self.get(owner, *r)?;
            }
            Statement::DoneWithRef { r } => {
                self.get(owner, *r)?;
                if let Some(b) = self.cmds[owner.0 as usize].refs.get_mut(r) {
                    b.closed = true;
                }
            }
            Statement::Exit { code } => {
                self.cmds[owner.0 as usize].exit = Some(*code);
            }
        }

        self.out.push(rec.clone());
        if self.post && phase == Phase::Pre && rec.stmt.is_check() {
            if let Some(stmt) = observed {
                self.out.push(Record::post(owner, stmt));
            }
        }
        Ok(())
    }

    fn apply_update(&mut self, env: &mut Env, owner: CmdRef, a: ArtifactId, state: ContentState, committed: bool) {
        env.update_content(a, state, owner, committed);
        if env.kind(a) == ArtifactKind::Pipe {
            self.deps.pipes.entry(a).or_default().writers.insert(owner);
        }
        self.record_write(env, owner, a);
    }

    fn record_write(&mut self, env: &Env, owner: CmdRef, a: ArtifactId) {
        if let Some((sid, _, cached)) = env.current_version(a) {
            self.deps.add_output(owner, sid, cached);
        }
    }

    fn record_read(&mut self, env: &Env, owner: CmdRef, a: ArtifactId) {
        if env.kind(a) == ArtifactKind::Pipe {
            self.deps.pipes.entry(a).or_default().readers.insert(owner);
            // A pipe read depends on every write to the pipe, including
            // writes that happen after this statement.
            return;
        }
        if let Some((sid, producer, cached)) = env.current_version(a) {
            self.deps.add_input(owner, sid, cached);
            if let Some(p) = producer {
                self.deps.record_dependency(p, owner, sid, cached);
            }
        }
    }

    /// Closes the pass: computes persistence, pipe edges and the run set
    /// `R' = forced ∪ {c ∈ R_pre : c has no post-build checks or c ∈ R_post}`.
    pub fn finish(mut self, env: &Env) -> PassOutput {
        let pipes: Vec<(ArtifactId, PipeUse)> =
            self.deps.pipes.iter().map(|(a, u)| (*a, u.clone())).collect();
        for (a, usage) in &pipes {
            let writes: Vec<StateId> = self
                .deps
                .outputs
                .values()
                .flat_map(|s| s.iter().copied())
                .filter(|s| s.artifact == *a)
                .collect();
            for reader in &usage.readers {
                for s in &writes {
                    self.deps.add_input(*reader, *s, false);
                    for w in &usage.writers {
                        if self.deps.outputs.get(w).is_some_and(|o| o.contains(s)) {
                            self.deps.record_dependency(*w, *reader, *s, false);
                        }
                    }
                }
            }
        }
        let outputs: Vec<StateId> =
            self.deps.outputs.values().flat_map(|s| s.iter().copied()).collect();
        for s in outputs {
            let kind = env.kind(s.artifact);
            if matches!(kind, ArtifactKind::File | ArtifactKind::Symlink | ArtifactKind::Dir)
                && env.is_final_version(s)
                && env.is_linked(s.artifact)
            {
                self.deps.persists.insert(s);
            }
        }
        let mut marked = self.forced.clone();
        for c in &self.r_pre {
            if !self.has_post.contains(c) || self.r_post.contains(c) {
                marked.insert(*c);
            }
        }
        PassOutput {
            trace: self.out,
            deps: self.deps,
            marked,
            reasons: self.reasons,
            commands: self.cmds,
        }
    }
}
