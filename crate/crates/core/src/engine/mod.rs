//! The build loop: evaluate, plan, re-execute, repeat.

mod index;
mod pass;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, Write};
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use index::{is_temp, template, OldCmd, Template, TraceIndex};

use crate::cache::{Cache, CacheError};
use crate::evaluator::EvalError;
use crate::fsmodel::{Env, FsError};
use crate::planner::{plan, RunSet};
use crate::traceir::{
    read_trace, write_trace, CmdRef, Command, ContentState, Digest, Record, Ref, SpecialKind,
    Statement, TraceError,
};
use crate::tracer::TracerError;
use pass::{Pass, PassConfig};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Tracer(#[from] TracerError),
    #[error("deadlock: every running command is blocked")]
    Deadlock,
    #[error("build did not settle after {0} phases")]
    NoConvergence(usize),
    #[error("`{0}` keeps changing the exit status of its children")]
    Backtrack(String),
    #[error("another build holds {0}")]
    Locked(PathBuf),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Project directory; commands see it as `/`.
    pub root: PathBuf,
    pub state_dir: PathBuf,
    pub build_file: String,
    pub fresh: bool,
    pub dry_run: bool,
    pub show: bool,
    /// Seed for temporary file names; defaults to the clock.
    pub nonce: Option<u64>,
    pub max_phases: usize,
    pub temp_roots: Vec<String>,
}

impl BuildOptions {
    pub fn new(root: impl Into<PathBuf>) -> BuildOptions {
        let root = root.into();
        BuildOptions {
            state_dir: root.join(".tbld"),
            root,
            build_file: "Buildfile".into(),
            fresh: false,
            dry_run: false,
            show: false,
            nonce: None,
            max_phases: 64,
            temp_roots: default_temp_roots(),
        }
    }

    pub fn trace_path(&self) -> PathBuf {
        self.state_dir.join("trace.bin")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.state_dir.join("cache")
    }
}

/// `/tmp`, `$TMPDIR` and the sandbox's own `tmp/`.
pub fn default_temp_roots() -> Vec<String> {
    let mut v = vec!["tmp".to_string(), "/tmp".to_string()];
    if let Ok(t) = std::env::var("TMPDIR") {
        if !t.is_empty() && !v.contains(&t) {
            v.push(t);
        }
    }
    v
}

#[derive(Debug, Clone, Default)]
pub struct PhaseInfo {
    pub run: Vec<String>,
    pub traced: Vec<String>,
    pub skipped: Vec<String>,
    /// Every pipe with a reader in the run set has all its users there too.
    pub pipes_closed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct BuildStats {
    pub phases: usize,
    pub commands_traced: usize,
    pub commands_skipped: usize,
    pub commands_backtracked: usize,
    pub versions_committed: u64,
    pub cache_hits: u64,
    pub cache_misses: usize,
    pub traced: Vec<String>,
    pub skipped: Vec<String>,
    /// Commands the first phase decided to run, with reasons.
    pub would_run: Vec<(String, Vec<String>)>,
    pub phase_log: Vec<PhaseInfo>,
    pub root_exit: Option<i32>,
    pub trace_records: u64,
    pub gc_removed: usize,
}

impl BuildStats {
    pub fn succeeded(&self) -> bool {
        self.root_exit == Some(0)
    }
}

/// Records for a build that has never run.
pub fn seed_trace(build_file: &str) -> Vec<Record> {
    let t = CmdRef::TOOL;
    let mut v = vec![
        Record::pre(t, Statement::SpecialRef { which: SpecialKind::Root, out: Ref::ROOT }),
        Record::pre(t, Statement::SpecialRef { which: SpecialKind::Root, out: Ref::CWD }),
        Record::pre(t, Statement::SpecialRef { which: SpecialKind::Stdin, out: Ref::STDIN }),
        Record::pre(t, Statement::SpecialRef { which: SpecialKind::Stdout, out: Ref::STDOUT }),
        Record::pre(t, Statement::SpecialRef { which: SpecialKind::Stderr, out: Ref::STDERR }),
    ];
    let command = Command::new(build_file, &[]);
    v.push(Record::pre(t, Statement::Launch { child: CmdRef(1), command }));
    v.push(Record::pre(t, Statement::Join { child: CmdRef(1) }));
    v
}

/// Holds an exclusive lock on the state directory while alive.
pub struct StateLock {
    _file: File,
}

impl StateLock {
    pub fn acquire(state_dir: &Path) -> Result<StateLock, EngineError> {
        fs::create_dir_all(state_dir)?;
        let path = state_dir.join("lock");
        let file = File::create(&path)?;
        // SAFETY: flock on a descriptor we own.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            return Err(EngineError::Locked(path));
        }
        Ok(StateLock { _file: file })
    }
}

fn now_ns() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as i64).unwrap_or(0)
}

/// Clears mtimes recent enough that a later write could share them, so
/// the next build compares those files by content.
pub fn smudge_mtimes(trace: &mut [Record], now_ns: i64) {
    const WINDOW: i64 = 2_000_000_000;
    for r in trace.iter_mut() {
        if let Statement::MatchContent { state, .. } | Statement::UpdateContent { state, .. } = &mut r.stmt {
            if let ContentState::File { mtime_ns, .. } = state {
                if *mtime_ns >= now_ns - WINDOW {
                    *mtime_ns = 0;
                }
            }
        }
    }
}

/// Cache keys the trace still needs.
pub fn live_keys(trace: &[Record]) -> HashSet<Digest> {
    let mut out = HashSet::new();
    for r in trace {
        if let Statement::MatchContent { state, .. } | Statement::UpdateContent { state, .. } = &r.stmt {
            if let ContentState::File { hash, cached: true, .. } = state {
                out.insert(*hash);
            }
        }
    }
    out
}

fn hidden_name(root: &Path, state_dir: &Path) -> Option<String> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let parent = canon(state_dir.parent()?);
    if parent == canon(root) {
        state_dir.file_name().map(|n| n.to_string_lossy().into_owned())
    } else {
        None
    }
}

fn names(cmds: &[crate::evaluator::CmdState], set: &BTreeSet<CmdRef>) -> Vec<String> {
    set.iter()
        .filter_map(|c| cmds.get(c.0 as usize))
        .filter_map(|s| s.command.as_ref().map(Command::short_name))
        .collect()
}

/// Runs a build. Command output to standard output goes to `out`.
pub fn do_build(opts: &BuildOptions, out: &mut dyn Write) -> Result<BuildStats, EngineError> {
    let _lock = StateLock::acquire(&opts.state_dir)?;
    let cache = Cache::new(opts.cache_dir());
    let mut env = Env::new(&opts.root, cache.clone(), hidden_name(&opts.root, &opts.state_dir));
    if opts.fresh && !opts.dry_run {
        match fs::remove_file(opts.trace_path()) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
    }
    let mut trace = if opts.fresh { Vec::new() } else { read_trace(&opts.trace_path())? };
    if trace.is_empty() {
        trace = seed_trace(&opts.build_file);
    }
    let nonce = opts.nonce.unwrap_or_else(|| now_ns() as u64);
    let mut report = BuildStats::default();
    let mut run: BTreeSet<CmdRef> = BTreeSet::new();
    let mut guard: HashMap<String, usize> = HashMap::new();
    let mut last_cmds;

    loop {
        report.phases += 1;
        if report.phases > opts.max_phases {
            return Err(EngineError::NoConvergence(opts.max_phases));
        }
        env.sync();
        let idx = TraceIndex::build(&trace, &opts.temp_roots);
        let limit = idx.command_count.max(1);
        let cfg = PassConfig {
            nonce,
            phase: report.phases,
            temp_roots: &opts.temp_roots,
            show: opts.show,
        };
        let res = Pass::new(&mut env, &trace, &idx, &run, false, cfg, out).run()?;
        for name in &res.exit_changes {
            let n = guard.entry(name.clone()).or_default();
            *n += 1;
            report.commands_backtracked += 1;
            if *n > limit {
                return Err(EngineError::Backtrack(name.clone()));
            }
        }
        let o = res.output;
        let planned = plan(&o.deps, &RunSet::from_changed(o.marked.iter().copied()));
        let pipes_closed = o.deps.pipes.values().all(|u| {
            !u.readers.iter().any(|c| planned.contains(*c))
                || u.readers.iter().chain(u.writers.iter()).all(|c| planned.contains(*c))
        });
        if report.phases == 1 {
            report.would_run = planned
                .commands
                .iter()
                .filter_map(|c| {
                    let name = o.commands.get(c.0 as usize)?.command.as_ref()?.short_name();
                    let mut why: Vec<String> = o.reasons.get(c).cloned().unwrap_or_default();
                    if let Some(r) = planned.reasons.get(c) {
                        why.push(r.to_string());
                    }
                    Some((name, why))
                })
                .collect();
        }
        report.phase_log.push(PhaseInfo {
            run: names(&o.commands, &planned.commands),
            traced: res.traced.clone(),
            skipped: res.skipped.clone(),
            pipes_closed,
        });
        report.commands_traced += res.traced.len();
        report.commands_skipped += res.skipped.len();
        report.traced.extend(res.traced);
        report.skipped.extend(res.skipped);
        report.cache_misses += res.cache_misses;
        trace = o.trace;
        last_cmds = o.commands;
        run = planned.commands;
        if opts.dry_run {
            return Ok(report);
        }
        if run.is_empty() {
            break;
        }
    }

    env.commit_all()?;
    if report.phases > 1 {
        env.sync();
        let idx = TraceIndex::build(&trace, &opts.temp_roots);
        let empty = BTreeSet::new();
        let cfg = PassConfig { nonce, phase: 0, temp_roots: &opts.temp_roots, show: false };
        let res = Pass::new(&mut env, &trace, &idx, &empty, true, cfg, out).run()?;
        trace = res.output.trace;
        last_cmds = res.output.commands;
    }
    report.root_exit = last_cmds.get(1).and_then(|c| c.exit);
    report.versions_committed = env.stats.writes;
    report.cache_hits = env.stats.restored_from_cache;
    smudge_mtimes(&mut trace, now_ns());
    report.trace_records = write_trace(&opts.trace_path(), trace.iter())?;
    report.gc_removed = cache.gc(&live_keys(&trace))?;
    Ok(report)
}

/// Names of the commands recorded in a trace, by id.
pub fn command_names(trace: &[Record]) -> BTreeMap<CmdRef, String> {
    let mut out = BTreeMap::new();
    for r in trace {
        if let Statement::Launch { child, command } = &r.stmt {
            out.insert(*child, command.short_name());
        }
    }
    out
}
