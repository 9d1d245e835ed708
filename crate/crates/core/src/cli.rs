//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::cache::Cache;
use crate::engine::{do_build, live_keys, BuildOptions, BuildStats, EngineError, StateLock};
use crate::traceir::{open_trace, read_trace, Dumper, TraceError, FORMAT_VERSION};

#[derive(Debug, Parser)]
#[command(name = "tbld", version, about = "Forward build tool for BuildScript projects")]
pub struct Cli {
    /// Project directory (default: current directory).
    #[arg(short = 'C', long = "dir", global = true)]
    pub dir: Option<PathBuf>,
    /// State directory (default: .tbld, or $TBLD_DIR).
    #[arg(long = "state-dir", global = true)]
    pub state_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Option<Cmd>,
    #[command(flatten)]
    pub build: BuildArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BuildArgs {
    /// Build script to run.
    #[arg(short = 'f', long = "file", default_value = "Buildfile")]
    pub file: String,
    /// Discard the previous trace and build from scratch.
    #[arg(long)]
    pub fresh: bool,
    /// Print what would run, change nothing.
    #[arg(long = "dry-run")]
    pub dry_run: bool,
    /// Print each command as it is launched.
    #[arg(long)]
    pub show: bool,
    #[arg(long)]
    pub stats: bool,
    /// Print why commands were chosen to run.
    #[arg(long)]
    pub explain: bool,
    /// Fixed seed for temporary file names.
    #[arg(long, hide = true)]
    pub nonce: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a build (the default).
    Build(BuildArgs),
    /// Inspect the stored trace.
    Trace {
        #[command(subcommand)]
        what: TraceCmd,
    },
    /// Drop cache entries the trace no longer uses.
    Gc,
}

#[derive(Debug, Subcommand)]
pub enum TraceCmd {
    /// Print every statement.
    Dump,
}

fn state_dir(root: &Path, flag: Option<PathBuf>) -> PathBuf {
    let dir = flag
        .or_else(|| std::env::var_os("TBLD_DIR").filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(".tbld"));
    if dir.is_absolute() {
        dir
    } else {
        root.join(dir)
    }
}

/// Runs the tool; returns the process exit code.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    let root = match cli.dir.clone().map(Ok).unwrap_or_else(std::env::current_dir) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "tbld: {e}");
            return 2;
        }
    };
    let state = state_dir(&root, cli.state_dir.clone());
    let result = match cli.cmd {
        None => build(&root, state, &cli.build, out, err),
        Some(Cmd::Build(b)) => build(&root, state, &b, out, err),
        Some(Cmd::Trace { what: TraceCmd::Dump }) => dump(&state, out),
        Some(Cmd::Gc) => gc(&state, out),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "tbld: {e:#}");
        exit_code(&e)
    })
}

/// Unreadable traces and a busy state directory are usage errors; anything
/// else is a failed build.
fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<TraceError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<EngineError>() {
        Some(EngineError::Trace(_) | EngineError::Locked(_)) => 2,
        _ => 1,
    }
}

fn write_stats(s: &BuildStats, err: &mut dyn Write) {
    let _ = writeln!(err, "phases: {}", s.phases);
    let _ = writeln!(err, "commands_traced: {}", s.commands_traced);
    let _ = writeln!(err, "commands_skipped: {}", s.commands_skipped);
    let _ = writeln!(err, "commands_backtracked: {}", s.commands_backtracked);
    let _ = writeln!(err, "versions_committed: {}", s.versions_committed);
    let _ = writeln!(err, "cache_hits: {}", s.cache_hits);
    let _ = writeln!(err, "cache_misses: {}", s.cache_misses);
}

fn build(root: &Path, state: PathBuf, a: &BuildArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut opts = BuildOptions::new(root);
    opts.state_dir = state;
    opts.build_file = a.file.clone();
    opts.fresh = a.fresh;
    opts.dry_run = a.dry_run;
    opts.show = a.show;
    opts.nonce = a.nonce;
    let have_trace = !a.fresh && opts.trace_path().exists();
    if !have_trace && !root.join(&a.file).exists() {
        let _ = writeln!(err, "tbld: no build file {:?} and no previous build", a.file);
        return Ok(2);
    }
    let stats = do_build(&opts, out)?;
    if a.dry_run {
        for (name, why) in &stats.would_run {
            let _ = writeln!(out, "{name}");
            if a.explain {
                for w in why {
                    let _ = writeln!(out, "    {w}");
                }
            }
        }
        return Ok(0);
    }
    if a.explain {
        for (name, why) in &stats.would_run {
            let _ = writeln!(err, "{name}: {}", why.join("; "));
        }
    }
    if a.stats {
        write_stats(&stats, err);
    }
    let _ = writeln!(
        err,
        "tbld: {} commands run, {} skipped, {} phase(s)",
        stats.commands_traced, stats.commands_skipped, stats.phases
    );
    Ok(match stats.root_exit {
        Some(0) => 0,
        Some(c) => {
            let _ = writeln!(err, "tbld: build script exited with status {c}");
            1
        }
        None => {
            let _ = writeln!(err, "tbld: build script did not finish");
            1
        }
    })
}

fn dump(state: &Path, out: &mut dyn Write) -> Result<i32> {
    let reader = open_trace(&state.join("trace.bin"))?;
    writeln!(out, "# tbld trace format {FORMAT_VERSION}")?;
    let mut d = Dumper::new();
    for rec in reader {
        writeln!(out, "{}", d.line(&rec?))?;
    }
    Ok(0)
}

fn gc(state: &Path, out: &mut dyn Write) -> Result<i32> {
    let _lock = StateLock::acquire(state)?;
    let trace = read_trace(&state.join("trace.bin"))?;
    let n = Cache::new(state.join("cache")).gc(&live_keys(&trace)).context("collecting cache")?;
    writeln!(out, "removed {n}")?;
    Ok(0)
}
