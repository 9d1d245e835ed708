//! Runs BuildScript commands for real and reports what they did.

mod interp;
pub mod script;
mod translate;

use std::path::PathBuf;

use thiserror::Error;

pub use interp::{Process, Step};
pub use script::{hashcopy_output, parse, Instr, ParseError, Port, Word};
pub use translate::{translate, TraceEvent};

use crate::evaluator::EvalError;
use crate::fsmodel::{ArtifactId, FsError};
use crate::traceir::{CmdRef, Command, ContentState, Ref, SpecialKind, Statement};

#[derive(Debug, Error)]
pub enum TracerError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("{0}")]
    Host(String),
}

/// Where a ref of a running command points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FdTarget {
    File(PathBuf),
    Pipe(ArtifactId),
    Special(SpecialKind),
    Unusable,
}

/// The build engine side of a traced command.
pub trait Host {
    /// Records a statement and applies it to the model as already committed.
    fn emit(&mut self, cmd: CmdRef, stmt: Statement) -> Result<(), TracerError>;
    /// Brings the disk up to date along `path` before a real operation.
    fn prepare(&mut self, cmd: CmdRef, path: &str, follow: bool) -> Result<(), TracerError>;
    /// Commits all pending entries of the directory bound to `r`.
    fn prepare_listing(&mut self, cmd: CmdRef, r: Ref) -> Result<(), TracerError>;
    fn real_path(&self, cmd: CmdRef, path: &str) -> PathBuf;
    /// True for names a listing of `path` must not show.
    fn hidden(&self, dir: &str, name: &str) -> bool;
    fn fd_target(&mut self, cmd: CmdRef, r: Ref) -> Result<FdTarget, TracerError>;
    fn model_content(&mut self, cmd: CmdRef, r: Ref) -> Result<Option<ContentState>, TracerError>;
    /// A read of `pipe` by `cmd` must wait while another live command can write it.
    fn pipe_blocked(&self, cmd: CmdRef, pipe: ArtifactId) -> bool;
    fn pipe_take(&mut self, pipe: ArtifactId) -> Vec<u8>;
    fn pipe_put(&mut self, pipe: ArtifactId, data: &[u8]);
    /// Launches a child: emits the Launch and either replays or traces it.
    fn spawn(&mut self, parent: CmdRef, command: Command) -> Result<CmdRef, TracerError>;
    fn exit_status(&self, child: CmdRef) -> Option<i32>;
    /// Stores bytes in the cache; false if that failed.
    fn store(&mut self, bytes: &[u8]) -> bool;
    fn temp_name(&mut self, cmd: CmdRef, counter: u32, suffix: &str) -> String;
    fn console(&mut self, cmd: CmdRef, fd: u32, bytes: &[u8]);
}
