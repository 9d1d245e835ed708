//! Maps observed operations onto trace statements.

use crate::traceir::{
    AccessFlags, CmdRef, Command, ContentState, MetadataState, Ref, ResultCode, Statement,
};

/// One operation performed by a traced command, after it completed.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    /// A path was resolved (open, stat, lstat or a parent lookup).
    Open { base: Ref, path: String, flags: AccessFlags, out: Ref, code: ResultCode },
    Read { r: Ref, state: ContentState },
    Stat { r: Ref, meta: MetadataState },
    /// A write. `prior` is set when the new content depends on the old.
    Write { r: Ref, prior: Option<ContentState>, state: ContentState },
    Mkdir { parent: Ref, name: String, out: Ref },
    Unlink { parent: Ref, name: String, target: Ref },
    Symlink { parent: Ref, name: String, dest: String, out: Ref },
    Pipe { read: Ref, write: Ref },
    Close { r: Ref },
    Spawn { child: CmdRef, command: Command },
    Wait { child: CmdRef, code: i32 },
    Exit { code: i32 },
}

pub fn translate(ev: TraceEvent) -> Vec<Statement> {
    use Statement as S;
    match ev {
        TraceEvent::Open { base, path, flags, out, code } => {
            vec![S::PathRef { base, path, flags, out }, S::ExpectResult { r: out, expected: code }]
        }
        TraceEvent::Read { r, state } => vec![S::MatchContent { r, state }],
        TraceEvent::Stat { r, meta } => vec![S::MatchMetadata { r, state: meta }],
        TraceEvent::Write { r, prior, state } => {
            let mut v = Vec::new();
            if let Some(p) = prior {
                v.push(S::MatchContent { r, state: p });
            }
            v.push(S::UpdateContent { r, state });
            v
        }
        TraceEvent::Mkdir { parent, name, out } => {
            vec![S::DirRef { out }, S::AddEntry { dir: parent, name, target: out }]
        }
        TraceEvent::Unlink { parent, name, target } => {
            vec![S::RemoveEntry { dir: parent, name, target }]
        }
        TraceEvent::Symlink { parent, name, dest, out } => {
            vec![S::SymlinkRef { dest, out }, S::AddEntry { dir: parent, name, target: out }]
        }
        TraceEvent::Pipe { read, write } => {
            vec![S::PipeRef { read, write }, S::UsingRef { r: read }, S::UsingRef { r: write }]
        }
        TraceEvent::Close { r } => vec![S::DoneWithRef { r }],
        TraceEvent::Spawn { child, command } => vec![S::Launch { child, command }],
        TraceEvent::Wait { child, code } => {
            vec![S::Join { child }, S::ExitResult { child, expected: code }]
        }
        TraceEvent::Exit { code } => vec![S::Exit { code }],
    }
}
