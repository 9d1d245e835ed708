use std::collections::HashMap;
use std::fmt;

use super::types::*;

/// Renders records in listing syntax, e.g.
/// `MatchContent(sh_1, r16, [dir: {"a.c"}])`. Command names come from the
/// Launch records seen so far.
#[derive(Default)]
pub struct Dumper {
    names: HashMap<CmdRef, String>,
}

impl Dumper {
    pub fn new() -> Self {
        let mut names = HashMap::new();
        names.insert(CmdRef::TOOL, "tbld_0".to_string());
        Dumper { names }
    }

    pub fn name(&self, c: CmdRef) -> String {
        self.names.get(&c).cloned().unwrap_or_else(|| format!("cmd_{}", c.0))
    }

    pub fn line(&mut self, rec: &Record) -> String {
        if let Statement::Launch { child, command } = &rec.stmt {
            let name = format!("{}_{}", exe_name(&command.exe).replace('.', "_"), child.0);
            self.names.insert(*child, name);
        }
        let marker = match rec.phase {
            Phase::Pre => "   ",
            Phase::Post => "post ",
        };
        format!("{marker}{}", StmtDisplay { dumper: self, rec })
    }
}

pub struct StmtDisplay<'a> {
    dumper: &'a Dumper,
    rec: &'a Record,
}

impl fmt::Display for StmtDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let who = self.dumper.name(self.rec.owner);
        match &self.rec.stmt {
            Statement::PathRef { base, path, flags, out } => {
                write!(f, "{out} = PathRef({who}, {base}, {path:?}, {flags})")
            }
            Statement::FileRef { out } => write!(f, "{out} = FileRef({who})"),
            Statement::DirRef { out } => write!(f, "{out} = DirRef({who})"),
            Statement::PipeRef { read, write } => {
                write!(f, "[{read}, {write}] = PipeRef({who})")
            }
            Statement::SymlinkRef { dest, out } => {
                write!(f, "{out} = SymlinkRef({who}, {dest:?})")
            }
            Statement::SpecialRef { which, out } => {
                write!(f, "{out} = SpecialRef({who}, {which:?})")
            }
            Statement::CompareRefs { a, b, cmp } => {
                write!(f, "CompareRefs({who}, {a}, {b}, {cmp:?})")
            }
            Statement::ExpectResult { r, expected } => {
                write!(f, "ExpectResult({who}, {r}, {expected})")
            }
            Statement::MatchMetadata { r, state } => {
                write!(f, "MatchMetadata({who}, {r}, {state})")
            }
            Statement::MatchContent { r, state } => {
                write!(f, "MatchContent({who}, {r}, {state})")
            }
            Statement::ExitResult { child, expected } => {
                write!(f, "ExitResult({who}, {}, {expected})", self.dumper.name(*child))
            }
            Statement::UpdateMetadata { r, state } => {
                write!(f, "UpdateMetadata({who}, {r}, {state})")
            }
            Statement::UpdateContent { r, state } => {
                write!(f, "UpdateContent({who}, {r}, {state})")
            }
            Statement::AddEntry { dir, name, target } => {
                write!(f, "AddEntry({who}, {dir}, {name:?}, {target})")
            }
            Statement::RemoveEntry { dir, name, target } => {
                write!(f, "RemoveEntry({who}, {dir}, {name:?}, {target})")
            }
            Statement::Launch { child, command } => {
                write!(f, "{} = Launch({who}, {:?}, [", self.dumper.name(*child), command.short_name())?;
                for (i, (fd, r)) in command.initial_fds.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{fd}->{r}")?;
                }
                f.write_str("])")
            }
            Statement::Join { child } => write!(f, "Join({who}, {})", self.dumper.name(*child)),
            Statement::UsingRef { r } => write!(f, "UsingRef({who}, {r})"),
            Statement::DoneWithRef { r } => write!(f, "DoneWithRef({who}, {r})"),
            Statement::Exit { code } => write!(f, "Exit({who}, {code})"),
        }
    }
}
