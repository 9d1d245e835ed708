//! Lookup tables over the previous build's trace.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::cache::Cache;
use crate::traceir::{CmdRef, Command, ContentState, Digest, Phase, Record, Ref, Statement};

/// A command with temporary paths replaced by placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub exe: String,
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
}

pub fn is_temp(s: &str, roots: &[String]) -> bool {
    roots.iter().any(|r| {
        let r = r.trim_end_matches('/');
        s.len() > r.len() + 1 && s.starts_with(r) && s.as_bytes()[r.len()] == b'/'
    })
}

/// Normalizes temp tokens to `TMP0`, `TMP1`, ... in first-appearance order.
pub fn template(cmd: &Command, roots: &[String]) -> (Template, Vec<String>) {
    let mut temps: Vec<String> = Vec::new();
    let mut norm = |s: &str| -> String {
        if !is_temp(s, roots) {
            return s.to_string();
        }
        let i = match temps.iter().position(|t| t == s) {
            Some(i) => i,
            None => {
                temps.push(s.to_string());
                temps.len() - 1
            }
        };
        format!("TMP{i}")
    };
    let exe = norm(&cmd.exe);
    let argv = cmd.argv.iter().map(|a| norm(a)).collect();
    (Template { exe, argv, env: cmd.env.clone() }, temps)
}

#[derive(Debug, Clone)]
pub struct OldCmd {
    pub parent: CmdRef,
    pub command: Command,
    pub launch_idx: usize,
    pub exited: bool,
    pub children: Vec<CmdRef>,
    /// Indices of this command's own pre-build records.
    pub records: Vec<usize>,
    pub uses_pipes: bool,
    /// Hashes of file contents this command wrote, with their cached flag.
    pub outputs: Vec<(Digest, bool)>,
    pub template: Template,
    pub temps: Vec<String>,
    /// Content of temp inputs named on the command line: (placeholder index, hash).
    pub required: Vec<(usize, Digest)>,
}

#[derive(Debug, Default)]
pub struct TraceIndex {
    pub cmds: BTreeMap<CmdRef, OldCmd>,
    pub command_count: usize,
}

impl TraceIndex {
    pub fn build(trace: &[Record], roots: &[String]) -> TraceIndex {
        let mut cmds: BTreeMap<CmdRef, OldCmd> = BTreeMap::new();
        let mut paths: HashMap<(CmdRef, Ref), String> = HashMap::new();
        for (i, rec) in trace.iter().enumerate() {
            if let Statement::Launch { child, command } = &rec.stmt {
                let (template, temps) = template(command, roots);
                cmds.insert(
                    *child,
                    OldCmd {
                        parent: rec.owner,
                        command: command.clone(),
                        launch_idx: i,
                        exited: false,
                        children: Vec::new(),
                        records: Vec::new(),
                        uses_pipes: false,
                        outputs: Vec::new(),
                        template,
                        temps,
                        required: Vec::new(),
                    },
                );
                if let Some(p) = cmds.get_mut(&rec.owner) {
                    p.children.push(*child);
                }
            }
            if rec.phase == Phase::Post {
                continue;
            }
            let Some(c) = cmds.get_mut(&rec.owner) else { continue };
            c.records.push(i);
            match &rec.stmt {
                Statement::Exit { .. } => c.exited = true,
                Statement::PipeRef { .. } => c.uses_pipes = true,
                Statement::PathRef { path, out, .. } => {
                    paths.insert((rec.owner, *out), path.clone());
                }
                Statement::MatchContent { r, state } => match state {
                    ContentState::Pipe { .. } => c.uses_pipes = true,
                    ContentState::File { hash, .. } => {
                        if let Some(p) = paths.get(&(rec.owner, *r)) {
                            if let Some(ix) = c.temps.iter().position(|t| t == p) {
                                if !c.required.iter().any(|(j, _)| *j == ix) {
                                    c.required.push((ix, *hash));
                                }
                            }
                        }
                    }
                    _ => {}
                },
                Statement::UpdateContent { state, .. } => match state {
                    ContentState::Pipe { .. } => c.uses_pipes = true,
                    ContentState::File { hash, cached, .. } => c.outputs.push((*hash, *cached)),
                    _ => {}
                },
                _ => {}
            }
        }
        let command_count = cmds.len();
        TraceIndex { cmds, command_count }
    }

    pub fn get(&self, c: CmdRef) -> Option<&OldCmd> {
        self.cmds.get(&c)
    }

    /// `k` and all its descendants.
    pub fn subtree(&self, k: CmdRef) -> Vec<CmdRef> {
        let mut out = vec![k];
        let mut i = 0;
        while i < out.len() {
            if let Some(c) = self.cmds.get(&out[i]) {
                out.extend(c.children.iter().copied());
            }
            i += 1;
        }
        out
    }

    /// Pre-build records of a subtree, in trace order.
    pub fn subtree_records(&self, k: CmdRef) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .subtree(k)
            .iter()
            .filter_map(|c| self.cmds.get(c))
            .flat_map(|c| c.records.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }

    /// Old commands whose strict ancestor is in `run`.
    pub fn replaced(&self, run: &BTreeSet<CmdRef>) -> BTreeSet<CmdRef> {
        let mut out = BTreeSet::new();
        for (id, c) in &self.cmds {
            if run.contains(&c.parent) || out.contains(&c.parent) {
                out.insert(*id);
            }
        }
        out
    }

    /// Whether the subtree can be replayed: no pipes, every output restorable.
    pub fn replayable(&self, k: CmdRef, cache: &Cache) -> Result<(), &'static str> {
        for c in self.subtree(k) {
            let Some(info) = self.cmds.get(&c) else { continue };
            if !info.exited {
                return Err("incomplete");
            }
            if info.uses_pipes {
                return Err("pipes");
            }
            if info.outputs.iter().any(|(h, cached)| !*cached || !cache.contains(h)) {
                return Err("uncached");
            }
        }
        Ok(())
    }
}
