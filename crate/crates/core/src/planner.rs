//! Decides which extra commands must run alongside the ones with failed
//! checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::evaluator::DepGraph;
use crate::traceir::CmdRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    ChangedPredicate,
    UncachedPersistentOutput,
    /// Produces uncached state read by a command that runs.
    UncachedProducer,
    /// Reads uncached state written by a command that runs.
    UncachedConsumer,
    ClusterMember,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::ChangedPredicate => "changed-predicate",
            Reason::UncachedPersistentOutput => "uncached-persistent-output",
            Reason::UncachedProducer => "uncached-producer",
            Reason::UncachedConsumer => "uncached-consumer",
            Reason::ClusterMember => "cluster-member",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSet {
    pub commands: BTreeSet<CmdRef>,
    pub reasons: BTreeMap<CmdRef, Reason>,
}

impl RunSet {
    pub fn from_changed(cmds: impl IntoIterator<Item = CmdRef>) -> RunSet {
        let mut r = RunSet::default();
        for c in cmds {
            r.insert(c, Reason::ChangedPredicate);
        }
        r
    }

    /// Adds `c`; returns true if it was not present.
    pub fn insert(&mut self, c: CmdRef, why: Reason) -> bool {
        if self.commands.insert(c) {
            self.reasons.insert(c, why);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, c: CmdRef) -> bool {
        self.commands.contains(&c)
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }
}

pub type Cluster = BTreeSet<CmdRef>;

/// Directed producer to consumer pairs joined by uncached state.
pub fn uncached_links(d: &DepGraph) -> BTreeSet<(CmdRef, CmdRef)> {
    let mut producers: BTreeMap<_, Vec<CmdRef>> = BTreeMap::new();
    for (c, outs) in &d.outputs {
        for s in outs {
            if !d.is_cached(s) {
                producers.entry(*s).or_default().push(*c);
            }
        }
    }
    let mut links = BTreeSet::new();
    for (c2, ins) in &d.inputs {
        for s in ins {
            if let Some(ps) = producers.get(s) {
                for c1 in ps {
                    if c1 != c2 {
                        links.insert((*c1, *c2));
                    }
                }
            }
        }
    }
    links
}

/// Strongly connected components over uncached links only.
pub fn find_clusters(d: &DepGraph) -> Vec<Cluster> {
    let links = uncached_links(d);
    let mut nodes: BTreeSet<CmdRef> = BTreeSet::new();
    nodes.extend(d.outputs.keys().copied());
    nodes.extend(d.inputs.keys().copied());
    for (a, b) in &links {
        nodes.insert(*a);
        nodes.insert(*b);
    }
    let nodes: Vec<CmdRef> = nodes.into_iter().collect();
    let mut adj: BTreeMap<CmdRef, Vec<CmdRef>> = BTreeMap::new();
    for (a, b) in &links {
        adj.entry(*a).or_default().push(*b);
    }
    tarjan(&nodes, &adj)
}

fn tarjan(nodes: &[CmdRef], adj: &BTreeMap<CmdRef, Vec<CmdRef>>) -> Vec<Cluster> {
    struct State<'a> {
        adj: &'a BTreeMap<CmdRef, Vec<CmdRef>>,
        index: BTreeMap<CmdRef, usize>,
        low: BTreeMap<CmdRef, usize>,
        on_stack: BTreeSet<CmdRef>,
        stack: Vec<CmdRef>,
        next: usize,
        out: Vec<Cluster>,
    }

    fn visit(st: &mut State<'_>, v: CmdRef) {
        st.index.insert(v, st.next);
        st.low.insert(v, st.next);
        st.next += 1;
        st.stack.push(v);
        st.on_stack.insert(v);
        let succ = st.adj.get(&v).cloned().unwrap_or_default();
        for w in succ {
            if !st.index.contains_key(&w) {
                visit(st, w);
                let lw = st.low[&w];
                let lv = st.low.get_mut(&v).unwrap();
                *lv = (*lv).min(lw);
            } else if st.on_stack.contains(&w) {
                let iw = st.index[&w];
                let lv = st.low.get_mut(&v).unwrap();
                *lv = (*lv).min(iw);
            }
        }
        if st.low[&v] == st.index[&v] {
            let mut comp = Cluster::new();
            loop {
                let w = st.stack.pop().unwrap();
                st.on_stack.remove(&w);
                comp.insert(w);
                if w == v {
                    break;
                }
            }
            st.out.push(comp);
        }
    }

    let mut st = State {
        adj,
        index: BTreeMap::new(),
        low: BTreeMap::new(),
        on_stack: BTreeSet::new(),
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in nodes {
        if !st.index.contains_key(v) {
            visit(&mut st, *v);
        }
    }
    st.out
}

/// Least fixpoint of the marking rules starting from `r`.
pub fn plan(d: &DepGraph, r: &RunSet) -> RunSet {
    let mut out = r.clone();
    let mut work: Vec<CmdRef> = out.commands.iter().copied().collect();

    for (c, outs) in &d.outputs {
        if outs.iter().any(|s| d.persists.contains(s) && !d.is_cached(s))
            && out.insert(*c, Reason::UncachedPersistentOutput)
        {
            work.push(*c);
        }
    }

    let links = uncached_links(d);
    let mut producers_of: BTreeMap<CmdRef, Vec<CmdRef>> = BTreeMap::new();
    let mut consumers_of: BTreeMap<CmdRef, Vec<CmdRef>> = BTreeMap::new();
    for (a, b) in &links {
        consumers_of.entry(*a).or_default().push(*b);
        producers_of.entry(*b).or_default().push(*a);
    }
    let mut cluster_of: BTreeMap<CmdRef, usize> = BTreeMap::new();
    let clusters = find_clusters(d);
    for (i, k) in clusters.iter().enumerate() {
        for c in k {
            cluster_of.insert(*c, i);
        }
    }

    while let Some(c) = work.pop() {
        for p in producers_of.get(&c).into_iter().flatten() {
            if out.insert(*p, Reason::UncachedProducer) {
                work.push(*p);
            }
        }
        for x in consumers_of.get(&c).into_iter().flatten() {
            if out.insert(*x, Reason::UncachedConsumer) {
                work.push(*x);
            }
        }
        if let Some(i) = cluster_of.get(&c) {
            for m in &clusters[*i] {
                if out.insert(*m, Reason::ClusterMember) {
                    work.push(*m);
                }
            }
        }
    }
    out
}
