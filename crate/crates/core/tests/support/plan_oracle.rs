use std::collections::BTreeSet;

use rand::rngs::StdRng;
use rand::Rng;
use tbld::evaluator::DepGraph;
use tbld::fsmodel::{ArtifactId, StateId};
use tbld::planner::{plan, RunSet};
use tbld::traceir::CmdRef;

pub struct Case {
    pub graph: DepGraph,
    pub initial: BTreeSet<CmdRef>,
}

pub fn random_case(rng: &mut StdRng) -> Case {
    let n = rng.gen_range(1..=12u32);
    let states = rng.gen_range(1..=16u32);
    let mut g = DepGraph::default();
    for s in 0..states {
        let sid = StateId { artifact: ArtifactId(s), version: rng.gen_range(0..2) };
        g.cached.insert(sid, rng.gen_bool(0.5));
        if rng.gen_bool(0.3) {
            g.persists.insert(sid);
        }
        for _ in 0..rng.gen_range(0..=2) {
            g.outputs.entry(CmdRef(rng.gen_range(0..n))).or_default().insert(sid);
        }
        for _ in 0..rng.gen_range(0..=3) {
            g.inputs.entry(CmdRef(rng.gen_range(0..n))).or_default().insert(sid);
        }
    }
    let initial = (0..n).filter(|_| rng.gen_bool(0.2)).map(CmdRef).collect();
    Case { graph: g, initial }
}

/// Repeated scans over the rules until nothing changes.
pub fn naive(g: &DepGraph, initial: &BTreeSet<CmdRef>) -> BTreeSet<CmdRef> {
    let cached = |s: &StateId| g.cached.get(s).copied().unwrap_or(true);
    let mut nodes: BTreeSet<CmdRef> = g.outputs.keys().copied().collect();
    nodes.extend(g.inputs.keys().copied());
    nodes.extend(initial.iter().copied());
    let nodes: Vec<CmdRef> = nodes.into_iter().collect();
    let ix = |c: &CmdRef| nodes.iter().position(|x| x == c).unwrap();

    // Direct uncached producer-to-consumer links.
    let n = nodes.len();
    let mut link = vec![vec![false; n]; n];
    for (p, outs) in &g.outputs {
        for (c, ins) in &g.inputs {
            if p != c && outs.iter().any(|s| !cached(s) && ins.contains(s)) {
                link[ix(p)][ix(c)] = true;
            }
        }
    }
    // Transitive closure for cluster membership.
    let mut reach = link.clone();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }

    let mut r = initial.clone();
    loop {
        let before = r.len();
        for (c, outs) in &g.outputs {
            if outs.iter().any(|s| g.persists.contains(s) && !cached(s)) {
                r.insert(*c);
            }
        }
        for i in 0..n {
            for j in 0..n {
                if link[i][j] && (r.contains(&nodes[i]) || r.contains(&nodes[j])) {
                    r.insert(nodes[i]);
                    r.insert(nodes[j]);
                }
                if reach[i][j] && reach[j][i] && (r.contains(&nodes[i]) || r.contains(&nodes[j])) {
                    r.insert(nodes[i]);
                    r.insert(nodes[j]);
                }
            }
        }
        if r.len() == before {
            return r;
        }
    }
}

/// Compares `plan` with the naive fixpoint on `cases` random graphs.
pub fn check(seed: u64, cases: usize) -> Result<String, String> {
    use rand::SeedableRng;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut grew = 0;
    for i in 0..cases {
        let c = random_case(&mut rng);
        let got = plan(&c.graph, &RunSet::from_changed(c.initial.iter().copied())).commands;
        let want = naive(&c.graph, &c.initial);
        if got != want {
            return Err(format!("case {i}: plan {got:?}, naive {want:?}"));
        }
        if got.len() > c.initial.len() {
            grew += 1;
        }
    }
    Ok(format!("{cases} graphs agree, {grew} needed extra commands"))
}
