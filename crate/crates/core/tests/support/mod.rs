#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use tbld::engine::{do_build, BuildOptions, BuildStats};

pub mod codec_corpus;
pub mod plan_oracle;
pub mod resolve_oracle;
pub mod scenarios;

static NONCE: AtomicU64 = AtomicU64::new(1);

pub fn options(dir: &Path) -> BuildOptions {
    let mut o = BuildOptions::new(dir);
    o.nonce = Some(NONCE.fetch_add(1, Ordering::Relaxed));
    o
}

/// Builds `dir`, returning the stats and what commands printed.
pub fn build(dir: &Path) -> (BuildStats, Vec<u8>) {
    let mut out = Vec::new();
    let stats = do_build(&options(dir), &mut out).unwrap_or_else(|e| panic!("build of {}: {e}", dir.display()));
    (stats, out)
}

pub fn write(dir: &Path, rel: &str, content: &str) {
    let p = dir.join(rel);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent).unwrap();
    }
    fs::write(p, content).unwrap();
}

pub fn write_all(dir: &Path, files: &BTreeMap<String, String>) {
    for (k, v) in files {
        write(dir, k, v);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Dir,
    File(Vec<u8>),
    Link(PathBuf),
}

/// Every entry below `dir` except the state directory.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Node> {
    fn walk(base: &Path, cur: &Path, out: &mut BTreeMap<String, Node>) {
        let mut entries: Vec<_> = fs::read_dir(cur).unwrap().map(|e| e.unwrap()).collect();
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            if rel == ".tbld" {
                continue;
            }
            let ft = e.file_type().unwrap();
            if ft.is_symlink() {
                out.insert(rel, Node::Link(fs::read_link(&p).unwrap()));
            } else if ft.is_dir() {
                out.insert(rel.clone(), Node::Dir);
                walk(base, &p, out);
            } else {
                out.insert(rel, Node::File(fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn diff(a: &BTreeMap<String, Node>, b: &BTreeMap<String, Node>) -> Vec<String> {
    let mut d = Vec::new();
    for (k, v) in a {
        match b.get(k) {
            None => d.push(format!("only in first: {k}")),
            Some(w) if w != v => d.push(format!("differs: {k}: {v:?} vs {w:?}")),
            _ => {}
        }
    }
    for k in b.keys() {
        if !a.contains_key(k) {
            d.push(format!("only in second: {k}"));
        }
    }
    d
}

/// A command name with generated temp prefixes dropped, so
/// `cc1.bsh x.c tmp/0123456789abcdef-x.c.s` becomes `cc1.bsh x.c -x.c.s`.
pub fn stage(name: &str) -> String {
    name.split(' ')
        .map(|w| match w.strip_prefix("tmp/") {
            Some(rest) => rest.get(16..).unwrap_or(""),
            None => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn stages(names: &[String]) -> Vec<String> {
    let mut v: Vec<String> = names.iter().map(|n| stage(n)).collect();
    v.sort();
    v
}

const CONTENTS: &[&str] = &[
    "alpha\n",
    "beta\n",
    "gamma key\n",
    "delta FAIL\n",
    "epsilon key FAIL\n",
    "zeta\nmore\n",
    "",
];

pub const HELPERS: &[(&str, &str)] = &[
    ("h.bsh", "HASHCOPY $1 $2\n"),
    ("emit.bsh", "READ $1 -> x\nWRITE @stdout $x\n"),
    ("sink.bsh", "READ @stdin -> x\nWRITE $1 piped $x\n"),
    ("sub.bsh", "SPAWN q h.bsh $1 $2\nWAIT q -> rc\nEXIT $rc\n"),
];

/// A randomly generated project: its source files, by relative path.
#[derive(Debug, Clone)]
pub struct Project {
    pub files: BTreeMap<String, String>,
    pub nsrc: usize,
    pub extras: usize,
    pub ncmd: usize,
    pub uses_pipes: bool,
}

impl Project {
    pub fn materialize(&self, dir: &Path) {
        write_all(dir, &self.files);
    }
}

pub fn random_project(rng: &mut StdRng) -> Project {
    let nsrc = rng.gen_range(2..=5);
    let mut ncmd = rng.gen_range(1..=10);
    let mut files = BTreeMap::new();
    for i in 0..nsrc {
        files.insert(format!("src/s{i}.txt"), CONTENTS.choose(rng).unwrap().to_string());
    }
    for (n, body) in HELPERS {
        files.insert(n.to_string(), body.to_string());
    }
    let mut root = String::from("MKDIR out\nMKDIR tmp\n");
    let mut uses_pipes = false;
    // Processes in one build, counting the root and helpers.
    let mut procs = 1;
    for k in 0..ncmd {
        // Inputs: sources, or outputs of earlier commands.
        let pick = |rng: &mut StdRng| -> String {
            if k > 0 && rng.gen_bool(0.4) {
                format!("out/o{}", rng.gen_range(0..k))
            } else {
                format!("src/s{}.txt", rng.gen_range(0..nsrc))
            }
        };
        let a = pick(rng);
        let b = pick(rng);
        let o = format!("out/o{k}");
        let kind = rng.gen_range(0..10);
        procs += match kind {
            3 => 2,
            4 | 9 => 3,
            _ => 1,
        };
        if procs > 12 {
            ncmd = k;
            break;
        }
        let body = match kind {
            0 => format!("HASHCOPY {a} {b} {o}\n"),
            1 => format!("READ {a} -> a\nREAD {b} -> b\nWRITE {o} $a $b\n"),
            2 => format!("WRITE {o} head\nREAD {a} -> x\nAPPEND {o} $x\n"),
            3 => format!(
                "TMPFILE t .tmp\nREAD {a} -> x\nWRITE $t $x\nSPAWN h h.bsh $t {o}\nWAIT h\nRM $t\n"
            ),
            4 => {
                uses_pipes = true;
                format!(
                    "PIPE p\nSPAWN w emit.bsh {a} > |p\nSPAWN r sink.bsh {o} < |p\nWAIT w\nWAIT r\n"
                )
            }
            5 if k > 0 => {
                let j = rng.gen_range(0..k);
                format!("SYMLINK o{j} out/l{k}\nREAD out/l{k} -> x\nWRITE {o} via $x\n")
            }
            6 => format!("WRITE {o} checked\nIF-CONTAINS {a} FAIL {{\n  EXIT 1\n}}\n"),
            7 => format!("GLOB src/*.txt -> fs\nHASHCOPY $fs {o}\n"),
            8 => format!("WRITE {o} no\nIF-CONTAINS {a} key {{\n  READ {b} -> y\n  WRITE {o} yes $y\n}}\n"),
            _ => format!("MKDIR out/d{k}\nSPAWN s sub.bsh {a} out/d{k}/f\nWAIT s\nHASHCOPY out/d{k}/f {o}\n"),
        };
        files.insert(format!("c{k}.bsh"), body);
        root.push_str(&format!("SPAWN k{k} c{k}.bsh\nWAIT k{k} -> rc\n"));
        if kind == 6 {
            root.push_str(&format!("WRITE out/rc{k} $rc\n"));
        }
    }
    files.insert("Buildfile".into(), root);
    Project { files, nsrc, extras: 0, ncmd, uses_pipes }
}

/// Applies one random edit to the project and to `dir`, which holds a
/// built copy of it.
pub fn random_edit(rng: &mut StdRng, p: &mut Project, dir: &Path) -> String {
    match rng.gen_range(0..6) {
        0 | 1 => {
            let f = format!("src/s{}.txt", rng.gen_range(0..p.nsrc));
            let c = CONTENTS.choose(rng).unwrap().to_string();
            write(dir, &f, &c);
            p.files.insert(f.clone(), c);
            format!("edit {f}")
        }
        2 => {
            let f = format!("src/extra{}.txt", p.extras);
            p.extras += 1;
            let c = CONTENTS.choose(rng).unwrap().to_string();
            write(dir, &f, &c);
            p.files.insert(f.clone(), c);
            format!("add {f}")
        }
        3 => {
            let extras: Vec<String> =
                p.files.keys().filter(|k| k.starts_with("src/extra")).cloned().collect();
            match extras.choose(rng) {
                Some(f) => {
                    fs::remove_file(dir.join(f)).unwrap();
                    p.files.remove(f);
                    format!("remove {f}")
                }
                None => "nothing".into(),
            }
        }
        4 => {
            let f = format!("out/o{}", rng.gen_range(0..p.ncmd));
            let path = dir.join(&f);
            if path.exists() {
                fs::remove_file(path).unwrap();
            }
            format!("delete output {f}")
        }
        _ => {
            let f = format!("src/s{}.txt", rng.gen_range(0..p.nsrc));
            let c = p.files[&f].clone();
            std::thread::sleep(std::time::Duration::from_millis(2));
            write(dir, &f, &c);
            format!("touch {f}")
        }
    }
}

/// A clean tree for the project with a fresh build.
pub fn clean_build(p: &Project) -> (tempfile::TempDir, BuildStats) {
    let d = tempfile::tempdir().unwrap();
    p.materialize(d.path());
    let (s, _) = build(d.path());
    (d, s)
}

pub fn make_symlink(dir: &Path, dest: &str, name: &str) {
    symlink(dest, dir.join(name)).unwrap();
}

pub fn example1_files() -> BTreeMap<String, String> {
    let mut f = BTreeMap::new();
    let s = |x: &str| x.to_string();
    f.insert(s("Buildfile"), s("GLOB *.c -> srcs\nSPAWN d gcc.bsh program $srcs\nWAIT d -> rc\nEXIT $rc\n"));
    f.insert(
        s("gcc.bsh"),
        s(r#"MKDIR tmp
SET objs ""
FOR f IN $@ {
  IF-NE $f $1 {
    TMPFILE s -$f.s
    SPAWN c cc1.bsh $f $s
    WAIT c -> rc
    IF-NE $rc 0 {
      EXIT $rc
    }
    TMPFILE o -$f.o
    SPAWN a as.bsh $s $o
    WAIT a -> rc
    IF-NE $rc 0 {
      EXIT $rc
    }
    RM $s
    SET objs $objs $o
  }
}
SPAWN l ld.bsh $1 $objs
WAIT l -> rc
FOR o IN $objs {
  RM $o
}
EXIT $rc
"#),
    );
    f.insert(
        s("cc1.bsh"),
        s("SET deps $1\nFOR h IN x.h y.h z.h {\n  IF-CONTAINS $1 $h {\n    SET deps $deps $h\n  }\n}\nHASHCOPY $deps $2\n"),
    );
    f.insert(s("as.bsh"), s("HASHCOPY $1 $2\n"));
    f.insert(
        s("ld.bsh"),
        s("SET objs \"\"\nFOR o IN $@ {\n  IF-NE $o $1 {\n    SET objs $objs $o\n  }\n}\nHASHCOPY $objs $1\n"),
    );
    f.insert(s("main.c"), s("#include \"x.h\"\n#include \"y.h\"\nint main() { return x() + y(); }\n"));
    f.insert(s("x.c"), s("#include \"x.h\"\nint x() { return 1; } // x\n"));
    f.insert(s("y.c"), s("#include \"y.h\"\nint y() { return 2; }\n"));
    f.insert(s("x.h"), s("int x();\n"));
    f.insert(s("y.h"), s("int y();\n"));
    f
}
