use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use tbld::traceir::Digest;

use super::{build, example1_files, stages, write, write_all};

type Outcome = Result<String, String>;

fn digest(dir: &Path, rel: &str) -> Result<Digest, String> {
    fs::read(dir.join(rel)).map(|b| Digest::of(&b)).map_err(|e| format!("{rel}: {e}"))
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| format!("<{e}>"))
}

fn sorted(v: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = v.iter().map(|s| s.to_string()).collect();
    v.sort();
    v
}

fn files(list: &[(&str, &str)]) -> BTreeMap<String, String> {
    list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn fixture(list: &[(&str, &str)]) -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    write_all(d.path(), &files(list));
    d
}

/// Adding z.c and z.h and including z.h from main.c reruns only the stages
/// for main and z plus the link.
pub fn example1() -> Outcome {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    write_all(dir, &example1_files());
    build(dir);
    write(dir, "z.h", "int z();\n");
    write(dir, "z.c", "#include \"z.h\"\nint z() { return 3; }\n");
    write(dir, "main.c", "#include \"x.h\"\n#include \"y.h\"\n#include \"z.h\"\nint main() { return x() + y() + z(); }\n");
    let (s, _) = build(dir);
    let traced = stages(&s.traced);
    let skipped = stages(&s.skipped);
    let want_traced = sorted(&[
        "Buildfile",
        "gcc.bsh program main.c x.c y.c z.c",
        "cc1.bsh main.c -main.c.s",
        "as.bsh -main.c.s -main.c.o",
        "cc1.bsh z.c -z.c.s",
        "as.bsh -z.c.s -z.c.o",
        "ld.bsh program -main.c.o -x.c.o -y.c.o -z.c.o",
    ]);
    let want_skipped =
        sorted(&["cc1.bsh x.c -x.c.s", "as.bsh -x.c.s -x.c.o", "cc1.bsh y.c -y.c.s", "as.bsh -y.c.s -y.c.o"]);
    if traced != want_traced || skipped != want_skipped {
        return Err(format!("traced {traced:?}\nskipped {skipped:?}"));
    }
    Ok(format!("traced {} commands, skipped {}", traced.len(), skipped.len()))
}

/// A comment-only edit reruns the compile stage and nothing downstream.
pub fn example2() -> Outcome {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    write_all(dir, &example1_files());
    build(dir);
    let before = digest(dir, "program")?;
    write(dir, "x.c", "#include \"x.h\"\nint x() { return 1; } // reworded comment\n");
    let (s, _) = build(dir);
    let traced = stages(&s.traced);
    let compile = "cc1.bsh x.c -x.c.s".to_string();
    if !traced.contains(&compile) || traced.iter().any(|t| *t != compile && t != "Buildfile") {
        return Err(format!("traced {traced:?}"));
    }
    if digest(dir, "program")? != before {
        return Err("program digest changed".into());
    }
    Ok(format!("traced {traced:?}, program unchanged"))
}

const OBJ_BUILD: &str = "MKDIR obj
SPAWN a cc.bsh a.c obj/a.o
WAIT a -> rc
SPAWN b cc.bsh b.c obj/b.o
WAIT b -> rc
SPAWN l ld.bsh app obj/a.o obj/b.o
WAIT l -> rc
EXIT $rc
";

/// A deleted intermediate object comes back from the cache without
/// running anything.
pub fn cache_restore() -> Outcome {
    let d = fixture(&[
        ("Buildfile", OBJ_BUILD),
        ("cc.bsh", "HASHCOPY $1 $2\n"),
        ("ld.bsh", "HASHCOPY $2 $3 $1\n"),
        ("a.c", "int a;\n"),
        ("b.c", "int b;\n"),
    ]);
    let dir = d.path();
    build(dir);
    let before = digest(dir, "obj/a.o")?;
    fs::remove_file(dir.join("obj/a.o")).unwrap();
    let (s, _) = build(dir);
    if s.commands_traced != 0 {
        return Err(format!("traced {:?}", s.traced));
    }
    let after = digest(dir, "obj/a.o")?;
    if after != before {
        return Err("restored object has a different digest".into());
    }
    Ok(format!("0 traced, obj/a.o restored ({} versions written)", s.versions_committed))
}

/// `cat a > b` followed by a later write to `a`: the rebuild sees `a` in
/// its final state and runs nothing.
pub fn post_build_short_circuit() -> Outcome {
    let d = fixture(&[
        ("Buildfile", "SPAWN c cat.bsh a b\nWAIT c\nSPAWN w put.bsh a\nWAIT w\n"),
        ("cat.bsh", "READ $1 -> x\nWRITE $2 $x\n"),
        ("put.bsh", "WRITE $1 final\n"),
        ("a", "orig\n"),
    ]);
    let dir = d.path();
    build(dir);
    let (b, a) = (read(dir, "b"), read(dir, "a"));
    if b != "orig" || a != "final" {
        return Err(format!("after first build a={a:?} b={b:?}"));
    }
    let (s, _) = build(dir);
    if s.commands_traced != 0 {
        return Err(format!("rebuild traced {:?}", s.traced));
    }
    if read(dir, "b") != "orig" {
        return Err("b changed".into());
    }
    Ok("rebuild traced 0 commands".into())
}

/// Two siblings that feed each other through pipes.
pub fn pipe_cycle() -> Outcome {
    let d = fixture(&[
        (
            "Buildfile",
            "PIPE p\nPIPE q\nSPAWN a ping.bsh in.txt < |q > |p\nSPAWN b pong.bsh out.txt < |p > |q\nWAIT a -> ra\nWAIT b -> rb\n",
        ),
        ("ping.bsh", "READ $1 -> x\nWRITE @stdout ping $x\nCLOSE @stdout\nREAD @stdin -> y\nWRITE ack.txt $y\n"),
        ("pong.bsh", "READ @stdin -> x\nWRITE @stdout pong $x\nWRITE $1 $x\n"),
        ("in.txt", "one\n"),
    ]);
    let dir = d.path();
    build(dir);
    let first = (read(dir, "out.txt"), read(dir, "ack.txt"));
    if first != ("ping one".into(), "pong ping one".into()) {
        return Err(format!("first build wrote {first:?}"));
    }
    write(dir, "in.txt", "two\n");
    let (s, _) = build(dir);
    let got = (read(dir, "out.txt"), read(dir, "ack.txt"));
    if got != ("ping two".into(), "pong ping two".into()) {
        return Err(format!("rebuild wrote {got:?}"));
    }
    let ping = s.traced.iter().position(|t| t.starts_with("ping.bsh"));
    let pong = s.traced.iter().position(|t| t.starts_with("pong.bsh"));
    let (Some(_), Some(_)) = (ping, pong) else {
        return Err(format!("traced {:?}", s.traced));
    };
    let together = s.phase_log.iter().any(|ph| {
        ph.traced.iter().any(|t| t.starts_with("ping.bsh")) && ph.traced.iter().any(|t| t.starts_with("pong.bsh"))
    });
    if !together {
        return Err(format!("ping and pong ran in different phases: {:?}", s.phase_log));
    }
    if s.phases > 4 {
        return Err(format!("{} phases", s.phases));
    }
    let (again, _) = build(dir);
    if again.commands_traced != 0 {
        return Err(format!("no-op rebuild traced {:?}", again.traced));
    }
    Ok(format!("both ran in one phase; {} phases", s.phases))
}

fn count(traced: &[String], prefix: &str) -> usize {
    traced.iter().filter(|t| t.starts_with(prefix)).count()
}

/// A depth-`k` chain of parents that each pass their child's exit status
/// up. Returns (leaf runs, other runs, phases) for the rebuild after the
/// leaf starts failing.
pub fn exit_chain(k: usize) -> Result<(usize, usize, usize), String> {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let first = if k == 1 { "check.bsh".to_string() } else { "l1.bsh".to_string() };
    write(dir, "Buildfile", &format!("SPAWN c {first}\nWAIT c -> rc\nWRITE status.txt $rc\n"));
    for i in 1..k {
        let next = if i + 1 == k { "check.bsh".to_string() } else { format!("l{}.bsh", i + 1) };
        write(dir, &format!("l{i}.bsh"), &format!("SPAWN c {next}\nWAIT c -> rc\nEXIT $rc\n"));
    }
    write(dir, "check.bsh", "IF-CONTAINS in.txt FAIL {\n  EXIT 1\n}\n");
    write(dir, "in.txt", "ok\n");
    build(dir);
    if read(dir, "status.txt") != "0" {
        return Err(format!("status after first build: {:?}", read(dir, "status.txt")));
    }
    write(dir, "in.txt", "FAIL\n");
    let (s, _) = build(dir);
    if read(dir, "status.txt") != "1" {
        return Err(format!("status after flip: {:?}", read(dir, "status.txt")));
    }
    let leaf = count(&s.traced, "check.bsh");
    Ok((leaf, s.traced.len() - leaf, s.phases))
}

pub fn exit_backtracking() -> Outcome {
    let (leaf, parents, _) = exit_chain(1)?;
    if leaf != 1 || parents != 1 {
        return Err(format!("flip ran the child {leaf} times and the parent {parents} times"));
    }
    let mut report = Vec::new();
    for k in 2..=8 {
        let (leaf, extra, phases) = exit_chain(k)?;
        if leaf != 1 || extra > k {
            return Err(format!("depth {k}: leaf ran {leaf} times, {extra} extra executions"));
        }
        report.push(format!("k={k}:{extra}/{phases}"));
    }
    Ok(format!("one parent rerun; chains (extra/phases) {}", report.join(" ")))
}

const META_BUILD: &str = "GLOB *.c -> srcs
PIPE p
SPAWN m features.bsh $srcs > |p
PIPE q
SPAWN d deprecated.bsh $srcs > |q
READ |p -> feats
READ |q -> deps
WAIT m
WAIT d
WRITE gen.h $feats $deps
MKDIR obj
SET objs \"\"
FOR f IN $srcs {
  SPAWN c cc.bsh $f obj/$f.o
  WAIT c -> rc
  SET objs $objs obj/$f.o
}
SPAWN l ld.bsh app $objs
WAIT l -> rc
EXIT $rc
";

fn scan(marker: &str) -> String {
    format!(
        "SET found {marker}:\nFOR f IN $@ {{\n  IF-CONTAINS $f {marker} {{\n    SET found $found $f\n  }}\n}}\nWRITE @stdout $found\n"
    )
}

/// A root that reads two pipe-fed metadata scans to regenerate a header
/// that every compile reads.
pub fn metadata_header() -> Outcome {
    let d = fixture(&[
        ("Buildfile", META_BUILD),
        ("features.bsh", &scan("FEATURE")),
        ("deprecated.bsh", &scan("DEPRECATED")),
        ("cc.bsh", "HASHCOPY $1 gen.h $2\n"),
        ("ld.bsh", "SET objs \"\"\nFOR o IN $@ {\n  IF-NE $o $1 {\n    SET objs $objs $o\n  }\n}\nHASHCOPY $objs $1\n"),
        ("a.c", "int a() { return 1; } /* FEATURE */\n"),
        ("b.c", "int b() { return 2; }\n"),
        ("main.c", "#include \"gen.h\"\nint main() { return a() + b(); }\n"),
    ]);
    let dir = d.path();
    build(dir);
    let header = read(dir, "gen.h");
    if header != "FEATURE: a.c DEPRECATED:" {
        return Err(format!("header {header:?}"));
    }

    // Same markers: the header is rewritten with the same bytes.
    write(dir, "a.c", "int a() { return 10; } /* FEATURE */\n");
    let (s, _) = build(dir);
    let t = &s.traced;
    if count(t, "features.bsh") != 1 || count(t, "deprecated.bsh") != 1 || count(t, "Buildfile") != 1 {
        return Err(format!("metadata not rerun: {t:?}"));
    }
    if read(dir, "gen.h") != header {
        return Err("header changed".into());
    }
    let compiled: Vec<&String> = t.iter().filter(|x| x.starts_with("cc.bsh")).collect();
    if compiled != [&"cc.bsh a.c obj/a.c.o".to_string()] {
        return Err(format!("unchanged header, but compiled {compiled:?}"));
    }

    // A new marker changes the header and every compile reruns.
    write(dir, "b.c", "int b() { return 2; } /* DEPRECATED */\n");
    let (s, _) = build(dir);
    let t = &s.traced;
    if read(dir, "gen.h") != "FEATURE: a.c DEPRECATED: b.c" {
        return Err(format!("header {:?}", read(dir, "gen.h")));
    }
    if count(t, "features.bsh") != 1 || count(t, "deprecated.bsh") != 1 || count(t, "cc.bsh") != 3 {
        return Err(format!("header changed, traced {t:?}"));
    }
    Ok("same header skips downstream compiles; a changed header recompiles all 3".into())
}
