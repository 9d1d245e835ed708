use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tbld::traceir::{
    open_trace, AccessFlags, ArtifactKind, CmdRef, Command, ContentState, Digest, MetadataState, PipeOp, Record,
    Ref, RefComparison, ResultCode, SpecialKind, SpecialPolicy, Statement, TraceWriter,
};

pub const KINDS: usize = 20;

fn word(rng: &mut StdRng) -> String {
    let n = rng.gen_range(0..12);
    (0..n).map(|_| *['a', 'z', '/', '.', ' ', '\n', 'é', '"'].choose(rng).unwrap()).collect()
}

fn r(rng: &mut StdRng) -> Ref {
    Ref(rng.gen_range(0..1000))
}

fn meta(rng: &mut StdRng) -> MetadataState {
    let kinds =
        [ArtifactKind::File, ArtifactKind::Dir, ArtifactKind::Symlink, ArtifactKind::Pipe, ArtifactKind::Special];
    MetadataState { uid: rng.gen(), gid: rng.gen(), kind: *kinds.choose(rng).unwrap(), perms: rng.gen_range(0..0o1000) }
}

fn content(rng: &mut StdRng) -> ContentState {
    match rng.gen_range(0..5) {
        0 => ContentState::File {
            hash: Digest(rng.gen()),
            size: rng.gen(),
            mtime_ns: rng.gen(),
            cached: rng.gen(),
        },
        1 => {
            let mut entries: Vec<String> = (0..rng.gen_range(0..5)).map(|_| word(rng)).collect();
            entries.sort();
            entries.dedup();
            ContentState::Dir { entries }
        }
        2 => ContentState::Symlink { dest: word(rng) },
        3 => ContentState::Pipe { op: if rng.gen() { PipeOp::Read } else { PipeOp::Write }, writer_epoch: rng.gen() },
        _ => ContentState::Special {
            policy: if rng.gen() { SpecialPolicy::AlwaysChanged } else { SpecialPolicy::NeverChanged },
        },
    }
}

fn code(rng: &mut StdRng) -> ResultCode {
    use ResultCode::*;
    *[Success, NoEntry, Access, Exists, NotDir, IsDir, Loop].choose(rng).unwrap()
}

fn flags(rng: &mut StdRng) -> AccessFlags {
    AccessFlags {
        read: rng.gen(),
        write: rng.gen(),
        execute: rng.gen(),
        create: rng.gen(),
        exclusive: rng.gen(),
        truncate: rng.gen(),
        nofollow: rng.gen(),
        create_mode: rng.gen_range(0..0o1000),
    }
}

fn command(rng: &mut StdRng) -> Command {
    let args: Vec<String> = (0..rng.gen_range(0..4)).map(|_| word(rng)).collect();
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let mut c = Command::new(format!("bin/{}", word(rng)), &args);
    for _ in 0..rng.gen_range(0..3) {
        c.env.insert(word(rng), word(rng));
    }
    c.cwd = r(rng);
    c.initial_fds.insert(rng.gen_range(3..10), r(rng));
    c
}

/// A random statement of kind `k`, in declaration order.
pub fn statement(rng: &mut StdRng, k: usize) -> Statement {
    match k {
        0 => Statement::PathRef { base: r(rng), path: word(rng), flags: flags(rng), out: r(rng) },
        1 => Statement::FileRef { out: r(rng) },
        2 => Statement::DirRef { out: r(rng) },
        3 => Statement::PipeRef { read: r(rng), write: r(rng) },
        4 => Statement::SymlinkRef { dest: word(rng), out: r(rng) },
        5 => {
            use SpecialKind::*;
            Statement::SpecialRef { which: *[Stdin, Stdout, Stderr, Root, Null].choose(rng).unwrap(), out: r(rng) }
        }
        6 => Statement::CompareRefs {
            a: r(rng),
            b: r(rng),
            cmp: if rng.gen() { RefComparison::SameInstance } else { RefComparison::DifferentInstance },
        },
        7 => Statement::ExpectResult { r: r(rng), expected: code(rng) },
        8 => Statement::MatchMetadata { r: r(rng), state: meta(rng) },
        9 => Statement::MatchContent { r: r(rng), state: content(rng) },
        10 => Statement::ExitResult { child: CmdRef(rng.gen()), expected: rng.gen() },
        11 => Statement::UpdateMetadata { r: r(rng), state: meta(rng) },
        12 => Statement::UpdateContent { r: r(rng), state: content(rng) },
        13 => Statement::AddEntry { dir: r(rng), name: word(rng), target: r(rng) },
        14 => Statement::RemoveEntry { dir: r(rng), name: word(rng), target: r(rng) },
        15 => Statement::Launch { child: CmdRef(rng.gen()), command: command(rng) },
        16 => Statement::Join { child: CmdRef(rng.gen()) },
        17 => Statement::UsingRef { r: r(rng) },
        18 => Statement::DoneWithRef { r: r(rng) },
        _ => Statement::Exit { code: rng.gen() },
    }
}

pub fn record(rng: &mut StdRng, k: usize) -> Record {
    let owner = CmdRef(rng.gen_range(0..50));
    let stmt = statement(rng, k);
    if stmt.is_check() && rng.gen() {
        Record::post(owner, stmt)
    } else {
        Record::pre(owner, stmt)
    }
}

fn round_trip(records: &[Record]) -> Result<(Vec<Record>, usize), String> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.bin");
    let mut w = TraceWriter::create(&path).map_err(|e| e.to_string())?;
    for rec in records {
        w.write(rec).map_err(|e| e.to_string())?;
    }
    w.finish().map_err(|e| e.to_string())?;
    let mut reader = open_trace(&path).map_err(|e| e.to_string())?;
    let mut back = Vec::new();
    while let Some(rec) = reader.next_record().map_err(|e| e.to_string())? {
        back.push(rec);
    }
    Ok((back, reader.peak_buffer()))
}

/// Round-trips a corpus covering every kind, then compares reader buffer
/// peaks for a short and a long trace built from the same block.
pub fn check(seed: u64, per_kind: usize) -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut corpus = Vec::new();
    for i in 0..KINDS * per_kind {
        corpus.push(record(&mut rng, i % KINDS));
    }
    let (back, _) = round_trip(&corpus)?;
    if back != corpus {
        let at = back.iter().zip(&corpus).position(|(a, b)| a != b);
        return Err(format!("round trip differs at {at:?} ({} vs {} records)", back.len(), corpus.len()));
    }
    let block: Vec<Record> = (0..10).map(|i| record(&mut rng, (i * 7) % KINDS)).collect();
    let long: Vec<Record> = block.iter().cycle().take(10_000).cloned().collect();
    let (_, small) = round_trip(&block)?;
    let (_, large) = round_trip(&long)?;
    let ratio = large as f64 / small.max(1) as f64;
    if ratio > 2.0 {
        return Err(format!("peak buffer {small} bytes for 10 records, {large} for 10000"));
    }
    Ok(format!("{} records of {KINDS} kinds round-trip; peak buffer {small} vs {large} bytes", corpus.len()))
}
