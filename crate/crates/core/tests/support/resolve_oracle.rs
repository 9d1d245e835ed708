use std::ffi::CString;
use std::fs;
use std::os::fd::AsRawFd;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tbld::cache::Cache;
use tbld::fsmodel::Env;
use tbld::traceir::{AccessFlags, CmdRef, ResultCode};

const NAMES: &[&str] = &["a", "b", "c", "d"];

/// Fills `dir` with random files, directories and symlinks. Symlink targets
/// never contain `.` or `..`, so nothing resolves above the root.
fn fill(rng: &mut StdRng, dir: &Path, depth: usize, perms: &mut Vec<(std::path::PathBuf, u32)>) {
    for name in NAMES {
        let p = dir.join(name);
        match rng.gen_range(0..10) {
            0..=2 => {
                fs::write(&p, name).unwrap();
                let mode = *[0o644, 0o444, 0o000, 0o755].choose(rng).unwrap();
                perms.push((p, mode));
            }
            3..=4 if depth < 3 => {
                fs::create_dir(&p).unwrap();
                fill(rng, &p, depth + 1, perms);
                let mode = *[0o755, 0o755, 0o555, 0o000].choose(rng).unwrap();
                perms.push((p, mode));
            }
            5..=7 => {
                let len = rng.gen_range(1..=3);
                let dest: Vec<&str> = (0..len).map(|_| *NAMES.choose(rng).unwrap()).collect();
                let mut dest = dest.join("/");
                if rng.gen_bool(0.1) {
                    dest.push('/');
                }
                symlink(&dest, &p).unwrap();
            }
            _ => {}
        }
    }
}

fn random_path(rng: &mut StdRng) -> String {
    let len = rng.gen_range(1..=4);
    let mut parts = Vec::new();
    let mut depth = 0;
    for _ in 0..len {
        let r = rng.gen_range(0..10);
        if r == 0 {
            parts.push(".".to_string());
        } else if r == 1 && depth > 0 {
            parts.push("..".to_string());
            depth -= 1;
        } else {
            parts.push(NAMES.choose(rng).unwrap().to_string());
            depth += 1;
        }
    }
    let mut s = parts.join("/");
    if rng.gen_bool(0.1) {
        s.push('/');
    }
    s
}

fn random_flags(rng: &mut StdRng) -> AccessFlags {
    match rng.gen_range(0..8) {
        0 => AccessFlags::probe(),
        1 => AccessFlags::default(),
        2 => AccessFlags::read(),
        3 => AccessFlags { read: true, nofollow: true, ..Default::default() },
        4 => AccessFlags::write_truncate(0o644),
        5 => AccessFlags { exclusive: true, ..AccessFlags::write_append(0o644) },
        6 => AccessFlags { write: true, ..Default::default() },
        _ => AccessFlags { read: true, write: true, create: true, exclusive: rng.gen(), nofollow: rng.gen(), create_mode: 0o600, ..Default::default() },
    }
}

/// The real system's answer, run against the tree under `root`.
fn real(root: &Path, path: &str, f: &AccessFlags) -> ResultCode {
    let dir = fs::File::open(root).unwrap();
    let c = CString::new(path).unwrap();
    let rc = if !f.is_access() && !f.create {
        let mut st = std::mem::MaybeUninit::<libc::stat>::uninit();
        let fl = if f.nofollow { libc::AT_SYMLINK_NOFOLLOW } else { 0 };
        // SAFETY: valid fd, NUL-terminated path and writable stat buffer.
        unsafe { libc::fstatat(dir.as_raw_fd(), c.as_ptr(), st.as_mut_ptr(), fl) }
    } else {
        let mut fl = match (f.read, f.write) {
            (_, false) => libc::O_RDONLY,
            (false, true) => libc::O_WRONLY,
            (true, true) => libc::O_RDWR,
        };
        if f.create {
            fl |= libc::O_CREAT;
        }
        if f.exclusive {
            fl |= libc::O_EXCL;
        }
        if f.truncate {
            fl |= libc::O_TRUNC;
        }
        if f.nofollow {
            fl |= libc::O_NOFOLLOW;
        }
        // SAFETY: valid fd and NUL-terminated path.
        let fd = unsafe { libc::openat(dir.as_raw_fd(), c.as_ptr(), fl, f.create_mode as libc::c_uint) };
        if fd >= 0 {
            // SAFETY: fd was just returned by openat.
            unsafe { libc::close(fd) };
        }
        fd
    };
    if rc >= 0 {
        return ResultCode::Success;
    }
    let errno = std::io::Error::last_os_error().raw_os_error().unwrap();
    ResultCode::from_errno(errno).unwrap_or_else(|| panic!("unexpected errno {errno} for {path:?}"))
}

/// Compares model resolution with the real system on `cases` random trees.
pub fn check(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut outcomes = std::collections::BTreeMap::new();
    let mut chains = 0;
    for i in 0..cases {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("root");
        fs::create_dir(&root).unwrap();
        let mut perms = Vec::new();
        fill(&mut rng, &root, 0, &mut perms);
        for (p, m) in perms.iter().rev() {
            fs::set_permissions(p, fs::Permissions::from_mode(*m)).unwrap();
        }
        let path = random_path(&mut rng);
        let flags = random_flags(&mut rng);
        if fs::symlink_metadata(root.join(path.split('/').next().unwrap()))
            .is_ok_and(|m| m.file_type().is_symlink())
        {
            chains += 1;
        }

        let mut env = Env::new(&root, Cache::new(tmp.path().join("cache")), None);
        let model = env.resolve(env.root(), &path, &flags, CmdRef(0), false).code;
        let actual = real(&root, &path, &flags);
        // Restore permissions so the tempdir can be removed.
        for (p, _) in &perms {
            let _ = fs::set_permissions(p, fs::Permissions::from_mode(0o755));
        }
        if model != actual {
            let tree = String::from_utf8_lossy(
                &std::process::Command::new("ls").arg("-lR").arg(&root).output().unwrap().stdout,
            )
            .into_owned();
            return Err(format!("case {i}: {path:?} {flags:?}: model {model:?}, real {actual:?}\n{tree}"));
        }
        *outcomes.entry(actual.name()).or_insert(0) += 1;
    }
    Ok(format!("{cases} cases agree ({chains} start at a symlink), outcomes {outcomes:?}"))
}
