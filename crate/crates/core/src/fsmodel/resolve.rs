use std::collections::VecDeque;

use super::{ArtifactId, Env};
use crate::traceir::{AccessFlags, ArtifactKind, CmdRef, ResultCode};

pub const MAX_SYMLINK_HOPS: u32 = 40;

/// Outcome of a path resolution: failures are data, not errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub code: ResultCode,
    pub target: Option<ArtifactId>,
}

impl Resolution {
    fn fail(code: ResultCode) -> Resolution {
        Resolution { code, target: None }
    }

    fn ok(a: ArtifactId) -> Resolution {
        Resolution { code: ResultCode::Success, target: Some(a) }
    }
}

pub(crate) fn components(path: &str) -> VecDeque<String> {
    path.split('/').filter(|c| !c.is_empty()).map(str::to_string).collect()
}

impl Env {
    /// Resolves `path` relative to `base` with open(2)-like semantics.
    /// Absolute paths and `..` are jailed at the sandbox root.
    pub fn resolve(
        &mut self,
        base: ArtifactId,
        path: &str,
        flags: &AccessFlags,
        acting: CmdRef,
        committed: bool,
    ) -> Resolution {
        if path.is_empty() {
            return Resolution::fail(ResultCode::NoEntry);
        }
        let mut cur = if path.starts_with('/') { self.root } else { base };
        let mut comps = components(path);
        let mut must_dir = path.ends_with('/');
        if comps.is_empty() {
            comps.push_back(".".into());
        }
        let mut hops = 0u32;

        loop {
            let name = comps.pop_front().expect("component queue is never empty here");
            let last = comps.is_empty();
            if self.kind(cur) != ArtifactKind::Dir {
                return Resolution::fail(ResultCode::NotDir);
            }
            let m = self.metadata(cur);
            if !self.may(&m, 1, true) {
                return Resolution::fail(ResultCode::Access);
            }
            let dots = name == "." || name == "..";
            if last && must_dir && flags.create && !dots {
                return Resolution::fail(ResultCode::IsDir);
            }
            let next = match name.as_str() {
                "." => Some(cur),
                ".." => Some(self.parent(cur)),
                n => self.lookup(cur, n),
            };

            let Some(a) = next else {
                if !last {
                    return Resolution::fail(ResultCode::NoEntry);
                }
                if !flags.create {
                    return Resolution::fail(ResultCode::NoEntry);
                }
                if must_dir {
                    return Resolution::fail(ResultCode::IsDir);
                }
                if !self.may(&m, 2, true) {
                    return Resolution::fail(ResultCode::Access);
                }
                let f = self.new_file(flags.create_mode, acting, committed);
                self.link_entry(cur, &name, Some(f), acting, committed);
                return Resolution::ok(f);
            };

            if last && flags.create && flags.exclusive {
                return Resolution::fail(ResultCode::Exists);
            }

            if self.kind(a) == ArtifactKind::Symlink && !dots {
                let follow = !last || must_dir || !flags.nofollow;
                if !follow {
                    if flags.is_access() || flags.create || flags.truncate {
                        return Resolution::fail(ResultCode::Loop);
                    }
                    return Resolution::ok(a);
                }
                hops += 1;
                if hops > MAX_SYMLINK_HOPS {
                    return Resolution::fail(ResultCode::Loop);
                }
                let dest = self.art(a).dest.clone().unwrap_or_default();
                if dest.is_empty() {
                    return Resolution::fail(ResultCode::NoEntry);
                }
                if dest.starts_with('/') {
                    cur = self.root;
                }
                if dest.ends_with('/') && last {
                    must_dir = true;
                }
                let mut expanded = components(&dest);
                if expanded.is_empty() {
                    expanded.push_back(".".into());
                }
                while let Some(c) = expanded.pop_back() {
                    comps.push_front(c);
                }
                continue;
            }

            if !last {
                cur = a;
                continue;
            }

            let kind = self.kind(a);
            if must_dir && kind != ArtifactKind::Dir {
                return Resolution::fail(ResultCode::NotDir);
            }
            if kind == ArtifactKind::Dir && (flags.write || flags.truncate || flags.create) {
                return Resolution::fail(ResultCode::IsDir);
            }
            if !self.access_allowed(a, flags) {
                return Resolution::fail(ResultCode::Access);
            }
            if flags.truncate {
                self.truncate(a, acting, committed);
            }
            return Resolution::ok(a);
        }
    }
}
