//! The statement language recorded for every build, plus its binary codec.

mod codec;
mod display;
mod types;

pub use codec::{
    decode_record, encode_record, open_trace, read_trace, write_trace, TraceReader, TraceWriter,
    FORMAT_VERSION, MAGIC,
};
pub use display::{Dumper, StmtDisplay};
pub use types::*;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot encode field `{field}`")]
    InvalidField { field: &'static str },
    #[error("corrupt trace at byte offset {offset}")]
    Corrupt { offset: u64 },
    #[error("unsupported record tag {tag}")]
    UnsupportedVersion { tag: u8 },
    #[error("unsupported trace format version {version}")]
    UnsupportedFormat { version: u32 },
    #[error("corrupt trace: bad magic")]
    BadMagic,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
