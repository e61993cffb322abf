//! Binary containers: `.npcm` models, `.npct` datasets and `.npcg`
//! decision graphs. Each starts with a 4-byte magic and a little-endian
//! `u32` version; all numbers are little-endian.

mod dataset;
mod graph;
mod model;

use std::path::Path;

pub use dataset::{load_dataset, save_dataset, TensorSet};
pub use graph::{load_graph, peek_graph_params, save_graph};
pub use model::{load_model, save_model};

pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not a {expected} file: bad magic at byte 0")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {found} at byte 4 (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("truncated at byte {offset}: {what} needs {needed} bytes, {available} left")]
    Truncated {
        offset: usize,
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{count} unexpected trailing bytes at byte {offset}")]
    Trailing { offset: usize, count: usize },
    #[error("bad JSON section at byte {offset}: {source}")]
    Json {
        offset: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("at byte {offset}: {message}")]
    Invalid { offset: usize, message: String },
    #[error("graph was built for model {expected:016x}, not {found:016x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Core(#[from] npc_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type FormatResult<T> = Result<T, FormatError>;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, needed: usize, what: &'static str) -> FormatResult<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if needed > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                what,
                needed,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + needed];
        self.pos += needed;
        Ok(out)
    }

    pub fn u8(&mut self, what: &'static str) -> FormatResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> FormatResult<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self, what: &'static str) -> FormatResult<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    /// Magic and version.
    pub fn header(&mut self, magic: &'static [u8; 4], name: &'static str) -> FormatResult<()> {
        if self.bytes.len() < 4 || &self.bytes[..4] != magic {
            return Err(FormatError::BadMagic { expected: name });
        }
        self.pos = 4;
        let found = self.u32("version")?;
        if found != VERSION {
            return Err(FormatError::Version { found });
        }
        Ok(())
    }

    /// `u64` length followed by that many bytes of JSON.
    pub fn json<T: serde::de::DeserializeOwned>(&mut self, what: &'static str) -> FormatResult<T> {
        let len = self.u64("JSON length")?;
        let len = usize::try_from(len).map_err(|_| FormatError::Invalid {
            offset: self.pos - 8,
            message: format!("JSON length {len} does not fit in memory"),
        })?;
        let offset = self.pos;
        let body = self.take(len, what)?;
        serde_json::from_slice(body).map_err(|source| FormatError::Json { offset, source })
    }

    pub fn finish(&self) -> FormatResult<()> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::Trailing {
                offset: self.pos,
                count: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

pub(crate) fn write_header(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
}

pub(crate) fn write_json<T: serde::Serialize>(out: &mut Vec<u8>, value: &T) {
    let body = serde_json::to_vec(value).expect("manifest types always serialize");
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
}

pub(crate) fn f32s_le(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn hash_hex(hash: u64) -> String {
    format!("{hash:016x}")
}

pub(crate) fn parse_hash(s: &str) -> Option<u64> {
    (s.len() == 16)
        .then(|| u64::from_str_radix(s, 16).ok())
        .flatten()
}

pub fn read_file(path: &Path) -> FormatResult<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> FormatResult<()> {
    Ok(std::fs::write(path, bytes)?)
}
