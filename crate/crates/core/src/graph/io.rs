//! The `.mimo` file format.
//!
//! ```text
//! offset 0   b"MIMO"
//! offset 4   u32 LE  format version
//! offset 8   u64 LE  metadata length L
//! offset 16  L bytes of JSON metadata (topology, shapes, quantization ranges)
//! then       every stored tensor in canonical visit order:
//!            f32 LE values, or packed integer codes for quantized weights
//! ```
//!
//! Serialization is canonical, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use super::{ModelGraph, StorageMut};
use crate::error::{MimoError, Result};

pub const MAGIC: &[u8; 4] = b"MIMO";
pub const VERSION: u32 = 1;
/// Bytes before the metadata block.
pub const HEADER_LEN: usize = 16;

pub fn to_bytes(graph: &ModelGraph) -> Result<Vec<u8>> {
    graph.validate()?;
    let meta = serde_json::to_vec(graph)
        .map_err(|e| MimoError::Usage(format!("cannot encode metadata: {e}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    graph.visit(&mut |_, _, storage| match storage {
        super::Storage::F32(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        super::Storage::Codes(q) => out.extend_from_slice(&q.pack()),
    });
    Ok(out)
}

fn parse_err(offset: usize, message: impl Into<String>) -> MimoError {
    MimoError::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(
            at..at
                .checked_add(n)
                .ok_or_else(|| parse_err(at, format!("{what} length overflows")))?,
        )
        .ok_or_else(|| {
            parse_err(
                bytes.len(),
                format!("truncated {what}: need {n} bytes at offset {at}"),
            )
        })
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if take(bytes, 0, 4, "magic")? != MAGIC {
        return Err(parse_err(0, "bad magic, not a .mimo file"));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(parse_err(
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let meta_len = u64::from_le_bytes(take(bytes, 8, 8, "metadata length")?.try_into().unwrap());
    let meta_len =
        usize::try_from(meta_len).map_err(|_| parse_err(8, "metadata length too large"))?;
    let meta = take(bytes, HEADER_LEN, meta_len, "metadata")?;
    let mut graph: ModelGraph = serde_json::from_slice(meta).map_err(|e| {
        // compact metadata is a single line, so the column is a byte position
        let pos = if e.line() <= 1 {
            e.column().saturating_sub(1)
        } else {
            0
        };
        parse_err(HEADER_LEN + pos, format!("bad metadata: {e}"))
    })?;
    let mut at = HEADER_LEN + meta_len;
    let mut failure = None;
    graph.visit_mut(&mut |key, _, storage| {
        if failure.is_some() {
            return;
        }
        let result = match storage {
            StorageMut::F32(t) => take(bytes, at, 4 * t.len(), key).map(|raw| {
                for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                    *v = f32::from_le_bytes(chunk.try_into().unwrap());
                }
                at += raw.len();
            }),
            StorageMut::Codes(q) => {
                let n = q.code_bytes();
                take(bytes, at, n, key).and_then(|raw| {
                    q.unpack(raw)
                        .map_err(|e| parse_err(at, format!("{key}: {e}")))?;
                    q.validate()
                        .map_err(|e| parse_err(at, format!("{key}: {e}")))?;
                    at += n;
                    Ok(())
                })
            }
        };
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if at != bytes.len() {
        return Err(parse_err(
            at,
            format!("{} trailing bytes after weights", bytes.len() - at),
        ));
    }
    graph
        .validate()
        .map_err(|e| parse_err(HEADER_LEN, format!("invalid graph: {e}")))?;
    Ok(graph)
}

pub fn save(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(graph)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_bytes(&fs::read(path)?)
}
