//! File helpers shared by the model file and the run artifacts.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Compact JSON formatter that writes every `f64` as `d.dddddddddddddddde±x`
/// (17 significant digits), which round-trips bit-exactly.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sci17Formatter;

impl serde_json::ser::Formatter for Sci17Formatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{}", fmt_f64(value))
    }
}

/// `value` with 17 significant digits in scientific notation.
pub fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

/// Serializes `value` with [`Sci17Formatter`].
pub fn to_json_17<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sci17Formatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut buf =
        serde_json::to_vec_pretty(value).map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
