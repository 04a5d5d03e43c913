//! Small helpers shared by the text file formats.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_string(path, &text)
}

/// Rejects documents whose `version` field does not match `expected`.
pub fn check_version(path: &Path, found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::format(
            path,
            format!("unsupported version {found}, expected {expected}"),
        ));
    }
    Ok(())
}

/// Resolves `rel` against the directory holding `base`.
pub fn resolve_relative(base: &Path, rel: &Path) -> std::path::PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.parent().unwrap_or_else(|| Path::new(".")).join(rel)
    }
}
