//! File output helpers: atomic writes and schema-version header lines.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Prefix of the first line of every file this crate writes.
pub const SCHEMA_PREFIX: &str = "# schema: springgrasp.";

pub fn schema_line(kind: &str, version: u32) -> String {
    format!("{SCHEMA_PREFIX}{kind}/{version}\n")
}

/// Checks the schema header of `text` and returns the body after it.
pub fn strip_schema<'a>(text: &'a str, kind: &str, version: u32) -> Result<&'a str> {
    let expected = schema_line(kind, version);
    let first = text.lines().next().unwrap_or("");
    if first.trim_end() != expected.trim_end() {
        return Err(Error::Format {
            line: 1,
            msg: format!("expected header {:?}, found {first:?}", expected.trim_end()),
        });
    }
    Ok(&text[first.len()..])
}

/// Writes via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
