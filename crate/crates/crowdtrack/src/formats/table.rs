//! Shared reading and writing of the comma-separated point files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed field access for one data row.
pub struct Row<'a> {
    fields: &'a [&'a str],
    header: &'a [&'a str],
}

impl Row<'_> {
    pub fn get<T: FromStr>(&self, i: usize) -> Result<T, String> {
        let raw = self.fields.get(i).ok_or_else(|| format!("missing column `{}`", self.header[i]))?;
        raw.parse()
            .map_err(|_| format!("column `{}`: cannot parse `{raw}`", self.header[i]))
    }

    /// Real-valued field that must be finite.
    pub fn real(&self, i: usize) -> Result<f64, String> {
        let v: f64 = self.get(i)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("column `{}`: non-finite value", self.header[i]))
        }
    }
}

/// Reads `path`, checks the header, and maps every data row through `parse`
/// together with its 1-based line number. Blank lines are skipped. Fields
/// are plain comma-separated values without quoting.
pub fn read<T>(path: &Path, header: &[&str], mut parse: impl FnMut(&Row<'_>, u64) -> Result<T, String>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = (i + 1) as u64;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if !seen_header {
            if fields != header {
                return Err(Error::format(path, line, format!("expected header `{}`, found `{}`", header.join(","), raw.trim())));
            }
            seen_header = true;
            continue;
        }
        if fields.len() != header.len() {
            return Err(Error::format(path, line, format!("expected {} fields, found {}", header.len(), fields.len())));
        }
        let row = Row { fields: &fields, header };
        out.push(parse(&row, line).map_err(|m| Error::format(path, line, m))?);
    }
    if !seen_header {
        return Err(Error::format(path, 1, format!("missing header `{}`", header.join(","))));
    }
    Ok(out)
}

/// Header line followed by pre-formatted rows.
pub fn write(path: &Path, header: &[&str], rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{r}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
