//! Schema manifest: one column per line, `name<TAB>kind[<TAB>key=value;...]`.
//!
//! Blank lines and lines starting with `#` are skipped. Lines without a tab
//! are split at the last run of whitespace into name and kind.

use std::fs;
use std::path::Path;

use super::{ColumnKind, ColumnSchema};
use crate::error::{Error, Result};

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ColumnSchema>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ColumnSchema>> {
    let mut columns: Vec<ColumnSchema> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (name, kind, codebook) = if line.contains('\t') {
            let mut fields = line.split('\t').map(str::trim).filter(|f| !f.is_empty());
            let name = fields.next().unwrap_or_default();
            let kind = fields.next().ok_or_else(|| {
                Error::Schema(format!("line {}: missing column kind", lineno + 1))
            })?;
            let rest: Vec<&str> = fields.collect();
            (name, kind, rest.join(";"))
        } else {
            let (name, kind) = trimmed.rsplit_once(char::is_whitespace).ok_or_else(|| {
                Error::Schema(format!("line {}: expected `name<TAB>kind`", lineno + 1))
            })?;
            (name.trim(), kind, String::new())
        };
        let kind: ColumnKind = kind
            .parse()
            .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
        let mut col = ColumnSchema::new(name, kind)?;
        let entries = codebook
            .split(';')
            .map(str::trim)
            .filter(|e| !e.is_empty())
            .map(|e| {
                e.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| {
                        Error::Schema(format!("line {}: bad codebook entry `{e}`", lineno + 1))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if !entries.is_empty() && kind != ColumnKind::Categorical {
            return Err(Error::Schema(format!(
                "line {}: codebook on non-categorical column `{}`",
                lineno + 1,
                col.name
            )));
        }
        col = col.with_codebook(entries)?;
        if columns.iter().any(|c| c.name == col.name) {
            return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
        }
        columns.push(col);
    }
    Ok(columns)
}

pub fn write_manifest(schema: &[ColumnSchema]) -> String {
    let mut out = String::new();
    for col in schema {
        out.push_str(&col.name);
        out.push('\t');
        out.push_str(col.kind.as_str());
        if !col.codebook.is_empty() {
            out.push('\t');
            let entries: Vec<String> = col
                .codebook
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            out.push_str(&entries.join(";"));
        }
        out.push('\n');
    }
    out
}
