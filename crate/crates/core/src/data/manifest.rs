//! Tab-separated dataset manifests: `id  image_path  mask_path  type  seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::ManipulationKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub kind: ManipulationKind,
    pub seed: u64,
}

/// Parses manifest text. Blank lines and lines starting with `#` are skipped.
/// Errors report the byte offset of the offending line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse { offset: start, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(err("empty id or path".into()));
        }
        let kind = fields[3].parse().map_err(|e: Error| err(e.to_string()))?;
        let seed = fields[4]
            .parse()
            .map_err(|_| err(format!("bad seed `{}`", fields[4])))?;
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            image_path: fields[1].into(),
            mask_path: fields[2].into(),
            kind,
            seed,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            e.image_path.display(),
            e.mask_path.display(),
            e.kind,
            e.seed
        );
    }
    s
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = parse_manifest(&text)?;
    for e in &mut entries {
        if e.image_path.is_relative() {
            e.image_path = base.join(&e.image_path);
        }
        if e.mask_path.is_relative() {
            e.mask_path = base.join(&e.mask_path);
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, format_manifest(entries)).map_err(|e| Error::io(path, e))
}
