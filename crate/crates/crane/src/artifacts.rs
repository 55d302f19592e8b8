use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
/// Wall-clock timings vary run to run; the manifest lists this file without
/// a hash so that manifests stay byte-identical.
pub const TIMINGS: &str = "timings.json";
const STAMPS: &str = ".stamps";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: Option<String>,
}

/// Record of one completed stage for one seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub outputs: Vec<FileEntry>,
}

fn rel(out: &Path, path: &Path) -> String {
    let r = path.strip_prefix(out).unwrap_or(path);
    r.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

fn stamp_path(out: &Path, stage: &str, seed: u64) -> PathBuf {
    out.join(STAMPS).join(format!("{stage}-seed{seed}.json"))
}

/// True when the stage completed under the same config hash and all of its
/// outputs are still present and unchanged.
pub fn stamp_valid(out: &Path, stage: &str, seed: u64, config_hash: &str) -> bool {
    let Ok(text) = fs::read_to_string(stamp_path(out, stage, seed)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
        return false;
    };
    stamp.config_hash == config_hash
        && stamp.outputs.iter().all(|f| {
            let p = out.join(&f.path);
            p.is_file() && f.sha256.as_ref().is_none_or(|h| sha256_file(&p).is_ok_and(|x| &x == h))
        })
}

pub fn write_stamp(out: &Path, stage: &str, seed: u64, config_hash: &str, outputs: &[PathBuf]) -> Result<(), CliError> {
    let outputs = outputs
        .iter()
        .map(|p| Ok(FileEntry { path: rel(out, p), sha256: Some(sha256_file(p)?) }))
        .collect::<Result<Vec<_>, CliError>>()?;
    let stamp = Stamp { stage: stage.to_owned(), seed, config_hash: config_hash.to_owned(), outputs };
    let text = serde_json::to_string_pretty(&stamp).expect("stamp serializes");
    write_atomic(&stamp_path(out, stage, seed), text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub artifacts: Vec<FileEntry>,
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, files)?;
        } else {
            files.push(p);
        }
    }
    Ok(())
}

/// Lists every file under `out` (except the manifest) with its hash.
pub fn write_manifest(out: &Path, config_hash: &str) -> Result<RunManifest, CliError> {
    let mut files = Vec::new();
    walk(out, &mut files)?;
    let mut artifacts = Vec::new();
    for p in files {
        let path = rel(out, &p);
        let stray_tmp = p.file_name().is_some_and(|n| n.to_string_lossy().contains(".tmp"));
        if path == MANIFEST || stray_tmp {
            continue;
        }
        let sha256 = if path == TIMINGS { None } else { Some(sha256_file(&p)?) };
        artifacts.push(FileEntry { path, sha256 });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        config_hash: config_hash.to_owned(),
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}
