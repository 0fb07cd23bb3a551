use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use cada_core::align::ScoreMap;
use cada_core::tensorio::{read_manifest, read_tensor, resolve, write_manifest, DatasetManifest, ImageEntry};

use crate::UsageError;

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

pub fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize, S: Serialize> {
    command: &'a str,
    version: &'a str,
    arguments: &'a A,
    settings: S,
}

/// Records the command, its arguments and the settings it ran with.
pub fn write_resolved<A: Serialize, S: Serialize>(out: &Path, command: &str, args: &A, settings: S) -> Result<()> {
    let r = Resolved {
        command,
        version: env!("CARGO_PKG_VERSION"),
        arguments: args,
        settings,
    };
    let mut text = serde_json::to_string_pretty(&r)?;
    text.push('\n');
    let path = out.join(RESOLVED_CONFIG);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads `dir/manifest.json`.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(read_manifest(dir.join(MANIFEST), true)?)
}

/// Absolute form of `p` with `.` and `..` removed lexically.
fn absolute(p: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

/// Reference to `target` as seen from directory `base`.
pub fn reference(base: &Path, target: &Path) -> Result<PathBuf> {
    let (b, t) = (absolute(base)?, absolute(target)?);
    Ok(pathdiff::diff_paths(&t, &b).unwrap_or(t))
}

/// Rewrites the file references of `entry`, written relative to `from`, so
/// they stay valid from directory `to`.
pub fn rebase(entry: &ImageEntry, from: &Path, to: &Path) -> Result<ImageEntry> {
    let mut e = entry.clone();
    for slot in [&mut e.feature_path, &mut e.score_path, &mut e.mask_path] {
        if let Some(p) = slot.as_ref() {
            *slot = Some(reference(to, &resolve(from, p))?);
        }
    }
    Ok(e)
}

pub fn write_manifest_to(dir: &Path, m: &DatasetManifest) -> Result<()> {
    Ok(write_manifest(dir.join(MANIFEST), m)?)
}

pub fn load_map(base: &Path, entry: &ImageEntry) -> Result<ScoreMap> {
    let p = entry.score_path.as_ref().ok_or_else(|| {
        UsageError(format!(
            "image {} has no score map; run score (or align) first",
            entry.image_id
        ))
    })?;
    let t = read_tensor(resolve(base, p))?;
    let shape = t.shape().to_vec();
    let t = match shape.len() {
        2 => t,
        n if n > 2 && shape[..n - 2].iter().all(|&d| d == 1) => t.reshape(shape[n - 2..].to_vec())?,
        _ => anyhow::bail!("{}: expected an [H, W] score map, got {shape:?}", entry.image_id),
    };
    Ok(ScoreMap::new(entry.image_id.clone(), t)?)
}

pub fn load_features(base: &Path, entry: &ImageEntry) -> Result<cada_core::tensorio::Tensor> {
    let p = entry
        .feature_path
        .as_ref()
        .ok_or_else(|| UsageError(format!("image {} has no feature tensor", entry.image_id)))?;
    Ok(read_tensor(resolve(base, p))?)
}

pub fn csv_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}
