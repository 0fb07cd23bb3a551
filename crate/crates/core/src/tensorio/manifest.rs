//! Dataset manifest: a JSON inventory of images and the tensor files that
//! belong to them. Relative file references resolve against the directory
//! holding the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub split: Split,
    pub label: Label,
    /// Ground-truth class. Only the oracle and evaluation paths read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl ImageEntry {
    pub fn new(image_id: impl Into<String>, split: Split, label: Label) -> Self {
        ImageEntry {
            image_id: image_id.into(),
            split,
            label,
            class_id: None,
            feature_path: None,
            score_path: None,
            mask_path: None,
        }
    }

    fn file_refs(&self) -> impl Iterator<Item = &PathBuf> {
        [&self.feature_path, &self.score_path, &self.mask_path]
            .into_iter()
            .flatten()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    pub fn new(images: Vec<ImageEntry>) -> Self {
        DatasetManifest { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.image_id == image_id)
    }

    /// Number of distinct class ids present.
    pub fn class_count(&self) -> usize {
        self.images
            .iter()
            .filter_map(|e| e.class_id)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn has_class_ids(&self) -> bool {
        !self.images.is_empty() && self.images.iter().all(|e| e.class_id.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.images {
            if e.image_id.is_empty() {
                return Err(Error::Manifest("empty image_id".into()));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate image_id {:?}", e.image_id)));
            }
            if e.split == Split::Train && e.label == Label::Anomalous {
                return Err(Error::Manifest(format!(
                    "{:?}: anomalous image in train split",
                    e.image_id
                )));
            }
            if e.mask_path.is_some() && e.label == Label::Normal {
                return Err(Error::Manifest(format!(
                    "{:?}: mask on a normal image",
                    e.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Resolves a manifest file reference against the manifest's directory.
pub fn resolve(base: &Path, reference: &Path) -> PathBuf {
    if reference.is_absolute() {
        reference.to_path_buf()
    } else {
        base.join(reference)
    }
}

/// Expresses `target` relative to `base` when it lies beneath it, otherwise
/// returns it unchanged.
pub fn relativize(base: &Path, target: &Path) -> PathBuf {
    match target.strip_prefix(base) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => target.to_path_buf(),
    }
}

/// Reads and validates a manifest. With `eager` set, every referenced file
/// must exist.
pub fn read_manifest(path: impl AsRef<Path>, eager: bool) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    if eager {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &manifest.images {
            for r in e.file_refs() {
                let full = resolve(base, r);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "{:?}: dangling file reference {}",
                        e.image_id,
                        full.display()
                    )));
                }
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
