//! Dataset manifest: one JSON file listing every image and its side files.
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::weak_loss::{LossError, TagSet};

pub const DEFAULT_NUM_CLASSES: usize = 21;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate image_id {0:?}")]
    DuplicateId(String),
    #[error("missing file(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
    #[error("image {image_id}: {source}")]
    Tags {
        image_id: String,
        #[source]
        source: LossError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    /// Layer name (`conv4`, `conv5`) to activation tensor.
    #[serde(default)]
    pub activation_paths: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_path: Option<PathBuf>,
    /// Present class ids; every other class is absent.
    #[serde(default)]
    pub tags: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_path: Option<PathBuf>,
    /// Binary foreground mask (0/255) used by the mask losses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn tag_set(&self, num_classes: usize) -> Result<TagSet, ManifestError> {
        TagSet::new(self.tags.iter().copied(), num_classes).map_err(|source| ManifestError::Tags {
            image_id: self.image_id.clone(),
            source,
        })
    }

    pub fn activation(&self, layer: &str) -> Option<&Path> {
        self.activation_paths.get(layer).map(PathBuf::as_path)
    }

    fn referenced_files(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.image_path)
            .chain(self.activation_paths.values())
            .chain(self.score_path.iter())
            .chain(self.ground_truth_path.iter())
            .chain(self.mask_path.iter())
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.image_path);
        self.activation_paths.values_mut().for_each(join);
        self.score_path.iter_mut().for_each(join);
        self.ground_truth_path.iter_mut().for_each(join);
        self.mask_path.iter_mut().for_each(join);
    }
}

fn default_num_classes() -> usize {
    DEFAULT_NUM_CLASSES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses, resolves relative paths, and checks ids and file existence.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|source| ManifestError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            e.resolve(base);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(ManifestError::DuplicateId(e.image_id.clone()));
            }
        }
        let missing: Vec<PathBuf> = self
            .entries
            .iter()
            .flat_map(ManifestEntry::referenced_files)
            .filter(|p| !p.exists())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ManifestError::MissingFiles(missing));
        }
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }
}
