//! Read-only view of a data directory: `manifest.json` plus
//! `candidates/<image_id>/candidate_<m>.png` and `meta.json`.

use std::path::{Path, PathBuf};

use maskctl_core::diverse_mbest::{self, CandidateMeta};
use maskctl_core::manifest::{DatasetManifest, ManifestEntry};
use anyhow::Context;
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CANDIDATES_DIR: &str = "candidates";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("no candidates for image {0:?}")]
    CandidatesMissing(String),
    #[error("candidate index {index} out of range for image {image_id:?} with {count} candidates")]
    IndexOutOfRange {
        image_id: String,
        index: i64,
        count: usize,
    },
}

#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> anyhow::Result<Self> {
        let root = root
            .as_ref()
            .canonicalize()
            .with_context(|| format!("data dir {}", root.as_ref().display()))?;
        let manifest = DatasetManifest::load(root.join(MANIFEST_FILE))?;
        Ok(Dataset { root, manifest })
    }

    pub fn entry(&self, image_id: &str) -> Result<&ManifestEntry, DatasetError> {
        self.manifest
            .get(image_id)
            .ok_or_else(|| DatasetError::UnknownImage(image_id.to_string()))
    }

    pub fn candidate_dir(&self, image_id: &str) -> PathBuf {
        self.root.join(CANDIDATES_DIR).join(image_id)
    }

    pub fn candidate_meta(&self, image_id: &str) -> Result<CandidateMeta, DatasetError> {
        self.entry(image_id)?;
        diverse_mbest::read_candidate_meta(&self.candidate_dir(image_id))
            .map_err(|_| DatasetError::CandidatesMissing(image_id.to_string()))
    }

    pub fn candidate_path(&self, image_id: &str, index: usize) -> PathBuf {
        self.candidate_dir(image_id)
            .join(diverse_mbest::candidate_file_name(index))
    }

    /// Checks `index` against the image's candidate count; `-1` is always valid.
    pub fn check_index(&self, image_id: &str, index: i64) -> Result<(), DatasetError> {
        let count = self.candidate_meta(image_id)?.num_candidates();
        if index == crate::selection_log::NONE_ACCEPTABLE || (index >= 0 && (index as usize) < count) {
            Ok(())
        } else {
            Err(DatasetError::IndexOutOfRange {
                image_id: image_id.to_string(),
                index,
                count,
            })
        }
    }
}
