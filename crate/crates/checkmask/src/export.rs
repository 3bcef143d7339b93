//! Export of the selected masks: `<image_id>/mask.png` per image,
//! `manifest.json` pointing each entry's `mask_path` at it, and `stats.json`.
//!
//! The output depends only on the log and the candidate files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use maskctl_core::manifest::DatasetManifest;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::selection_log::{latest_per_image, SelectionRecord, NONE_ACCEPTABLE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExportStats {
    pub count: usize,
    pub none_acceptable: usize,
    pub mean_elapsed_ms: Option<f64>,
    pub median_elapsed_ms: Option<f64>,
}

pub fn elapsed_stats(elapsed: &[u64]) -> (Option<f64>, Option<f64>) {
    if elapsed.is_empty() {
        return (None, None);
    }
    let mut v = elapsed.to_vec();
    v.sort_unstable();
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let mid = v.len() / 2;
    let median = if v.len() % 2 == 0 {
        (v[mid - 1] as f64 + v[mid] as f64) / 2.0
    } else {
        v[mid] as f64
    };
    (Some(mean), Some(median))
}

/// Files of an export, relative path and bytes, in a fixed order.
pub struct Export {
    pub files: Vec<(PathBuf, Vec<u8>)>,
    pub stats: ExportStats,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("export json serializes");
    b.push(b'\n');
    b
}

/// Uses the latest record per image across annotators; images whose latest
/// record is "none acceptable" are left out.
pub fn build(ds: &Dataset, records: &[SelectionRecord]) -> anyhow::Result<Export> {
    let latest = latest_per_image(records);
    let mut files = Vec::new();
    let mut entries = Vec::new();
    let mut elapsed = Vec::new();
    let mut none_acceptable = 0;
    for entry in &ds.manifest.entries {
        let Some(rec) = latest.get(&entry.image_id) else {
            continue;
        };
        if rec.candidate_index == NONE_ACCEPTABLE {
            none_acceptable += 1;
            continue;
        }
        let src = ds.candidate_path(&entry.image_id, rec.candidate_index as usize);
        let bytes = fs::read(&src).with_context(|| format!("reading {}", src.display()))?;
        let rel = PathBuf::from(&entry.image_id).join("mask.png");
        let mut e = entry.clone();
        e.mask_path = Some(rel.clone());
        entries.push(e);
        files.push((rel, bytes));
        elapsed.push(rec.elapsed_ms);
    }
    let (mean, median) = elapsed_stats(&elapsed);
    let stats = ExportStats {
        count: files.len(),
        none_acceptable,
        mean_elapsed_ms: mean,
        median_elapsed_ms: median,
    };
    let manifest = DatasetManifest {
        num_classes: ds.manifest.num_classes,
        entries,
    };
    files.push((PathBuf::from("manifest.json"), json_bytes(&manifest)));
    files.push((PathBuf::from("stats.json"), json_bytes(&stats)));
    Ok(Export { files, stats })
}

impl Export {
    pub fn write_to(&self, out: &Path) -> anyhow::Result<()> {
        for (rel, bytes) in &self.files {
            let path = out.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }

    /// Tar archive with zeroed timestamps and ownership.
    pub fn to_tar(&self) -> anyhow::Result<Vec<u8>> {
        let mut builder = tar::Builder::new(Vec::new());
        for (rel, bytes) in &self.files {
            let mut header = tar::Header::new_gnu();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_uid(0);
            header.set_gid(0);
            header.set_cksum();
            builder.append_data(&mut header, rel, bytes.as_slice())?;
        }
        Ok(builder.into_inner()?)
    }
}
