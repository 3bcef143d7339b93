//! Diverse low-energy mask candidates.
//!
//! Each new candidate is the mean-field MAP of a unary field that rewards
//! disagreeing with every earlier candidate: a Hamming-distance bonus of
//! `lambda` per differing pixel per previous solution. Since the bonus is
//! purely unary, the pairwise filters are untouched.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense_crf::{
    self, gibbs_energy_filtered, mean_field_infer_with, CrfError, InferOptions, MessageBackend,
    PairwiseConfig, RgbImage, UnaryField, DIRECT_MAX_PIXELS,
};
use crate::tensor_store::{self, LabelMask, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityConfig {
    /// Diversity weight; `None` picks `0.1 * mean(|cost|)` of the unary field.
    pub lambda: Option<f64>,
    pub num_candidates: usize,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            lambda: None,
            num_candidates: 30,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<(), CrfError> {
        if self.num_candidates < 1 {
            return Err(CrfError::InvalidConfig("num_candidates must be >= 1".into()));
        }
        match self.lambda {
            Some(l) if !l.is_finite() || l < 0.0 => Err(CrfError::InvalidConfig(format!(
                "lambda {l} must be finite and >= 0"
            ))),
            _ => Ok(()),
        }
    }

    pub fn resolve_lambda(&self, u: &UnaryField) -> f64 {
        self.lambda.unwrap_or_else(|| default_lambda(u))
    }
}

pub fn default_lambda(u: &UnaryField) -> f64 {
    let mean = u.cost.iter().map(|c| c.abs()).sum::<f64>() / u.cost.len() as f64;
    0.1 * mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub image_id: String,
    pub lambda: f64,
    pub candidates: Vec<LabelMask>,
    /// Unaugmented Gibbs energy of each candidate.
    pub energies: Vec<f64>,
}

impl CandidateSet {
    /// Number of candidate pairs that coincide (kept so indices stay stable).
    pub fn duplicate_pairs(&self) -> usize {
        let c = &self.candidates;
        (0..c.len())
            .flat_map(|a| (a + 1..c.len()).map(move |b| (a, b)))
            .filter(|&(a, b)| c[a] == c[b])
            .count()
    }
}

/// `cost'_i(l) = cost_i(l) - lambda * #{m : previous_m(i) != l}`.
pub fn augment_unary(u: &UnaryField, previous: &[LabelMask], lambda: f64) -> Result<UnaryField, CrfError> {
    let l = u.num_labels;
    let mut out = u.clone();
    for prev in previous {
        if prev.width != u.width || prev.height != u.height {
            return Err(CrfError::ShapeMismatch(format!(
                "previous solution is {}x{}, unary field is {}x{}",
                prev.width, prev.height, u.width, u.height
            )));
        }
        for (i, &p) in prev.labels.iter().enumerate() {
            if p as usize >= l {
                return Err(CrfError::InvalidLabel {
                    pixel: i,
                    label: p,
                    num_labels: l,
                });
            }
            for (lab, c) in out.cost[i * l..(i + 1) * l].iter_mut().enumerate() {
                if lab != p as usize {
                    *c -= lambda;
                }
            }
        }
    }
    Ok(out)
}

/// Generates `div_cfg.num_candidates` masks; candidate 0 is the plain MAP.
pub fn generate_candidates(
    image_id: &str,
    u: &UnaryField,
    image: &RgbImage,
    crf_cfg: &PairwiseConfig,
    div_cfg: &DiversityConfig,
    opts: InferOptions,
) -> Result<CandidateSet, CrfError> {
    div_cfg.validate()?;
    let lambda = div_cfg.resolve_lambda(u);
    let energy_opts = InferOptions {
        backend: if u.num_pixels() <= DIRECT_MAX_PIXELS {
            MessageBackend::Direct
        } else {
            MessageBackend::Permutohedral
        },
        exec: opts.exec,
    };
    let mut candidates: Vec<LabelMask> = Vec::with_capacity(div_cfg.num_candidates);
    let mut energies = Vec::with_capacity(div_cfg.num_candidates);
    for _ in 0..div_cfg.num_candidates {
        let augmented = augment_unary(u, &candidates, lambda)?;
        let belief = mean_field_infer_with(&augmented, image, crf_cfg, opts)?;
        let mask = dense_crf::map_labels(&belief);
        energies.push(gibbs_energy_filtered(&mask, u, image, crf_cfg, energy_opts)?);
        candidates.push(mask);
    }
    Ok(CandidateSet {
        image_id: image_id.to_string(),
        lambda,
        candidates,
        energies,
    })
}

#[derive(Debug, Error)]
pub enum CandidateIoError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: invalid candidate metadata: {source}")]
    Meta {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Contents of `meta.json` next to the candidate PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMeta {
    pub image_id: String,
    pub lambda: f64,
    pub energies: Vec<f64>,
}

impl CandidateMeta {
    pub fn num_candidates(&self) -> usize {
        self.energies.len()
    }
}

pub fn candidate_file_name(index: usize) -> String {
    format!("candidate_{index}.png")
}

pub const META_FILE: &str = "meta.json";

/// Writes `candidate_<m>.png` (0/255) for `m = 0..M` plus `meta.json`.
pub fn write_candidate_set(dir: &Path, set: &CandidateSet) -> Result<(), CandidateIoError> {
    fs::create_dir_all(dir).map_err(|source| CandidateIoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (m, mask) in set.candidates.iter().enumerate() {
        tensor_store::write_binary_mask(dir.join(candidate_file_name(m)), mask)?;
    }
    let meta = CandidateMeta {
        image_id: set.image_id.clone(),
        lambda: set.lambda,
        energies: set.energies.clone(),
    };
    let path = dir.join(META_FILE);
    let mut bytes = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|source| CandidateIoError::Io { path, source })
}

pub fn read_candidate_meta(dir: &Path) -> Result<CandidateMeta, CandidateIoError> {
    let path = dir.join(META_FILE);
    let bytes = fs::read(&path).map_err(|source| CandidateIoError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| CandidateIoError::Meta { path, source })
}

pub fn read_candidate_set(dir: &Path) -> Result<CandidateSet, CandidateIoError> {
    let meta = read_candidate_meta(dir)?;
    let candidates = (0..meta.num_candidates())
        .map(|m| tensor_store::read_binary_mask(dir.join(candidate_file_name(m))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CandidateSet {
        image_id: meta.image_id,
        lambda: meta.lambda,
        candidates,
        energies: meta.energies,
    })
}
