use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use maskctl_core::config::PipelineConfig;
use maskctl_core::dense_crf::{self, InferOptions};
use maskctl_core::diverse_mbest::{self, generate_candidates};
use maskctl_core::gradcheck::{check_gradient, sample_indices, DEFAULT_STEP, DEFAULT_TOLERANCE};
use maskctl_core::manifest::{DatasetManifest, ManifestEntry};
use maskctl_core::par::Exec;
use maskctl_core::prior_fusion::{fuse_activations, HeatMap};
use maskctl_core::seg_metrics::{confusion_accumulate, iou_report, ConfusionState};
use maskctl_core::tensor_store::{self, read_tensor, write_tensor};
use maskctl_core::weak_loss::{LossVariant, ScoreMap};
use serde::Serialize;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Ok = 0,
    Usage = 1,
    Data = 2,
    CheckFailed = 3,
}

/// A failure that ends the command before any image is processed.
#[derive(Debug)]
pub enum Fatal {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Fatal {
    fn from(e: E) -> Self {
        Fatal::Data(e.into())
    }
}

pub struct Overrides {
    pub iterations: Option<usize>,
    pub lambda: Option<f64>,
    pub num_candidates: Option<usize>,
    pub r: Option<f64>,
}

pub fn load_config(path: Option<&Path>, o: &Overrides) -> Result<PipelineConfig, Fatal> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(n) = o.iterations {
        cfg.crf.iterations = n;
    }
    if let Some(l) = o.lambda {
        cfg.diversity.lambda = Some(l);
    }
    if let Some(m) = o.num_candidates {
        cfg.diversity.num_candidates = m;
    }
    if let Some(r) = o.r {
        cfg.loss.r = r;
    }
    cfg.validate().map_err(|e| Fatal::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, Fatal> {
    DatasetManifest::load(path)
        .with_context(|| format!("manifest {}", path.display()))
        .map_err(Fatal::Data)
}

fn create_out(dir: &Path) -> Result<(), Fatal> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Fatal::Data)
}

struct Outcome {
    line: String,
    check_failed: bool,
}

impl Outcome {
    fn ok(line: String) -> Self {
        Outcome { line, check_failed: false }
    }
}

fn map_images<T, F>(entries: &[ManifestEntry], f: F) -> Vec<anyhow::Result<T>>
where
    T: Send,
    F: Fn(&ManifestEntry) -> anyhow::Result<T> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        entries.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        entries.iter().map(f).collect()
    }
}

/// Prints one line per image in manifest order and folds the exit status.
fn report(entries: &[ManifestEntry], results: Vec<anyhow::Result<Outcome>>) -> Status {
    let mut status = Status::Ok;
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(o) => {
                println!("{}", o.line);
                if o.check_failed && status == Status::Ok {
                    status = Status::CheckFailed;
                }
            }
            Err(err) => {
                eprintln!("error: {}: {err:#}", e.image_id);
                status = Status::Data;
            }
        }
    }
    status
}

fn heat_map(e: &ManifestEntry) -> anyhow::Result<HeatMap> {
    let layer = |name: &str| -> anyhow::Result<_> {
        let path = e
            .activation(name)
            .ok_or_else(|| anyhow!("no {name} activation listed"))?;
        read_tensor(path).with_context(|| format!("reading {name}"))
    };
    let (w, h) = tensor_store::image_dimensions(&e.image_path)?;
    Ok(fuse_activations(&layer("conv4")?, &layer("conv5")?, w, h)?)
}

fn infer_options() -> InferOptions {
    InferOptions {
        exec: Exec::Parallel,
        ..InferOptions::default()
    }
}

pub fn fuse(manifest: &Path, out: &Path) -> Result<Status, Fatal> {
    let m = load_manifest(manifest)?;
    create_out(out)?;
    let results = map_images(&m.entries, |e| {
        let heat = heat_map(e)?;
        let path = out.join(format!("{}.fgbg", e.image_id));
        write_tensor(&path, &heat.to_tensor())?;
        Ok(Outcome::ok(format!(
            "{}: heat map {}x{} -> {}",
            e.image_id,
            heat.width,
            heat.height,
            path.display()
        )))
    });
    Ok(report(&m.entries, results))
}

pub fn mask(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Status, Fatal> {
    let m = load_manifest(manifest)?;
    create_out(out)?;
    let results = map_images(&m.entries, |e| {
        let heat = heat_map(e)?;
        let image = tensor_store::read_rgb_image(&e.image_path)?;
        let mask = dense_crf::infer_mask(&heat, &image, &cfg.crf, cfg.epsilon, infer_options())?;
        let path = out.join(format!("{}.png", e.image_id));
        tensor_store::write_binary_mask(&path, &mask)?;
        let fg = mask.labels.iter().filter(|&&l| l == 1).count();
        Ok(Outcome::ok(format!(
            "{}: mask {}x{}, foreground {:.1}% -> {}",
            e.image_id,
            mask.width,
            mask.height,
            100.0 * fg as f64 / mask.len() as f64,
            path.display()
        )))
    });
    Ok(report(&m.entries, results))
}

pub fn candidates(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Status, Fatal> {
    let m = load_manifest(manifest)?;
    create_out(out)?;
    let results = map_images(&m.entries, |e| {
        let heat = heat_map(e)?;
        let image = tensor_store::read_rgb_image(&e.image_path)?;
        let u = dense_crf::unary_from_heatmap(&heat, cfg.epsilon)?;
        let set = generate_candidates(&e.image_id, &u, &image, &cfg.crf, &cfg.diversity, infer_options())?;
        let dir = out.join(&e.image_id);
        diverse_mbest::write_candidate_set(&dir, &set)?;
        let count = set.candidates.len();
        let distinct = (0..count)
            .filter(|&a| (0..a).all(|b| set.candidates[a] != set.candidates[b]))
            .count();
        let (lo, hi) = set
            .energies
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Outcome::ok(format!(
            "{}: {count} candidates ({distinct} distinct), lambda {:.6}, energy {lo:.4}..{hi:.4} -> {}",
            e.image_id,
            set.lambda,
            dir.display()
        )))
    });
    Ok(report(&m.entries, results))
}

#[derive(Serialize)]
struct LossCheck {
    checked: usize,
    max_rel_err: f64,
    max_abs_err: f64,
    passed: bool,
}

#[derive(Serialize)]
struct LossRecord {
    image_id: String,
    value: f64,
    gradcheck: LossCheck,
}

#[derive(Serialize)]
struct LossFile<'a> {
    variant: &'a str,
    r: f64,
    images: Vec<LossRecord>,
}

/// All coordinates up to this size, otherwise a fixed sample of [`SAMPLED_COORDS`].
const FULL_CHECK_LIMIT: usize = 2048;
const SAMPLED_COORDS: usize = 256;

fn loss_one(e: &ManifestEntry, m: &DatasetManifest, cfg: &PipelineConfig, variant: LossVariant) -> anyhow::Result<LossRecord> {
    let score_path = e.score_path.as_ref().ok_or_else(|| anyhow!("no score_path listed"))?;
    let s = ScoreMap::from_tensor(&read_tensor(score_path)?)?;
    let tags = e.tag_set(m.num_classes)?;
    let mask = if variant.needs_mask() {
        let p = e.mask_path.as_ref().ok_or_else(|| anyhow!("variant {} needs mask_path", variant.name()))?;
        Some(tensor_store::read_binary_mask(p)?)
    } else {
        None
    };
    let report = variant.evaluate(&s, &tags, mask.as_ref(), &cfg.loss)?;
    let len = s.data.len();
    let limit = if len <= FULL_CHECK_LIMIT { len } else { SAMPLED_COORDS };
    let indices = sample_indices(len, limit);
    let check = check_gradient(&s.data, &report.grad.data, DEFAULT_STEP, &indices, Exec::Parallel, |x| {
        let probe = ScoreMap { data: x.to_vec(), ..s.clone() };
        variant
            .evaluate(&probe, &tags, mask.as_ref(), &cfg.loss)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    });
    Ok(LossRecord {
        image_id: e.image_id.clone(),
        value: report.value,
        gradcheck: LossCheck {
            checked: check.checked,
            max_rel_err: check.max_rel_err,
            max_abs_err: check.max_abs_err,
            passed: check.passes(DEFAULT_TOLERANCE),
        },
    })
}

pub fn loss(manifest: &Path, cfg: &PipelineConfig, variant: LossVariant, out: Option<&Path>) -> Result<Status, Fatal> {
    let m = load_manifest(manifest)?;
    if let Some(dir) = out {
        create_out(dir)?;
    }
    let records = map_images(&m.entries, |e| loss_one(e, &m, cfg, variant));
    let mut kept = Vec::new();
    let outcomes = records
        .into_iter()
        .map(|r| {
            r.map(|rec| {
                let o = Outcome {
                    line: format!(
                        "{}: {} loss {:.6} gradcheck {} (max rel err {:.2e} over {} coords)",
                        rec.image_id,
                        variant.name(),
                        rec.value,
                        if rec.gradcheck.passed { "pass" } else { "FAIL" },
                        rec.gradcheck.max_rel_err,
                        rec.gradcheck.checked
                    ),
                    check_failed: !rec.gradcheck.passed,
                };
                kept.push(rec);
                o
            })
        })
        .collect();
    let status = report(&m.entries, outcomes);
    if let Some(dir) = out {
        let file = LossFile {
            variant: variant.name(),
            r: cfg.loss.r,
            images: kept,
        };
        let path = dir.join(format!("loss_{}.json", variant.name()));
        let mut bytes = serde_json::to_vec_pretty(&file).expect("loss report serializes");
        bytes.push(b'\n');
        fs::write(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Fatal::Data)?;
    }
    Ok(status)
}

fn png_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn eval(pred_dir: &Path, gt_dir: &Path, num_classes: usize, json: bool) -> Result<Status, Fatal> {
    if num_classes == 0 || num_classes > 255 {
        return Err(Fatal::Usage(format!("--num-classes {num_classes} outside 1..=255")));
    }
    let gt = png_names(gt_dir)?;
    let pred = png_names(pred_dir)?;
    let missing: Vec<PathBuf> = gt
        .iter()
        .filter(|n| !pred.contains(n))
        .map(|n| pred_dir.join(n))
        .chain(pred.iter().filter(|n| !gt.contains(n)).map(|n| gt_dir.join(n)))
        .collect();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Fatal::Data(anyhow!("missing file(s): {}", list.join(", "))));
    }
    let mut state = ConfusionState::new(num_classes);
    for name in &gt {
        let p = tensor_store::read_label_mask(pred_dir.join(name), num_classes)?;
        let g = tensor_store::read_label_mask(gt_dir.join(name), num_classes)?;
        confusion_accumulate(&p, &g, &mut state).with_context(|| name.clone())?;
    }
    let report = iou_report(&state).map_err(|e| Fatal::Data(anyhow!("{e}")))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    Ok(Status::Ok)
}
