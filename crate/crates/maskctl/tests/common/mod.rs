#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskctl_core::tensor_store::{write_binary_mask, write_label_mask, write_rgb_image, write_tensor};
use maskctl_core::{LabelMask, RgbImage, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const SIDE: usize = 32;
pub const CLASSES: usize = 21;

pub fn maskctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskctl"))
        .args(args)
        .output()
        .expect("maskctl runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Disk centre and radius (pixels) of image `k`.
pub fn blob(k: usize) -> (f64, f64, f64) {
    let cx = 10.0 + 6.0 * k as f64;
    let cy = 20.0 - 4.0 * k as f64;
    (cx, cy, 6.0)
}

fn activations(rng: &mut ChaCha8Rng, k: usize, channels: usize, side: usize) -> Tensor {
    let (cx, cy, r) = blob(k);
    let scale = (SIDE - 1) as f64 / (side - 1) as f64;
    let mut v = Vec::with_capacity(channels * side * side);
    for c in 0..channels {
        let gain = 0.5 + c as f64 / channels as f64;
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f64 * scale - cx).powi(2) + (y as f64 * scale - cy).powi(2);
                let s = gain * (-d2 / (2.0 * r * r)).exp() + rng.random_range(0.0..0.1);
                v.push(s as f32);
            }
        }
    }
    Tensor::new(vec![channels, side, side], v).unwrap()
}

fn image(rng: &mut ChaCha8Rng, k: usize) -> RgbImage {
    let (cx, cy, r) = blob(k);
    let pixels = (0..SIDE * SIDE)
        .map(|i| {
            let (x, y) = ((i % SIDE) as f64, (i / SIDE) as f64);
            let inside = (x - cx).hypot(y - cy) <= r;
            let base: [i32; 3] = if inside { [200, 60, 50] } else { [40, 90, 140] };
            base.map(|b| (b + rng.random_range(-8..=8)).clamp(0, 255) as u8)
        })
        .collect();
    RgbImage::new(SIDE, SIDE, pixels).unwrap()
}

fn disk_mask(k: usize, label: u8) -> LabelMask {
    let (cx, cy, r) = blob(k);
    let labels = (0..SIDE * SIDE)
        .map(|i| {
            let (x, y) = ((i % SIDE) as f64, (i / SIDE) as f64);
            if (x - cx).hypot(y - cy) <= r { label } else { 0 }
        })
        .collect();
    LabelMask::new(SIDE, SIDE, labels).unwrap()
}

/// Writes `count` synthetic images with activations, scores, tags, masks and
/// ground truth plus `manifest.json`; returns the manifest path.
pub fn write_dataset(dir: &Path, count: usize) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut entries = Vec::new();
    for k in 0..count {
        let id = format!("img{k:03}");
        let class = 1 + (k * 7) % (CLASSES - 1);
        write_rgb_image(dir.join(format!("{id}.png")), &image(&mut rng, k)).unwrap();
        write_tensor(dir.join(format!("{id}_conv4.fgbg")), &activations(&mut rng, k, 16, 8)).unwrap();
        write_tensor(dir.join(format!("{id}_conv5.fgbg")), &activations(&mut rng, k, 16, 4)).unwrap();
        let scores: Vec<f32> = (0..CLASSES * SIDE * SIDE).map(|_| rng.random_range(-2.0..2.0)).collect();
        write_tensor(
            dir.join(format!("{id}_scores.fgbg")),
            &Tensor::new(vec![CLASSES, SIDE, SIDE], scores).unwrap(),
        )
        .unwrap();
        write_binary_mask(dir.join(format!("{id}_mask.png")), &disk_mask(k, 1)).unwrap();
        write_label_mask(dir.join(format!("{id}_gt.png")), &disk_mask(k, class as u8)).unwrap();
        entries.push(json!({
            "image_id": id,
            "image_path": format!("{id}.png"),
            "activation_paths": {
                "conv4": format!("{id}_conv4.fgbg"),
                "conv5": format!("{id}_conv5.fgbg"),
            },
            "score_path": format!("{id}_scores.fgbg"),
            "tags": [0, class],
            "mask_path": format!("{id}_mask.png"),
            "ground_truth_path": format!("{id}_gt.png"),
        }));
    }
    let manifest = dir.join("manifest.json");
    let body = json!({ "num_classes": CLASSES, "entries": entries });
    std::fs::write(&manifest, serde_json::to_vec_pretty(&body).unwrap()).unwrap();
    manifest
}

/// Every regular file under `dir`, relative path and contents, sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
