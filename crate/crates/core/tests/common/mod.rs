#![allow(dead_code)]

use maskctl_core::weak_loss::{ScoreMap, TagSet};
use maskctl_core::LabelMask;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_scores(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> ScoreMap {
    let data = (0..classes * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
    ScoreMap::new(classes, h, w, data).unwrap()
}

/// Random tag set; background is always present when `with_background`.
pub fn random_tags(rng: &mut ChaCha8Rng, classes: usize, with_background: bool) -> TagSet {
    let mut ids: Vec<usize> = (1..classes).collect();
    ids.shuffle(rng);
    let count = rng.random_range(1..=3);
    let mut present: Vec<usize> = ids[..count].to_vec();
    if with_background || rng.random_bool(0.5) {
        present.push(0);
    }
    TagSet::new(present, classes).unwrap()
}

/// Binary mask with at least one pixel of each label.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    let n = h * w;
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 0;
    labels[n - 1] = 1;
    LabelMask::new(w, h, labels).unwrap()
}
