mod common;

use maskctl_core::dense_crf::*;
use maskctl_core::par::Exec;
use maskctl_core::LabelMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    let pixels = (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    RgbImage::new(w, h, pixels).unwrap()
}

fn random_unary(rng: &mut ChaCha8Rng, w: usize, h: usize) -> UnaryField {
    let cost = (0..2 * w * h).map(|_| rng.random_range(0.0..5.0)).collect();
    UnaryField::new(2, w, h, cost).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng) -> PairwiseConfig {
    PairwiseConfig {
        w_app: rng.random_range(0.0..10.0),
        theta_alpha: rng.random_range(0.5..80.0),
        theta_beta: rng.random_range(1.0..50.0),
        w_smooth: rng.random_range(0.0..5.0),
        theta_gamma: rng.random_range(0.5..5.0),
        iterations: 10,
    }
}

fn labeling(w: usize, h: usize, bits: usize) -> LabelMask {
    LabelMask::new(w, h, (0..w * h).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap()
}

/// Sum over ordered pairs, halved; written from the kernel definition.
fn oracle_energy(x: &LabelMask, u: &UnaryField, img: &RgbImage, c: &PairwiseConfig) -> f64 {
    let n = x.labels.len();
    let w = x.width;
    let mut unary = 0.0;
    let mut pair = 0.0;
    for i in 0..n {
        unary += u.cost[i * 2 + x.labels[i] as usize];
        for j in 0..n {
            if i == j || x.labels[i] == x.labels[j] {
                continue;
            }
            let dx = (i % w) as f64 - (j % w) as f64;
            let dy = (i / w) as f64 - (j / w) as f64;
            let dp2 = dx * dx + dy * dy;
            let (a, b) = (img.pixels[i], img.pixels[j]);
            let dc2: f64 = (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum();
            let app = (-dp2 / (2.0 * c.theta_alpha.powi(2)) - dc2 / (2.0 * c.theta_beta.powi(2))).exp();
            let smooth = (-dp2 / (2.0 * c.theta_gamma.powi(2))).exp();
            pair += 0.5 * (c.w_app * app + c.w_smooth * smooth);
        }
    }
    unary + pair
}

fn oracle_messages(q: &[f64], img: &RgbImage, c: &PairwiseConfig) -> Vec<f64> {
    let n = img.width * img.height;
    let w = img.width;
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = |k: usize| ((k % w) as f64, (k / w) as f64);
            let k = c.kernel(p(i), img.pixels[i], p(j), img.pixels[j]);
            out[2 * i] += k * q[2 * j + 1];
            out[2 * i + 1] += k * q[2 * j];
        }
    }
    out
}

fn direct() -> InferOptions {
    InferOptions {
        backend: MessageBackend::Direct,
        exec: Exec::Sequential,
    }
}

#[test]
fn energy_matches_exhaustive_oracle() {
    let mut rng = common::rng(21);
    for case in 0..50 {
        let side = if case % 2 == 0 { 2 } else { 3 };
        let img = random_image(&mut rng, side, side);
        let u = random_unary(&mut rng, side, side);
        let cfg = random_config(&mut rng);
        for bits in 0..1usize << (side * side) {
            let x = labeling(side, side, bits);
            let e = gibbs_energy(&x, &u, &img, &cfg).unwrap();
            let o = oracle_energy(&x, &u, &img, &cfg);
            assert!((e - o).abs() < 1e-9, "case {case} bits {bits}: {e} vs {o}");
        }
    }
}

#[test]
fn swapping_labels_and_costs_preserves_energy() {
    let mut rng = common::rng(22);
    for _ in 0..20 {
        let img = random_image(&mut rng, 3, 3);
        let u = random_unary(&mut rng, 3, 3);
        let swapped_cost: Vec<f64> = u.cost.chunks(2).flat_map(|c| [c[1], c[0]]).collect();
        let us = UnaryField::new(2, 3, 3, swapped_cost).unwrap();
        let cfg = random_config(&mut rng);
        let bits = rng.random_range(0..512);
        let x = labeling(3, 3, bits);
        let xs = labeling(3, 3, !bits & 511);
        let a = gibbs_energy(&x, &u, &img, &cfg).unwrap();
        let b = gibbs_energy(&xs, &us, &img, &cfg).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn direct_messages_match_oracle() {
    let mut rng = common::rng(23);
    for _ in 0..10 {
        let img = random_image(&mut rng, 3, 3);
        let cfg = random_config(&mut rng);
        let q: Vec<f64> = (0..9).flat_map(|_| {
            let p: f64 = rng.random();
            [p, 1.0 - p]
        }).collect();
        let b = BeliefField { num_labels: 2, width: 3, height: 3, q: q.clone() };
        let m = pairwise_messages(&b, &img, &cfg, direct()).unwrap();
        for (a, o) in m.iter().zip(oracle_messages(&q, &img, &cfg)) {
            assert!((a - o).abs() < 1e-9);
        }
    }
}

#[test]
fn filtered_energy_with_direct_backend_matches_pair_sum() {
    let mut rng = common::rng(24);
    let img = random_image(&mut rng, 4, 4);
    let u = random_unary(&mut rng, 4, 4);
    let cfg = PairwiseConfig::default();
    for bits in [0usize, 1, 0x0f0f, 0xffff, 0x1234] {
        let x = labeling(4, 4, bits);
        let a = gibbs_energy(&x, &u, &img, &cfg).unwrap();
        let b = gibbs_energy_filtered(&x, &u, &img, &cfg, direct()).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }
}

/// The lattice is an approximation: mean relative error of the messages
/// stays well below the message scale on a 16x16 textured image.
#[test]
fn lattice_messages_track_direct_messages() {
    let mut rng = common::rng(25);
    let img = random_image(&mut rng, 16, 16);
    let q: Vec<f64> = (0..256).flat_map(|_| {
        let p: f64 = rng.random();
        [p, 1.0 - p]
    }).collect();
    let b = BeliefField { num_labels: 2, width: 16, height: 16, q };
    let cfg = PairwiseConfig::default();
    let d = pairwise_messages(&b, &img, &cfg, direct()).unwrap();
    let l = pairwise_messages(&b, &img, &cfg, InferOptions::default()).unwrap();
    let rel = d.iter().zip(&l).map(|(a, b)| (a - b).abs()).sum::<f64>() / d.iter().sum::<f64>();
    assert!(rel < 0.5, "mean relative deviation {rel}");
}

#[test]
fn beliefs_stay_normalized_every_iteration() {
    let mut rng = common::rng(26);
    for backend in [MessageBackend::Direct, MessageBackend::Permutohedral] {
        let img = random_image(&mut rng, 16, 16);
        let u = random_unary(&mut rng, 16, 16);
        let cfg = PairwiseConfig::default();
        let mut seen = 0;
        let opts = InferOptions { backend, exec: Exec::Parallel };
        mean_field_infer_traced(&u, &img, &cfg, opts, |_, b| {
            let err = b.normalization_error().expect("non-finite or negative belief");
            assert!(err <= 1e-6, "{err}");
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, cfg.iterations);
    }
}

#[test]
fn zero_pairwise_reduces_to_unary_argmin() {
    let mut rng = common::rng(27);
    for _ in 0..20 {
        let img = random_image(&mut rng, 8, 8);
        let u = random_unary(&mut rng, 8, 8);
        let cfg = PairwiseConfig { w_app: 0.0, w_smooth: 0.0, ..PairwiseConfig::default() };
        let x = map_labels(&mean_field_infer(&u, &img, &cfg).unwrap());
        let expected: Vec<u8> = u.cost.chunks(2).map(|c| (c[1] < c[0]) as u8).collect();
        assert_eq!(x.labels, expected);
    }
}

#[test]
fn mean_field_map_is_bounded_below_by_exhaustive_minimum() {
    let mut rng = common::rng(28);
    for _ in 0..20 {
        let img = random_image(&mut rng, 3, 3);
        let u = random_unary(&mut rng, 3, 3);
        let cfg = random_config(&mut rng);
        let min = (0..512)
            .map(|bits| gibbs_energy(&labeling(3, 3, bits), &u, &img, &cfg).unwrap())
            .fold(f64::INFINITY, f64::min);
        let x = map_labels(&mean_field_infer_with(&u, &img, &cfg, direct()).unwrap());
        assert!(gibbs_energy(&x, &u, &img, &cfg).unwrap() >= min - 1e-12);
    }
}

#[test]
fn parallel_and_sequential_inference_agree() {
    let mut rng = common::rng(29);
    let img = random_image(&mut rng, 24, 20);
    let u = random_unary(&mut rng, 24, 20);
    let cfg = PairwiseConfig::default();
    for backend in [MessageBackend::Direct, MessageBackend::Permutohedral] {
        let seq = mean_field_infer_with(&u, &img, &cfg, InferOptions { backend, exec: Exec::Sequential }).unwrap();
        let par = mean_field_infer_with(&u, &img, &cfg, InferOptions { backend, exec: Exec::Parallel }).unwrap();
        assert_eq!(seq, par);
    }
}

#[test]
fn direct_path_rejects_large_images() {
    let img = RgbImage::uniform(65, 64, [0, 0, 0]);
    let u = UnaryField::new(2, 65, 64, vec![0.5; 2 * 65 * 64]).unwrap();
    let err = mean_field_infer_with(&u, &img, &PairwiseConfig::default(), direct()).unwrap_err();
    assert_eq!(err, CrfError::DirectTooLarge { pixels: 65 * 64 });
}
