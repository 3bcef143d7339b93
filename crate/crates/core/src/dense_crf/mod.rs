//! Fully connected CRF with contrast-sensitive Potts potentials.
//!
//! The pairwise kernel between pixels `i` and `j` is
//!
//! ```text
//! k_ij = w_app    * exp(-|p_i - p_j|^2 / 2 theta_alpha^2 - |c_i - c_j|^2 / 2 theta_beta^2)
//!      + w_smooth * exp(-|p_i - p_j|^2 / 2 theta_gamma^2)
//! ```
//!
//! with `p` the pixel position and `c` its RGB colour. Inference is parallel
//! mean-field where the message sums are computed by Gaussian filtering on
//! a permutohedral lattice. A direct `O(N^2)` path exists for images of at
//! most [`DIRECT_MAX_PIXELS`] pixels and serves as the reference.

pub mod permutohedral;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};
use crate::prior_fusion::HeatMap;
use crate::tensor_store::LabelMask;
pub use crate::tensor_store::RgbImage;
use permutohedral::Lattice;

/// Largest image the direct pairwise summation accepts.
pub const DIRECT_MAX_PIXELS: usize = 4096;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_FOREGROUND: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} at pixel {pixel} is not below {num_labels}")]
    InvalidLabel {
        pixel: usize,
        label: u8,
        num_labels: usize,
    },
    #[error("direct pairwise summation is limited to {DIRECT_MAX_PIXELS} pixels, got {pixels}")]
    DirectTooLarge { pixels: usize },
}

/// Kernel weights, bandwidths and the mean-field iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairwiseConfig {
    pub w_app: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub w_smooth: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        PairwiseConfig {
            w_app: 10.0,
            theta_alpha: 80.0,
            theta_beta: 13.0,
            w_smooth: 3.0,
            theta_gamma: 3.0,
            iterations: 10,
        }
    }
}

impl PairwiseConfig {
    pub fn validate(&self) -> Result<(), CrfError> {
        let weights_ok = [self.w_app, self.w_smooth]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        let bandwidths_ok = [self.theta_alpha, self.theta_beta, self.theta_gamma]
            .iter()
            .all(|t| t.is_finite() && *t > 0.0);
        if !weights_ok {
            return Err(CrfError::InvalidConfig("weights must be finite and >= 0".into()));
        }
        if !bandwidths_ok {
            return Err(CrfError::InvalidConfig("bandwidths must be finite and > 0".into()));
        }
        if self.iterations < 1 {
            return Err(CrfError::InvalidConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// Kernel value between two pixels.
    pub fn kernel(&self, pi: (f64, f64), ci: [u8; 3], pj: (f64, f64), cj: [u8; 3]) -> f64 {
        let dp2 = (pi.0 - pj.0).powi(2) + (pi.1 - pj.1).powi(2);
        let dc2: f64 = (0..3).map(|k| (ci[k] as f64 - cj[k] as f64).powi(2)).sum();
        let app = -dp2 / (2.0 * self.theta_alpha * self.theta_alpha)
            - dc2 / (2.0 * self.theta_beta * self.theta_beta);
        let smooth = -dp2 / (2.0 * self.theta_gamma * self.theta_gamma);
        self.w_app * app.exp() + self.w_smooth * smooth.exp()
    }
}

/// Per-pixel per-label cost (negative log probability), pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    pub num_labels: usize,
    pub width: usize,
    pub height: usize,
    pub cost: Vec<f64>,
}

impl UnaryField {
    pub fn new(num_labels: usize, width: usize, height: usize, cost: Vec<f64>) -> Result<Self, CrfError> {
        if num_labels == 0 || width == 0 || height == 0 || cost.len() != num_labels * width * height {
            return Err(CrfError::ShapeMismatch(format!(
                "{} costs for {num_labels} labels on {width}x{height}",
                cost.len()
            )));
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(CrfError::ShapeMismatch("unary costs must be finite".into()));
        }
        Ok(UnaryField {
            num_labels,
            width,
            height,
            cost,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, pixel: usize) -> &[f64] {
        &self.cost[pixel * self.num_labels..(pixel + 1) * self.num_labels]
    }
}

/// Mean-field marginals, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefField {
    pub num_labels: usize,
    pub width: usize,
    pub height: usize,
    pub q: Vec<f64>,
}

impl BeliefField {
    pub fn at(&self, pixel: usize) -> &[f64] {
        &self.q[pixel * self.num_labels..(pixel + 1) * self.num_labels]
    }

    /// Largest deviation of a per-pixel sum from 1; `None` if any entry is negative or non-finite.
    pub fn normalization_error(&self) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for p in self.q.chunks_exact(self.num_labels) {
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return None;
            }
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }
}

/// Which pairwise-message implementation mean-field uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MessageBackend {
    #[default]
    Permutohedral,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferOptions {
    pub backend: MessageBackend,
    pub exec: Exec,
}

/// Two-label unary costs from a foreground prior: label 1 (foreground) costs
/// `-ln p`, label 0 (background) costs `-ln(1 - p)`, with `p` clamped to
/// `[epsilon, 1 - epsilon]`.
pub fn unary_from_heatmap(h: &HeatMap, epsilon: f64) -> Result<UnaryField, CrfError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(CrfError::InvalidConfig(format!(
            "epsilon {epsilon} outside (0, 0.5)"
        )));
    }
    let mut cost = Vec::with_capacity(2 * h.values.len());
    for &v in &h.values {
        let p = v.clamp(epsilon, 1.0 - epsilon);
        cost.push(-(-p).ln_1p());
        cost.push(-p.ln());
    }
    UnaryField::new(2, h.width, h.height, cost)
}

fn check_image(u: &UnaryField, image: &RgbImage) -> Result<(), CrfError> {
    if u.width != image.width || u.height != image.height {
        return Err(CrfError::ShapeMismatch(format!(
            "unary field is {}x{}, image is {}x{}",
            u.width, u.height, image.width, image.height
        )));
    }
    Ok(())
}

fn check_labels(x: &LabelMask, u: &UnaryField) -> Result<(), CrfError> {
    if x.width != u.width || x.height != u.height {
        return Err(CrfError::ShapeMismatch(format!(
            "labeling is {}x{}, unary field is {}x{}",
            x.width, x.height, u.width, u.height
        )));
    }
    if let Some((pixel, &label)) = x
        .labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= u.num_labels)
    {
        return Err(CrfError::InvalidLabel {
            pixel,
            label,
            num_labels: u.num_labels,
        });
    }
    Ok(())
}

/// Unary and pairwise parts of the Gibbs energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub unary: f64,
    pub pairwise: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.unary + self.pairwise
    }
}

/// Gibbs energy by direct summation over all pixel pairs.
pub fn gibbs_energy(
    x: &LabelMask,
    u: &UnaryField,
    image: &RgbImage,
    cfg: &PairwiseConfig,
) -> Result<f64, CrfError> {
    gibbs_energy_terms(x, u, image, cfg).map(|t| t.total())
}

pub fn gibbs_energy_terms(
    x: &LabelMask,
    u: &UnaryField,
    image: &RgbImage,
    cfg: &PairwiseConfig,
) -> Result<EnergyTerms, CrfError> {
    check_image(u, image)?;
    check_labels(x, u)?;
    let n = u.num_pixels();
    if n > DIRECT_MAX_PIXELS {
        return Err(CrfError::DirectTooLarge { pixels: n });
    }
    let unary = x
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| u.at(i)[l as usize])
        .sum();
    let w = image.width;
    let mut pairwise = 0.0;
    for i in 0..n {
        let pi = ((i % w) as f64, (i / w) as f64);
        for j in i + 1..n {
            if x.labels[i] != x.labels[j] {
                let pj = ((j % w) as f64, (j / w) as f64);
                pairwise += cfg.kernel(pi, image.pixels[i], pj, image.pixels[j]);
            }
        }
    }
    Ok(EnergyTerms { unary, pairwise })
}

/// Gibbs energy with the pairwise part computed through the message filter:
/// half the sum over pixels of the message towards the pixel's own label
/// under a one-hot belief.
pub fn gibbs_energy_filtered(
    x: &LabelMask,
    u: &UnaryField,
    image: &RgbImage,
    cfg: &PairwiseConfig,
    opts: InferOptions,
) -> Result<f64, CrfError> {
    check_image(u, image)?;
    check_labels(x, u)?;
    let l = u.num_labels;
    let mut q = vec![0.0; u.cost.len()];
    for (i, &lab) in x.labels.iter().enumerate() {
        q[i * l + lab as usize] = 1.0;
    }
    let belief = BeliefField {
        num_labels: l,
        width: u.width,
        height: u.height,
        q,
    };
    let msgs = pairwise_messages(&belief, image, cfg, opts)?;
    let unary: f64 = x
        .labels
        .iter()
        .enumerate()
        .map(|(i, &lab)| u.at(i)[lab as usize])
        .sum();
    let pairwise: f64 = x
        .labels
        .iter()
        .enumerate()
        .map(|(i, &lab)| msgs[i * l + lab as usize])
        .sum();
    Ok(unary + 0.5 * pairwise)
}

/// Precomputed Gaussian filters for one image and configuration.
enum MessageFilter<'a> {
    Zero,
    Direct {
        image: &'a RgbImage,
        cfg: PairwiseConfig,
    },
    Lattice {
        appearance: Option<Lattice>,
        smoothness: Option<Lattice>,
        cfg: PairwiseConfig,
    },
}

impl<'a> MessageFilter<'a> {
    fn build(image: &'a RgbImage, cfg: &PairwiseConfig, opts: InferOptions) -> Result<Self, CrfError> {
        if cfg.w_app == 0.0 && cfg.w_smooth == 0.0 {
            return Ok(MessageFilter::Zero);
        }
        match opts.backend {
            MessageBackend::Direct => {
                let n = image.width * image.height;
                if n > DIRECT_MAX_PIXELS {
                    return Err(CrfError::DirectTooLarge { pixels: n });
                }
                Ok(MessageFilter::Direct { image, cfg: *cfg })
            }
            MessageBackend::Permutohedral => {
                let w = image.width;
                let n = image.width * image.height;
                let appearance = (cfg.w_app > 0.0).then(|| {
                    let mut f = Vec::with_capacity(5 * n);
                    for (i, c) in image.pixels.iter().enumerate() {
                        f.push((i % w) as f64 / cfg.theta_alpha);
                        f.push((i / w) as f64 / cfg.theta_alpha);
                        f.extend(c.iter().map(|&v| v as f64 / cfg.theta_beta));
                    }
                    Lattice::new(&f, 5, opts.exec)
                });
                let smoothness = (cfg.w_smooth > 0.0).then(|| {
                    let mut f = Vec::with_capacity(2 * n);
                    for i in 0..n {
                        f.push((i % w) as f64 / cfg.theta_gamma);
                        f.push((i / w) as f64 / cfg.theta_gamma);
                    }
                    Lattice::new(&f, 2, opts.exec)
                });
                Ok(MessageFilter::Lattice {
                    appearance,
                    smoothness,
                    cfg: *cfg,
                })
            }
        }
    }

    /// `out[i, l] = sum_{j != i} k_ij q_j(l)`.
    fn apply(&self, q: &[f64], labels: usize, exec: Exec) -> Vec<f64> {
        match self {
            MessageFilter::Zero => vec![0.0; q.len()],
            MessageFilter::Direct { image, cfg } => {
                let w = image.width;
                let n = image.width * image.height;
                let mut out = vec![0.0; q.len()];
                par::for_each_chunk_mut(exec, &mut out, labels, |i, acc| {
                    let pi = ((i % w) as f64, (i / w) as f64);
                    let ci = image.pixels[i];
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let k = cfg.kernel(pi, ci, ((j % w) as f64, (j / w) as f64), image.pixels[j]);
                        for (a, &qj) in acc.iter_mut().zip(&q[j * labels..(j + 1) * labels]) {
                            *a += k * qj;
                        }
                    }
                });
                out
            }
            MessageFilter::Lattice {
                appearance,
                smoothness,
                cfg,
            } => {
                let mut out = vec![0.0; q.len()];
                for (lattice, dim, weight) in [(appearance, 5, cfg.w_app), (smoothness, 2, cfg.w_smooth)] {
                    if let Some(lat) = lattice {
                        let f = lat.filter(q, labels, exec);
                        let inv_gain = 1.0 / permutohedral::mean_self_gain(dim);
                        // remove the j == i term, whose exact kernel value is 1
                        for ((o, fv), qv) in out.iter_mut().zip(&f).zip(q) {
                            *o += weight * (fv * inv_gain - qv);
                        }
                    }
                }
                out
            }
        }
    }
}

/// Potts messages `m_i(l) = sum_{l' != l} sum_{j != i} k_ij q_j(l')` for every pixel and label.
pub fn pairwise_messages(
    belief: &BeliefField,
    image: &RgbImage,
    cfg: &PairwiseConfig,
    opts: InferOptions,
) -> Result<Vec<f64>, CrfError> {
    if belief.width != image.width || belief.height != image.height {
        return Err(CrfError::ShapeMismatch(format!(
            "belief field is {}x{}, image is {}x{}",
            belief.width, belief.height, image.width, image.height
        )));
    }
    cfg.validate()?;
    let filter = MessageFilter::build(image, cfg, opts)?;
    Ok(potts_messages(&filter, &belief.q, belief.num_labels, opts.exec))
}

fn potts_messages(filter: &MessageFilter<'_>, q: &[f64], labels: usize, exec: Exec) -> Vec<f64> {
    let mut m = filter.apply(q, labels, exec);
    for px in m.chunks_exact_mut(labels) {
        let total: f64 = px.iter().sum();
        for v in px.iter_mut() {
            *v = total - *v;
        }
    }
    m
}

fn softmax_neg_into(costs: &[f64], out: &mut [f64]) {
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &c) in out.iter_mut().zip(costs) {
        *o = (min - c).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn mean_field_infer(
    u: &UnaryField,
    image: &RgbImage,
    cfg: &PairwiseConfig,
) -> Result<BeliefField, CrfError> {
    mean_field_infer_with(u, image, cfg, InferOptions::default())
}

pub fn mean_field_infer_with(
    u: &UnaryField,
    image: &RgbImage,
    cfg: &PairwiseConfig,
    opts: InferOptions,
) -> Result<BeliefField, CrfError> {
    mean_field_infer_traced(u, image, cfg, opts, |_, _| {})
}

/// Runs exactly `cfg.iterations` synchronous mean-field updates, calling
/// `observer(iteration, belief)` after each one (iterations count from 1).
pub fn mean_field_infer_traced<F>(
    u: &UnaryField,
    image: &RgbImage,
    cfg: &PairwiseConfig,
    opts: InferOptions,
    mut observer: F,
) -> Result<BeliefField, CrfError>
where
    F: FnMut(usize, &BeliefField),
{
    check_image(u, image)?;
    cfg.validate()?;
    let labels = u.num_labels;
    let filter = MessageFilter::build(image, cfg, opts)?;

    let mut belief = BeliefField {
        num_labels: labels,
        width: u.width,
        height: u.height,
        q: vec![0.0; u.cost.len()],
    };
    par::for_each_chunk_mut(opts.exec, &mut belief.q, labels, |i, q| {
        softmax_neg_into(u.at(i), q)
    });

    let mut shifted = vec![0.0; u.cost.len()];
    for it in 1..=cfg.iterations {
        let msgs = potts_messages(&filter, &belief.q, labels, opts.exec);
        par::for_each_chunk_mut(opts.exec, &mut shifted, labels, |i, s| {
            for l in 0..labels {
                s[l] = u.cost[i * labels + l] + msgs[i * labels + l];
            }
        });
        par::for_each_chunk_mut(opts.exec, &mut belief.q, labels, |i, q| {
            softmax_neg_into(&shifted[i * labels..(i + 1) * labels], q)
        });
        observer(it, &belief);
    }
    Ok(belief)
}

/// Per-pixel argmax; ties go to the smaller label.
pub fn map_labels(b: &BeliefField) -> LabelMask {
    let labels = b
        .q
        .chunks_exact(b.num_labels)
        .map(|p| {
            let mut best = 0;
            for (l, &v) in p.iter().enumerate().skip(1) {
                if v > p[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect();
    LabelMask {
        width: b.width,
        height: b.height,
        labels,
    }
}

/// Binary mask for a foreground prior: unary construction, mean-field, argmax.
pub fn infer_mask(
    h: &HeatMap,
    image: &RgbImage,
    cfg: &PairwiseConfig,
    epsilon: f64,
    opts: InferOptions,
) -> Result<LabelMask, CrfError> {
    let u = unary_from_heatmap(h, epsilon)?;
    Ok(map_labels(&mean_field_infer_with(&u, image, cfg, opts)?))
}
