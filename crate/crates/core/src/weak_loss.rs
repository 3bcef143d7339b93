//! Weakly supervised segmentation losses over raw class scores.
//!
//! All losses take the network's raw per-pixel scores `s[k, y, x]`, apply a
//! per-pixel softmax internally and return the value together with the
//! analytic gradient with respect to `s`. Class-presence maxima are
//! softened with log-sum-exp pooling of sharpness `r`:
//!
//! ```text
//! lse_r(v) = (1 / r) * ln( mean_a exp(r * v_a) )
//! ```
//!
//! Four variants are provided:
//!
//! * [`loss_weak_tags`]: image tags only, pooling each class over the image.
//! * [`loss_mask`]: tags plus a foreground mask; present classes are pooled
//!   over the foreground, background over the rest.
//! * [`loss_weak_alt`]: tags only, pooling over present classes per pixel.
//! * [`loss_mask_alt`]: per-pixel variant of the mask loss.
//!
//! Means over empty sets are 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_store::{LabelMask, Tensor};

/// Upper clamp on probabilities entering `ln(1 - S)`.
pub const MAX_PROB: f64 = 1.0 - 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("log-sum-exp over an empty set")]
    EmptySet,
    #[error("mask has no foreground pixel")]
    EmptyForeground,
    #[error("mask has no background pixel")]
    EmptyBackground,
    #[error("background class 0 must be tagged present for mask losses")]
    MissingBackgroundTag,
    #[error("invalid tags: {0}")]
    InvalidTags(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Per-class maps laid out `classes x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Softmax output; same layout as [`ScoreMap`].
pub type ProbMap = ScoreMap;

impl ScoreMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if classes == 0 || height == 0 || width == 0 || data.len() != classes * height * width {
            return Err(LossError::ShapeMismatch(format!(
                "{} values for {classes}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LossError::ShapeMismatch("scores must be finite".into()));
        }
        Ok(ScoreMap {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn zeros_like(other: &ScoreMap) -> Self {
        ScoreMap {
            data: vec![0.0; other.data.len()],
            ..*other
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, LossError> {
        match *t.dims() {
            [c, h, w] => ScoreMap::new(c, h, w, t.data().iter().map(|&v| v as f64).collect()),
            ref d => Err(LossError::ShapeMismatch(format!(
                "score map must be rank 3, got dims {d:?}"
            ))),
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.num_pixels();
        &self.data[k * n..(k + 1) * n]
    }

    fn plane_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.num_pixels();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, pixel: usize) -> f64 {
        self.data[k * self.num_pixels() + pixel]
    }
}

/// Present / absent class partition of `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    present: Vec<usize>,
    absent: Vec<usize>,
}

impl TagSet {
    pub fn new(present: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Self, LossError> {
        let mut flags = vec![false; num_classes];
        for k in present {
            if k >= num_classes {
                return Err(LossError::InvalidTags(format!(
                    "class {k} is not below {num_classes}"
                )));
            }
            flags[k] = true;
        }
        let present: Vec<usize> = (0..num_classes).filter(|&k| flags[k]).collect();
        if present.is_empty() {
            return Err(LossError::InvalidTags("no class is present".into()));
        }
        let absent = (0..num_classes).filter(|&k| !flags[k]).collect();
        Ok(TagSet { present, absent })
    }

    pub fn present(&self) -> &[usize] {
        &self.present
    }

    pub fn absent(&self) -> &[usize] {
        &self.absent
    }

    pub fn num_classes(&self) -> usize {
        self.present.len() + self.absent.len()
    }

    /// Present classes other than background.
    pub fn present_foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().copied().filter(|&k| k != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Log-sum-exp sharpness.
    pub r: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { r: 5.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.r.is_finite() && self.r > 0.0 {
            Ok(())
        } else {
            Err(LossError::InvalidConfig(format!("r = {} must be finite and > 0", self.r)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad: ScoreMap,
}

/// Which loss a caller wants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Weak,
    Mask,
    WeakAlt,
    MaskAlt,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Weak,
        LossVariant::Mask,
        LossVariant::WeakAlt,
        LossVariant::MaskAlt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Weak => "weak",
            LossVariant::Mask => "mask",
            LossVariant::WeakAlt => "weak_alt",
            LossVariant::MaskAlt => "mask_alt",
        }
    }

    pub fn needs_mask(self) -> bool {
        matches!(self, LossVariant::Mask | LossVariant::MaskAlt)
    }

    pub fn evaluate(
        self,
        s: &ScoreMap,
        tags: &TagSet,
        mask: Option<&LabelMask>,
        cfg: &LossConfig,
    ) -> Result<LossReport, LossError> {
        let need_mask = || mask.ok_or(LossError::EmptyForeground);
        match self {
            LossVariant::Weak => loss_weak_tags(s, tags, cfg),
            LossVariant::WeakAlt => loss_weak_alt(s, tags, cfg),
            LossVariant::Mask => loss_mask(s, tags, need_mask()?, cfg),
            LossVariant::MaskAlt => loss_mask_alt(s, tags, need_mask()?, cfg),
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown loss variant {s:?} (expected weak, mask, weak_alt or mask_alt)"))
    }
}

/// Per-pixel softmax over classes, with max subtraction.
pub fn softmax_probs(s: &ScoreMap) -> ProbMap {
    let n = s.num_pixels();
    let mut out = ScoreMap::zeros_like(s);
    for p in 0..n {
        let max = (0..s.classes)
            .map(|k| s.data[k * n + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..s.classes {
            let e = (s.data[k * n + p] - max).exp();
            out.data[k * n + p] = e;
            z += e;
        }
        for k in 0..s.classes {
            out.data[k * n + p] /= z;
        }
    }
    out
}

/// `(1 / r) * ln(mean(exp(r * v)))`.
pub fn lse_pool(values: &[f64], r: f64) -> Result<f64, LossError> {
    lse_with_weights(values.iter().copied(), r).map(|(v, _)| v)
}

/// LSE value and its partial derivatives `softmax(r * v)`.
fn lse_with_weights(values: impl Iterator<Item = f64>, r: f64) -> Result<(f64, Vec<f64>), LossError> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return Err(LossError::EmptySet);
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = v.iter().map(|&x| (r * (x - max)).exp()).collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    let value = max + (sum / v.len() as f64).ln() / r;
    Ok((value, w))
}

/// `ln(1 - s)` with `s` clamped to [`MAX_PROB`], and its derivative.
fn log1m(s: f64) -> (f64, f64) {
    if s < MAX_PROB {
        ((-s).ln_1p(), -1.0 / (1.0 - s))
    } else {
        ((-MAX_PROB).ln_1p(), 0.0)
    }
}

fn mean_weight(count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        1.0 / count as f64
    }
}

fn check_inputs(s: &ScoreMap, tags: &TagSet, cfg: &LossConfig) -> Result<(), LossError> {
    cfg.validate()?;
    if tags.num_classes() != s.classes {
        return Err(LossError::ShapeMismatch(format!(
            "tags cover {} classes, scores have {}",
            tags.num_classes(),
            s.classes
        )));
    }
    Ok(())
}

/// Foreground pixel flags after validating the mask against the scores.
fn check_mask(s: &ScoreMap, tags: &TagSet, m: &LabelMask) -> Result<Vec<bool>, LossError> {
    if !tags.present().contains(&0) {
        return Err(LossError::MissingBackgroundTag);
    }
    if m.width != s.width || m.height != s.height {
        return Err(LossError::ShapeMismatch(format!(
            "mask is {}x{}, scores are {}x{}",
            m.width, m.height, s.width, s.height
        )));
    }
    if let Some(&l) = m.labels.iter().find(|&&l| l > 1) {
        return Err(LossError::ShapeMismatch(format!(
            "mask label {l} is not binary"
        )));
    }
    let fg: Vec<bool> = m.labels.iter().map(|&l| l == 1).collect();
    if !fg.iter().any(|&f| f) {
        return Err(LossError::EmptyForeground);
    }
    if fg.iter().all(|&f| f) {
        return Err(LossError::EmptyBackground);
    }
    Ok(fg)
}

/// Chain rule through the per-pixel softmax:
/// `dL/ds_k = S_k * (dL/dS_k - sum_c S_c dL/dS_c)`.
fn softmax_backward(probs: &ProbMap, d_probs: &ScoreMap) -> ScoreMap {
    let n = probs.num_pixels();
    let mut grad = ScoreMap::zeros_like(probs);
    for p in 0..n {
        let dot: f64 = (0..probs.classes)
            .map(|k| probs.data[k * n + p] * d_probs.data[k * n + p])
            .sum();
        for k in 0..probs.classes {
            let i = k * n + p;
            grad.data[i] = probs.data[i] * (d_probs.data[i] - dot);
        }
    }
    grad
}

/// Absent-class term `-coef * sum_{p, k absent} ln(1 - S[k, p])`, accumulated into `value` and `d_probs`.
fn absent_pixel_term(probs: &ProbMap, tags: &TagSet, coef: f64, value: &mut f64, d_probs: &mut ScoreMap) {
    for &k in tags.absent() {
        let plane = probs.plane(k);
        let dst = d_probs.plane_mut(k);
        for (d, &sp) in dst.iter_mut().zip(plane) {
            let (l, dl) = log1m(sp);
            *value -= coef * l;
            *d -= coef * dl;
        }
    }
}

/// Image-tag loss with per-class LSE pooling over all pixels.
pub fn loss_weak_tags(s: &ScoreMap, tags: &TagSet, cfg: &LossConfig) -> Result<LossReport, LossError> {
    check_inputs(s, tags, cfg)?;
    let probs = softmax_probs(s);
    let mut d_probs = ScoreMap::zeros_like(s);
    let mut value = 0.0;

    let wp = mean_weight(tags.present().len());
    for &k in tags.present() {
        let (pooled, w) = lse_with_weights(probs.plane(k).iter().copied(), cfg.r)?;
        value -= wp * pooled.ln();
        let d = -wp / pooled;
        for (g, wi) in d_probs.plane_mut(k).iter_mut().zip(&w) {
            *g += d * wi;
        }
    }
    let wa = mean_weight(tags.absent().len());
    for &k in tags.absent() {
        let (pooled, w) = lse_with_weights(probs.plane(k).iter().copied(), cfg.r)?;
        let (l, dl) = log1m(pooled);
        value -= wa * l;
        let d = -wa * dl;
        for (g, wi) in d_probs.plane_mut(k).iter_mut().zip(&w) {
            *g += d * wi;
        }
    }
    Ok(LossReport {
        value,
        grad: softmax_backward(&probs, &d_probs),
    })
}

/// Mask loss: present foreground classes pooled over the mask, background
/// pooled outside it, absent classes penalised at every pixel.
pub fn loss_mask(s: &ScoreMap, tags: &TagSet, m: &LabelMask, cfg: &LossConfig) -> Result<LossReport, LossError> {
    check_inputs(s, tags, cfg)?;
    let fg = check_mask(s, tags, m)?;
    let probs = softmax_probs(s);
    let mut d_probs = ScoreMap::zeros_like(s);
    let mut value = 0.0;

    let fg_idx: Vec<usize> = (0..fg.len()).filter(|&p| fg[p]).collect();
    let bg_idx: Vec<usize> = (0..fg.len()).filter(|&p| !fg[p]).collect();

    let fg_classes: Vec<usize> = tags.present_foreground().collect();
    let wf = mean_weight(fg_classes.len());
    for &k in &fg_classes {
        let plane = probs.plane(k);
        let (pooled, w) = lse_with_weights(fg_idx.iter().map(|&p| plane[p]), cfg.r)?;
        value -= wf * pooled.ln();
        let d = -wf / pooled;
        let dst = d_probs.plane_mut(k);
        for (&p, wi) in fg_idx.iter().zip(&w) {
            dst[p] += d * wi;
        }
    }

    let bg_plane = probs.plane(0);
    let (pooled, w) = lse_with_weights(bg_idx.iter().map(|&p| bg_plane[p]), cfg.r)?;
    value -= pooled.ln();
    let d = -1.0 / pooled;
    let dst = d_probs.plane_mut(0);
    for (&p, wi) in bg_idx.iter().zip(&w) {
        dst[p] += d * wi;
    }

    let coef = mean_weight(tags.absent().len()) / s.num_pixels() as f64;
    absent_pixel_term(&probs, tags, coef, &mut value, &mut d_probs);

    Ok(LossReport {
        value,
        grad: softmax_backward(&probs, &d_probs),
    })
}

/// Per-pixel LSE over a class subset at pixel `p`, accumulating
/// `-coef * ln(pooled)` into `value` and `d_probs`.
fn pixel_class_lse(
    probs: &ProbMap,
    classes: &[usize],
    p: usize,
    r: f64,
    coef: f64,
    value: &mut f64,
    d_probs: &mut ScoreMap,
) -> Result<(), LossError> {
    let n = probs.num_pixels();
    let (pooled, w) = lse_with_weights(classes.iter().map(|&k| probs.data[k * n + p]), r)?;
    *value -= coef * pooled.ln();
    let d = -coef / pooled;
    for (&k, wi) in classes.iter().zip(&w) {
        d_probs.data[k * n + p] += d * wi;
    }
    Ok(())
}

/// Tag-only loss pooling over present classes at each pixel.
pub fn loss_weak_alt(s: &ScoreMap, tags: &TagSet, cfg: &LossConfig) -> Result<LossReport, LossError> {
    check_inputs(s, tags, cfg)?;
    let probs = softmax_probs(s);
    let mut d_probs = ScoreMap::zeros_like(s);
    let mut value = 0.0;
    let coef = 1.0 / s.num_pixels() as f64;
    for p in 0..s.num_pixels() {
        pixel_class_lse(&probs, tags.present(), p, cfg.r, coef, &mut value, &mut d_probs)?;
    }
    absent_pixel_term(&probs, tags, coef, &mut value, &mut d_probs);
    Ok(LossReport {
        value,
        grad: softmax_backward(&probs, &d_probs),
    })
}

/// Per-pixel mask loss: foreground pixels pool over present foreground
/// classes, background pixels take the background log-probability.
pub fn loss_mask_alt(s: &ScoreMap, tags: &TagSet, m: &LabelMask, cfg: &LossConfig) -> Result<LossReport, LossError> {
    check_inputs(s, tags, cfg)?;
    let fg = check_mask(s, tags, m)?;
    let probs = softmax_probs(s);
    let mut d_probs = ScoreMap::zeros_like(s);
    let mut value = 0.0;
    let n = s.num_pixels();

    let fg_classes: Vec<usize> = tags.present_foreground().collect();
    let fg_count = fg.iter().filter(|&&f| f).count();
    let bg_count = n - fg_count;

    // Background log-probability goes straight to the scores through
    // log-softmax: d ln S_0 / d s_k = [k == 0] - S_k.
    let mut direct = ScoreMap::zeros_like(s);
    let wb = 1.0 / bg_count as f64;
    let wf = 1.0 / fg_count as f64;
    for p in 0..n {
        if fg[p] {
            if !fg_classes.is_empty() {
                pixel_class_lse(&probs, &fg_classes, p, cfg.r, wf, &mut value, &mut d_probs)?;
            }
        } else {
            let max = (0..s.classes).map(|k| s.at(k, p)).fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + (0..s.classes).map(|k| (s.at(k, p) - max).exp()).sum::<f64>().ln();
            value -= wb * (s.at(0, p) - log_z);
            for k in 0..s.classes {
                let indicator = if k == 0 { 1.0 } else { 0.0 };
                direct.data[k * n + p] -= wb * (indicator - probs.data[k * n + p]);
            }
        }
    }

    absent_pixel_term(&probs, tags, 1.0 / n as f64, &mut value, &mut d_probs);

    let mut grad = softmax_backward(&probs, &d_probs);
    for (g, d) in grad.data.iter_mut().zip(&direct.data) {
        *g += d;
    }
    Ok(LossReport { value, grad })
}
