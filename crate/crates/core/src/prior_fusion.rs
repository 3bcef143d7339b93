//! Foreground prior from hidden-layer activations.
//!
//! Each activation stack is reduced to one map by averaging over channels,
//! resized to the image with corner-aligned bilinear interpolation, summed
//! with the other layer and min-max scaled into `[0, 1]`.

use thiserror::Error;

use crate::tensor_store::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid resize target {width}x{height}")]
    InvalidTarget { width: usize, height: usize },
}

/// Per-pixel foreground probability, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, FusionError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(FusionError::ShapeMismatch(format!(
                "{} values for a {width}x{height} heat map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FusionError::ShapeMismatch(format!(
                "heat map value {v} outside [0, 1]"
            )));
        }
        Ok(HeatMap {
            width,
            height,
            values,
        })
    }

    /// Reads a rank-2 `height x width` tensor as a heat map.
    pub fn from_tensor(t: &Tensor) -> Result<Self, FusionError> {
        let [h, w] = rank2(t)?;
        HeatMap::new(w, h, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("heat map dims are validated at construction")
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

fn rank2(t: &Tensor) -> Result<[usize; 2], FusionError> {
    match *t.dims() {
        [h, w] => Ok([h, w]),
        ref d => Err(FusionError::ShapeMismatch(format!(
            "expected a rank-2 tensor, got dims {d:?}"
        ))),
    }
}

/// Mean over the leading channel axis of a `C x H x W` stack.
pub fn channel_average(t: &Tensor) -> Result<Tensor, FusionError> {
    let [c, h, w] = match *t.dims() {
        [c, h, w] => [c, h, w],
        ref d => {
            return Err(FusionError::ShapeMismatch(format!(
                "expected a rank-3 CxHxW tensor, got dims {d:?}"
            )))
        }
    };
    let plane = h * w;
    let mut acc = vec![0f64; plane];
    for channel in t.data().chunks_exact(plane) {
        for (a, &v) in acc.iter_mut().zip(channel) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / c as f64;
    let data = acc.into_iter().map(|s| (s * inv) as f32).collect();
    Ok(Tensor::new(vec![h, w], data).expect("non-empty plane"))
}

/// Corner-aligned bilinear resize of an `H x W` map to `target_h x target_w`.
///
/// Output pixel `(x, y)` samples the source at
/// `x * (W - 1) / (target_w - 1)`, so the four corners map onto each other
/// exactly. A target extent of 1 samples source coordinate 0.
pub fn upsample_bilinear(t: &Tensor, target_w: usize, target_h: usize) -> Result<Tensor, FusionError> {
    let [h, w] = rank2(t)?;
    if target_w == 0 || target_h == 0 {
        return Err(FusionError::InvalidTarget {
            width: target_w,
            height: target_h,
        });
    }
    let src = t.data();
    let xs = axis_samples(w, target_w);
    let ys = axis_samples(h, target_h);
    let mut out = Vec::with_capacity(target_w * target_h);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] as f64 * (1.0 - fx) + r0[x1] as f64 * fx;
            let bottom = r1[x0] as f64 * (1.0 - fx) + r1[x1] as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(Tensor::new(vec![target_h, target_w], out).expect("target dims are non-zero"))
}

/// For every output index: (left source index, right source index, weight of right).
fn axis_samples(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Elementwise sum of the two layer maps, min-max scaled to `[0, 1]`.
/// A constant sum yields an uninformative prior of 0.5 everywhere.
pub fn fuse(layer4: &Tensor, layer5: &Tensor) -> Result<HeatMap, FusionError> {
    let [h, w] = rank2(layer4)?;
    if layer5.dims() != layer4.dims() {
        return Err(FusionError::ShapeMismatch(format!(
            "layer maps differ: {:?} vs {:?}",
            layer4.dims(),
            layer5.dims()
        )));
    }
    let sum: Vec<f64> = layer4
        .data()
        .iter()
        .zip(layer5.data())
        .map(|(&a, &b)| a as f64 + b as f64)
        .collect();
    let (lo, hi) = sum
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let values = if hi > lo {
        let range = hi - lo;
        sum.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; sum.len()]
    };
    Ok(HeatMap {
        width: w,
        height: h,
        values,
    })
}

/// Full prior: average, resize both layers to the image, then fuse.
pub fn fuse_activations(
    conv4: &Tensor,
    conv5: &Tensor,
    image_w: usize,
    image_h: usize,
) -> Result<HeatMap, FusionError> {
    let a = upsample_bilinear(&channel_average(conv4)?, image_w, image_h)?;
    let b = upsample_bilinear(&channel_average(conv5)?, image_w, image_h)?;
    fuse(&a, &b)
}
