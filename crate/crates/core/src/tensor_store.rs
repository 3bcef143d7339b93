//! Binary tensor container and PNG label masks.
//!
//! Tensor files are little-endian:
//!
//! ```text
//! "FGBG" | version: u32 = 1 | dtype: u8 = 0 (f32) | rank: u8 | reserved: u16 = 0
//!        | dims: rank x u64 | payload: row-major f32
//! ```
//!
//! Label masks are 8-bit single-channel PNGs following the PASCAL convention
//! (0 = background, 255 = ignore).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FGBG";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const IGNORE_LABEL: u8 = 255;

const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: unsupported dtype code {code}")]
    DtypeUnsupported { path: PathBuf, code: u8 },
    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: non-finite value at flat index {index}")]
    NonFiniteValue { path: PathBuf, index: usize },
    #[error("invalid tensor shape {dims:?}")]
    InvalidShape { dims: Vec<usize> },
    #[error("{path}: label {value} at pixel ({x}, {y}) is out of range for {num_classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        value: u8,
        x: u32,
        y: u32,
        num_classes: usize,
    },
    #[error("{path}: cannot decode image: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Dense row-major float32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, StoreError> {
        if !shape_is_valid(&dims) || shape_len(&dims) != Some(data.len()) {
            return Err(StoreError::InvalidShape { dims });
        }
        Ok(Tensor { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self, StoreError> {
        let len = shape_len(&dims)
            .filter(|_| shape_is_valid(&dims))
            .ok_or_else(|| StoreError::InvalidShape { dims: dims.clone() })?;
        Ok(Tensor {
            dims,
            data: vec![value; len],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Encodes the tensor in the on-disk container format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a container; `path` is used only for diagnostics.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, StoreError> {
        let p = || path.to_path_buf();
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic { path: p() });
        }
        if bytes.len() < HEADER_LEN {
            return Err(StoreError::TruncatedPayload {
                path: p(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion { path: p(), version });
        }
        if bytes[8] != DTYPE_F32 {
            return Err(StoreError::DtypeUnsupported {
                path: p(),
                code: bytes[8],
            });
        }
        let rank = bytes[9] as usize;
        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(StoreError::TruncatedPayload {
                path: p(),
                expected: dims_end,
                found: bytes.len(),
            });
        }
        let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = shape_len(&dims)
            .filter(|_| shape_is_valid(&dims))
            .ok_or_else(|| StoreError::InvalidShape { dims: dims.clone() })?;
        let expected = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(dims_end))
            .ok_or_else(|| StoreError::InvalidShape { dims: dims.clone() })?;
        if bytes.len() < expected {
            return Err(StoreError::TruncatedPayload {
                path: p(),
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(StoreError::TrailingBytes {
                path: p(),
                extra: bytes.len() - expected,
            });
        }
        let mut data = Vec::with_capacity(count);
        for (index, c) in bytes[dims_end..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(StoreError::NonFiniteValue { path: p(), index });
            }
            data.push(v);
        }
        Ok(Tensor { dims, data })
    }
}

fn shape_is_valid(dims: &[usize]) -> bool {
    !dims.is_empty() && dims.len() <= u8::MAX as usize && dims.iter().all(|&d| d > 0)
}

fn shape_len(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

/// Writes `t`, replacing any existing file at `path`.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), StoreError> {
    let path = path.as_ref();
    if t.data.iter().any(|v| !v.is_finite()) {
        let index = t.data.iter().position(|v| !v.is_finite()).unwrap();
        return Err(StoreError::NonFiniteValue {
            path: path.to_path_buf(),
            index,
        });
    }
    fs::write(path, t.to_bytes()).map_err(|e| StoreError::io(path, e))
}

/// Per-pixel discrete labeling, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self, StoreError> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(StoreError::InvalidShape {
                dims: vec![height, width],
            });
        }
        Ok(LabelMask {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        LabelMask {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Number of pixels where the two labelings differ.
    pub fn hamming(&self, other: &LabelMask) -> usize {
        self.labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count()
    }
}

fn decode_gray(path: &Path) -> Result<GrayImage, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| {
        StoreError::DecodeFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(StoreError::DecodeFailure {
            path: path.to_path_buf(),
            reason: format!(
                "expected 8-bit single-channel PNG, found {:?}",
                other.color()
            ),
        }),
    }
}

fn encode_gray(path: &Path, width: usize, height: usize, px: Vec<u8>) -> Result<(), StoreError> {
    let img = GrayImage::from_raw(width as u32, height as u32, px).ok_or_else(|| {
        StoreError::InvalidShape {
            dims: vec![height, width],
        }
    })?;
    let mut buf = io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| StoreError::io(path, io::Error::other(e)))?;
    fs::write(path, buf.into_inner()).map_err(|e| StoreError::io(path, e))
}

/// Reads a PASCAL-style label PNG. 255 stays [`IGNORE_LABEL`]; any other value
/// must be below `num_classes`.
pub fn read_label_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask, StoreError> {
    let path = path.as_ref();
    let img = decode_gray(path)?;
    let (w, h) = img.dimensions();
    for (x, y, p) in img.enumerate_pixels() {
        let v = p.0[0];
        if v != IGNORE_LABEL && v as usize >= num_classes {
            return Err(StoreError::LabelOutOfRange {
                path: path.to_path_buf(),
                value: v,
                x,
                y,
                num_classes,
            });
        }
    }
    LabelMask::new(w as usize, h as usize, img.into_raw())
}

pub fn write_label_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<(), StoreError> {
    encode_gray(path.as_ref(), mask.width, mask.height, mask.labels.clone())
}

/// Reads a 0/255 foreground mask into labels {0 = background, 1 = foreground}.
pub fn read_binary_mask(path: impl AsRef<Path>) -> Result<LabelMask, StoreError> {
    let path = path.as_ref();
    let img = decode_gray(path)?;
    let (w, h) = img.dimensions();
    let mut labels = Vec::with_capacity((w * h) as usize);
    for (x, y, p) in img.enumerate_pixels() {
        labels.push(match p.0[0] {
            0 => 0,
            255 => 1,
            value => {
                return Err(StoreError::LabelOutOfRange {
                    path: path.to_path_buf(),
                    value,
                    x,
                    y,
                    num_classes: 2,
                })
            }
        });
    }
    LabelMask::new(w as usize, h as usize, labels)
}

/// Writes a {0, 1} labeling as a 0/255 PNG.
pub fn write_binary_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<(), StoreError> {
    let px = mask
        .labels
        .iter()
        .map(|&l| if l == 0 { 0 } else { 255 })
        .collect();
    encode_gray(path.as_ref(), mask.width, mask.height, px)
}

/// 8-bit RGB image, row-major. Grayscale sources are replicated into all
/// three channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, StoreError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(StoreError::InvalidShape {
                dims: vec![height, width, 3],
            });
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn uniform(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self, StoreError> {
        RgbImage::new(width, height, gray.iter().map(|&g| [g, g, g]).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }
}

/// Decodes an 8-bit PNG (gray, gray+alpha, RGB or RGBA; alpha is dropped).
pub fn read_rgb_image(path: impl AsRef<Path>) -> Result<RgbImage, StoreError> {
    use image::ColorType;
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| {
        StoreError::DecodeFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(StoreError::DecodeFailure {
                path: path.to_path_buf(),
                reason: format!("expected an 8-bit PNG, found {other:?}"),
            })
        }
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.pixels().map(|p| p.0).collect())
}

pub fn write_rgb_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<(), StoreError> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).ok_or_else(|| {
        StoreError::InvalidShape {
            dims: vec![img.height, img.width, 3],
        }
    })?;
    let mut out = io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| StoreError::io(path, io::Error::other(e)))?;
    fs::write(path, out.into_inner()).map_err(|e| StoreError::io(path, e))
}

/// Reads only the PNG header for the image extent `(width, height)`.
pub fn image_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize), StoreError> {
    let path = path.as_ref();
    image::image_dimensions(path)
        .map(|(w, h)| (w as usize, h as usize))
        .map_err(|e| StoreError::DecodeFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
