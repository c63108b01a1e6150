//! RGB images, binary masks, Netpbm I/O, the composition rule and the
//! harmonization metrics.

mod metrics;
mod netpbm;

pub use metrics::{metrics, ratio_bucket, write_metrics_csv, MetricsRecord, DEFAULT_PSNR_CAP};
pub use netpbm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm,
};

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("{}: parse error at byte {offset}: {reason}", path.display())]
    ParseFile {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("dimension mismatch: {lhs:?} vs {rhs:?}")]
    Dimension {
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("buffer of {len} values does not fit {height}x{width}x{channels}")]
    Length {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("value {value} at index {index} is outside [0, 1]")]
    Range { index: usize, value: f64 },
}

impl ImageError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            Self::Parse { offset, reason } => Self::ParseFile {
                path: path.to_path_buf(),
                offset,
                reason,
            },
            e => e,
        }
    }
}

/// Three-channel image with values in `[0, 1]`, stored row-major with RGB
/// interleaved (the Netpbm order).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(ImageError::Length {
                height,
                width,
                channels: 3,
                len: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::Range { index, value });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self, ImageError> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// 8-bit samples scaled by `1/255`.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (s, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + s] = px[c];
            }
        }
        Tensor::raw(vec![3, self.height, self.width], out)
    }

    /// Inverse of [`Image::to_chw`]; values must already lie in `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Result<Self, ImageError> {
        let [3, h, w] = *t.shape() else {
            return Err(ImageError::Length {
                height: 0,
                width: 0,
                channels: 3,
                len: t.len(),
            });
        };
        let n = h * w;
        let v = t.values();
        let data = (0..n)
            .flat_map(|s| (0..3).map(move |c| v[c * n + s]))
            .collect();
        Self::new(h, w, data)
    }

    /// Nearest-neighbour resampling; see [`nearest_index`].
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let sy = nearest_index(y, self.height, height);
            for x in 0..width {
                let sx = nearest_index(x, self.width, width);
                data.extend(self.pixel(sy, sx));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }
}

/// Binary foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(ImageError::Length {
                height,
                width,
                channels: 1,
                len: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> bool,
    ) -> Result<Self, ImageError> {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `[1, H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::raw(
            vec![1, self.height, self.width],
            self.bits.iter().map(|&b| f64::from(u8::from(b))).collect(),
        )
    }

    /// Nearest-neighbour resampling: a target site is foreground iff its
    /// nearest source pixel is.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| {
                self.get(
                    nearest_index(y, self.height, height),
                    nearest_index(x, self.width, width),
                )
            })
            .collect();
        Mask {
            height,
            width,
            bits,
        }
    }
}

/// Source index whose pixel centre is nearest to the centre of target index
/// `i`: `floor((i + 0.5) * src / dst)`.
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    ((2 * i + 1) * src / (2 * dst)).min(src - 1)
}

/// `generated` where the mask is set, `composite` elsewhere.
pub fn compose(generated: &Image, composite: &Image, mask: &Mask) -> Result<Image, ImageError> {
    if generated.dims() != composite.dims() {
        return Err(ImageError::Dimension {
            lhs: generated.dims(),
            rhs: composite.dims(),
        });
    }
    if generated.dims() != mask.dims() {
        return Err(ImageError::Dimension {
            lhs: generated.dims(),
            rhs: mask.dims(),
        });
    }
    let mut out = composite.clone();
    for (s, &fg) in mask.bits().iter().enumerate() {
        if fg {
            out.data[s * 3..s * 3 + 3].copy_from_slice(&generated.data[s * 3..s * 3 + 3]);
        }
    }
    Ok(out)
}
