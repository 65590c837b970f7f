//! Non-differentiable per-pixel image statistics.
//!
//! Inter-channel variance and edge magnitude feed the color- and
//! structure-aware uncertainty masks. Borders use replicate padding
//! throughout, so image edges never produce phantom gradients.

use image::GrayImage;

use crate::error::{config_err, dim_err, Result};
use crate::ndcore::{Scalar, Tensor};

/// Nonnegative scalar field over an `H × W` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(dim_err!("scalar map {height}x{width} given {} values", values.len()));
        }
        Ok(ScalarMap { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ScalarMap { height, width, values: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    /// `[1, 1, H, W]` tensor of the map values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::lit(v)).collect();
        Tensor::new([1, 1, self.height, self.width], data).expect("map dims")
    }

    /// 8-bit grayscale rendering of `value / scale`, clamped to `[0, 1]`.
    pub fn to_luma8(&self, scale: f64) -> GrayImage {
        let scale = if scale > 0.0 { scale } else { 1.0 };
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = (self.get(y as usize, x as usize) / scale).clamp(0.0, 1.0);
            image::Luma([(v * 255.0).round() as u8])
        })
    }
}

/// Per-pixel `{0, 1}` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(dim_err!("mask {height}x{width} given {} bits", bits.len()));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    /// Pixels of a `[1, H, W]`/`[H, W]`-sized tensor strictly above `threshold`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, threshold: f64) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
            ref s => return Err(dim_err!("mask tensor must be single-channel, got {s:?}")),
        };
        Ok(BinaryMask { height: h, width: w, bits: t.data().iter().map(|v| v.as_f64() > threshold).collect() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    pub fn to_luma8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}

/// Smoothing kernel for the variance map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothMode {
    /// 3×3 Gaussian, σ = 1, renormalised to unit sum.
    #[default]
    Gaussian3x3,
    /// Uniform 1/9 box filter.
    Avgpool3x3,
}

fn rgb_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let [b, c, h, w] = image.dims4()?;
    if b != 1 || c != 3 {
        return Err(dim_err!("expected a single 3-channel image, got {:?}", image.shape()));
    }
    Ok((h, w))
}

/// Population variance of `{R, G, B}` at each pixel.
pub fn channel_variance_map<T: Scalar>(image: &Tensor<T>) -> Result<ScalarMap> {
    let (h, w) = rgb_dims(image)?;
    let hw = h * w;
    let d = image.data();
    let values = (0..hw)
        .map(|px| {
            let c = [d[px].as_f64(), d[hw + px].as_f64(), d[2 * hw + px].as_f64()];
            let mu = (c[0] + c[1] + c[2]) / 3.0;
            c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 3.0
        })
        .collect();
    ScalarMap::new(h, w, values)
}

fn kernel3(mode: SmoothMode) -> [[f64; 3]; 3] {
    match mode {
        SmoothMode::Avgpool3x3 => [[1.0 / 9.0; 3]; 3],
        SmoothMode::Gaussian3x3 => {
            let g = [(-0.5f64).exp(), 1.0, (-0.5f64).exp()];
            let total: f64 = g.iter().sum::<f64>().powi(2);
            let mut k = [[0.0; 3]; 3];
            for (i, row) in k.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = g[i] * g[j] / total;
                }
            }
            k
        }
    }
}

/// 3×3 smoothing with replicate borders.
pub fn smooth(map: &ScalarMap, mode: SmoothMode) -> ScalarMap {
    let k = kernel3(mode);
    let (h, w) = (map.height, map.width);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in k.iter().enumerate() {
                let sy = (y + ky).saturating_sub(1).min(h - 1);
                for (kx, &wt) in row.iter().enumerate() {
                    let sx = (x + kx).saturating_sub(1).min(w - 1);
                    acc += wt * map.values[sy * w + sx];
                }
            }
            out.push(acc);
        }
    }
    ScalarMap { height: h, width: w, values: out }
}

/// `value / (max + eps)`; an all-zero map stays all-zero.
pub fn normalize_max(map: &ScalarMap, eps: f64) -> ScalarMap {
    let denom = map.max() + eps;
    ScalarMap { height: map.height, width: map.width, values: map.values.iter().map(|v| v / denom).collect() }
}

/// `1` where `value > tau` (strict), else `0`.
pub fn threshold_mask(map: &ScalarMap, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(config_err!("threshold tau must lie in [0, 1], got {tau}"));
    }
    Ok(BinaryMask { height: map.height, width: map.width, bits: map.values.iter().map(|&v| v > tau).collect() })
}

/// Unnormalised edge strength `(G_h + G_v) / 3`, where each gradient sums the
/// absolute forward differences of the three channels. The last row/column
/// differences against itself (replicate border) and so contributes zero.
pub fn raw_edge_map<T: Scalar>(image: &Tensor<T>) -> Result<ScalarMap> {
    let (h, w) = rgb_dims(image)?;
    let hw = h * w;
    let d = image.data();
    let mut values = vec![0.0; hw];
    for c in 0..3 {
        let plane = &d[c * hw..(c + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                let here = plane[y * w + x].as_f64();
                let right = plane[y * w + (x + 1).min(w - 1)].as_f64();
                let below = plane[(y + 1).min(h - 1) * w + x].as_f64();
                values[y * w + x] += (right - here).abs() + (below - here).abs();
            }
        }
    }
    for v in &mut values {
        *v /= 3.0;
    }
    ScalarMap::new(h, w, values)
}

/// Max-normalised edge magnitude, `Ê = E / (max E + 1e-8)`.
pub fn edge_magnitude_map<T: Scalar>(image: &Tensor<T>) -> Result<ScalarMap> {
    edge_magnitude_map_eps(image, DEFAULT_EPS)
}

pub fn edge_magnitude_map_eps<T: Scalar>(image: &Tensor<T>, eps: f64) -> Result<ScalarMap> {
    Ok(normalize_max(&raw_edge_map(image)?, eps))
}

pub const DEFAULT_EPS: f64 = 1e-8;
