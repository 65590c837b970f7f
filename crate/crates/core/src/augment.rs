//! Branch-specific and shared augmentations.
//!
//! The color branch perturbs appearance only (jitter, histogram matching) and
//! never moves a pixel. The structure branch warps with a smooth random
//! displacement field. Flips and right-angle rotations are shared by every
//! branch and applied identically to images and masks.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::ndcore::{Rng, Scalar, Tensor};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitterParams {
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub saturation_factor: f64,
    /// Fraction of the full hue circle.
    pub hue_delta: f64,
}

impl ColorJitterParams {
    pub const IDENTITY: ColorJitterParams =
        ColorJitterParams { brightness_delta: 0.0, contrast_factor: 1.0, saturation_factor: 1.0, hue_delta: 0.0 };
}

/// Sampling ranges for [`ColorJitterParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterRanges {
    /// Brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// Hue shift drawn from `[-hue, hue]`, fraction of the circle.
    pub hue: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges { brightness: 0.1, contrast: [0.8, 1.2], saturation: [0.8, 1.2], hue: 0.05 }
    }
}

impl JitterRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.brightness >= 0.0
            && self.hue >= 0.0
            && self.hue <= 0.5
            && self.contrast[0] >= 0.0
            && self.contrast[0] <= self.contrast[1]
            && self.saturation[0] >= 0.0
            && self.saturation[0] <= self.saturation[1];
        if ok {
            Ok(())
        } else {
            Err(config_err!("invalid color jitter ranges {self:?}"))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> ColorJitterParams {
        ColorJitterParams {
            brightness_delta: rng.uniform(-self.brightness, self.brightness),
            contrast_factor: rng.uniform(self.contrast[0], self.contrast[1]),
            saturation_factor: rng.uniform(self.saturation[0], self.saturation[1]),
            hue_delta: rng.uniform(-self.hue, self.hue),
        }
    }
}

fn rgb_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let [b, c, h, w] = image.dims4()?;
    if b != 1 || c != 3 {
        return Err(dim_err!("expected a single RGB image, got {:?}", image.shape()));
    }
    Ok((h, w))
}

/// Brightness, contrast, saturation, then hue; clamped to `[0, 1]` after each
/// step. Identity steps are skipped, so identity parameters are an exact no-op.
pub fn color_jitter<T: Scalar>(image: &Tensor<T>, params: &ColorJitterParams) -> Result<Tensor<T>> {
    let (h, w) = rgb_dims(image)?;
    let hw = h * w;
    let mut px: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let gray = |px: &[f64], i: usize| LUMA[0] * px[i] + LUMA[1] * px[hw + i] + LUMA[2] * px[2 * hw + i];

    if params.brightness_delta != 0.0 {
        for v in &mut px {
            *v = (*v + params.brightness_delta).clamp(0.0, 1.0);
        }
    }
    if params.contrast_factor != 1.0 {
        let mean = (0..hw).map(|i| gray(&px, i)).sum::<f64>() / hw as f64;
        for v in &mut px {
            *v = (mean + params.contrast_factor * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    if params.saturation_factor != 1.0 {
        for i in 0..hw {
            let g = gray(&px, i);
            for c in 0..3 {
                let v = &mut px[c * hw + i];
                *v = (g + params.saturation_factor * (*v - g)).clamp(0.0, 1.0);
            }
        }
    }
    if params.hue_delta != 0.0 {
        for i in 0..hw {
            let (hue, s, v) = rgb_to_hsv(px[i], px[hw + i], px[2 * hw + i]);
            let (r, g, b) = hsv_to_rgb((hue + params.hue_delta).rem_euclid(1.0), s, v);
            px[i] = r.clamp(0.0, 1.0);
            px[hw + i] = g.clamp(0.0, 1.0);
            px[2 * hw + i] = b.clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), px.into_iter().map(T::lit).collect())
}

/// Hue in `[0, 1)`.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn quantize(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn cdf_256(values: impl Iterator<Item = f64>) -> [f64; 256] {
    let mut hist = [0usize; 256];
    let mut n = 0usize;
    for v in values {
        hist[quantize(v)] += 1;
        n += 1;
    }
    let mut cdf = [0.0; 256];
    let mut acc = 0usize;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc as f64 / n.max(1) as f64;
    }
    cdf
}

/// Per-channel CDF matching over 256 levels: each source level maps to the
/// smallest reference level whose CDF reaches the source CDF.
pub fn histogram_match<T: Scalar>(source: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = rgb_dims(source)?;
    let (rh, rw) = rgb_dims(reference)?;
    let (hw, rhw) = (h * w, rh * rw);
    let src = source.data();
    let refd = reference.data();
    let mut out = Vec::with_capacity(src.len());
    for c in 0..3 {
        let s_plane = &src[c * hw..(c + 1) * hw];
        let cdf_s = cdf_256(s_plane.iter().map(|v| v.as_f64()));
        let cdf_r = cdf_256(refd[c * rhw..(c + 1) * rhw].iter().map(|v| v.as_f64()));
        let mut lut = [0usize; 256];
        let mut level = 0usize;
        for (b, slot) in lut.iter_mut().enumerate() {
            // CDFs are nondecreasing, so the search pointer only moves forward.
            while level < 255 && cdf_r[level] < cdf_s[b] - 1e-12 {
                level += 1;
            }
            *slot = level;
        }
        out.extend(s_plane.iter().map(|v| T::lit(lut[quantize(v.as_f64())] as f64 / 255.0)));
    }
    Tensor::new(source.shape().to_vec(), out)
}

/// Per-pixel displacement, in pixels: output `(x, y)` samples input `(x + dx, y + dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub alpha: f64,
    pub sigma: f64,
}

impl ElasticField {
    pub fn zero(height: usize, width: usize) -> Self {
        ElasticField { height, width, dx: vec![0.0; height * width], dy: vec![0.0; height * width], alpha: 0.0, sigma: 1.0 }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        ElasticField {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
            alpha: dx.abs().max(dy.abs()),
            sigma: 1.0,
        }
    }

    pub fn negated(&self) -> Self {
        ElasticField {
            dx: self.dx.iter().map(|v| -v).collect(),
            dy: self.dy.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs(&self) -> (f64, f64) {
        let m = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        (m(&self.dx), m(&self.dy))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicate borders.
fn blur(values: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * values[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Gaussian-smoothed uniform noise (kernel truncated at 3σ), each component
/// rescaled so its largest magnitude equals `alpha`.
pub fn sample_elastic(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut Rng) -> Result<ElasticField> {
    if !(alpha >= 0.0) {
        return Err(config_err!("elastic alpha must be >= 0, got {alpha}"));
    }
    if !(sigma > 0.0) {
        return Err(config_err!("elastic sigma must be > 0, got {sigma}"));
    }
    let kernel = gaussian_kernel(sigma);
    let mut component = || {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let smooth = blur(&noise, h, w, &kernel);
        let peak = smooth.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if alpha == 0.0 || peak == 0.0 {
            vec![0.0; h * w]
        } else {
            smooth.into_iter().map(|v| v * alpha / peak).collect()
        }
    };
    let dx = component();
    let dy = component();
    Ok(ElasticField { height: h, width: w, dx, dy, alpha, sigma })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    #[default]
    Bilinear,
    Nearest,
}

/// Resamples every channel at `(x + dx, y + dy)`; out-of-range coordinates
/// clamp to the border.
pub fn warp<T: Scalar>(input: &Tensor<T>, field: &ElasticField, interp: Interp) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4()?;
    if (h, w) != (field.height, field.width) {
        return Err(dim_err!("field {}x{} vs image {h}x{w}", field.height, field.width));
    }
    let src = input.data();
    let mut out = Vec::with_capacity(src.len());
    let (maxx, maxy) = ((w - 1) as f64, (h - 1) as f64);
    for plane in 0..b * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = (x as f64 + field.dx[i]).clamp(0.0, maxx);
                let sy = (y as f64 + field.dy[i]).clamp(0.0, maxy);
                let v = match interp {
                    Interp::Nearest => p[sy.round() as usize * w + sx.round() as usize].as_f64(),
                    Interp::Bilinear => {
                        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                        let at = |yy: usize, xx: usize| p[yy * w + xx].as_f64();
                        if fx == 0.0 && fy == 0.0 {
                            at(y0, x0)
                        } else {
                            (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
                        }
                    }
                };
                out.push(T::lit(v));
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Flips and a counter-clockwise rotation by `rot90 · 90°`, applied in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SharedGeom {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: u8,
}

impl SharedGeom {
    pub const IDENTITY: SharedGeom = SharedGeom { hflip: false, vflip: false, rot90: 0 };

    pub fn sample(rng: &mut Rng) -> Self {
        SharedGeom { hflip: rng.coin(), vflip: rng.coin(), rot90: rng.below(4) as u8 }
    }

    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = t.clone();
        if self.hflip {
            out = flip(&out, true)?;
        }
        if self.vflip {
            out = flip(&out, false)?;
        }
        for _ in 0..self.rot90 % 4 {
            out = rot90_ccw(&out)?;
        }
        Ok(out)
    }

    /// Inverse of [`SharedGeom::apply`].
    pub fn undo<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = t.clone();
        for _ in 0..(4 - self.rot90 % 4) % 4 {
            out = rot90_ccw(&out)?;
        }
        if self.vflip {
            out = flip(&out, false)?;
        }
        if self.hflip {
            out = flip(&out, true)?;
        }
        Ok(out)
    }
}

/// The same flips/rotation on an image and, if given, its mask.
pub fn shared_geom_apply<T: Scalar>(
    image: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    g: &SharedGeom,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let img = g.apply(image)?;
    let m = mask.map(|m| g.apply(m)).transpose()?;
    Ok((img, m))
}

fn flip<T: Scalar>(t: &Tensor<T>, horizontal: bool) -> Result<Tensor<T>> {
    let [b, c, h, w] = t.dims4()?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in 0..b * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out.push(p[sy * w + sx]);
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn rot90_ccw<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = t.dims4()?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in 0..b * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..w {
            for x in 0..h {
                out.push(p[x * w + (w - 1 - y)]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 1, n - 2);
    Tensor::new(shape, out)
}

/// Parameters of the structure-branch and shared augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter: JitterRanges,
    /// Peak elastic displacement in pixels.
    pub elastic_alpha: f64,
    /// Smoothing scale of the elastic field in pixels.
    pub elastic_sigma: f64,
    /// Flips and right-angle rotations shared by all branches.
    pub shared_geometry: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { jitter: JitterRanges::default(), elastic_alpha: 8.0, elastic_sigma: 16.0, shared_geometry: true }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.jitter.validate()?;
        if !(self.elastic_alpha >= 0.0) || !(self.elastic_sigma > 0.0) {
            return Err(config_err!(
                "elastic alpha must be >= 0 and sigma > 0, got {} / {}",
                self.elastic_alpha,
                self.elastic_sigma
            ));
        }
        Ok(())
    }
}

/// Which color-branch perturbation was applied, with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ColorAug {
    Jitter(ColorJitterParams),
    HistogramMatch { reference: usize },
}

/// Fair coin between jitter and histogram matching against `references[k]`.
/// With no reference available the jitter branch is used.
pub fn color_branch<T: Scalar>(
    image: &Tensor<T>,
    references: &[&Tensor<T>],
    ranges: &JitterRanges,
    rng: &mut Rng,
) -> Result<(Tensor<T>, ColorAug)> {
    let use_hist = rng.coin();
    if use_hist && !references.is_empty() {
        let k = rng.below(references.len());
        Ok((histogram_match(image, references[k])?, ColorAug::HistogramMatch { reference: k }))
    } else {
        let p = ranges.sample(rng);
        Ok((color_jitter(image, &p)?, ColorAug::Jitter(p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::ndcore::Rng;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        let mut v = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    v.push(((x * 3 + y * 5 + c * 7) % 17) as f32 / 16.0);
                }
            }
        }
        Tensor::new([3, h, w], v).unwrap()
    }

    #[test]
    fn identity_jitter_is_noop() {
        let img = ramp(5, 6);
        assert_eq!(color_jitter(&img, &ColorJitterParams::IDENTITY).unwrap(), img);
    }

    #[test]
    fn brightness_is_additive() {
        let img = Tensor::<f64>::full([3, 4, 4], 0.5);
        let p = ColorJitterParams { brightness_delta: 0.1, ..ColorJitterParams::IDENTITY };
        for v in color_jitter(&img, &p).unwrap().data() {
            assert_abs_diff_eq!(*v, 0.6, epsilon = 1e-12);
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert_abs_diff_eq!(r, r2, epsilon = 1e-12);
            assert_abs_diff_eq!(g, g2, epsilon = 1e-12);
            assert_abs_diff_eq!(b, b2, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_hue_turn_is_identity() {
        let img = ramp(4, 4).cast::<f64>();
        let p = ColorJitterParams { hue_delta: 1.0, ..ColorJitterParams::IDENTITY };
        let out = color_jitter(&img, &p).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn self_histogram_match_is_quantization() {
        let img = ramp(8, 8);
        let out = histogram_match(&img, &img).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn elastic_zero_alpha_and_determinism() {
        let mut rng = Rng::new(3);
        let z = sample_elastic(16, 16, 0.0, 4.0, &mut rng).unwrap();
        assert!(z.dx.iter().chain(&z.dy).all(|&v| v == 0.0));
        let a = sample_elastic(16, 16, 3.0, 4.0, &mut Rng::new(9)).unwrap();
        let b = sample_elastic(16, 16, 3.0, 4.0, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let (mx, my) = a.max_abs();
        assert_abs_diff_eq!(mx, 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(my, 3.0, epsilon = 1e-6);
        assert!(sample_elastic(4, 4, -1.0, 1.0, &mut rng).is_err());
        assert!(sample_elastic(4, 4, 1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_field_warp_is_identity() {
        let img = ramp(6, 7);
        let f = ElasticField::zero(6, 7);
        assert_eq!(warp(&img, &f, Interp::Nearest).unwrap(), img);
        let bl = warp(&img, &f, Interp::Bilinear).unwrap();
        for (a, b) in img.data().iter().zip(bl.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn unit_shift_matches_manual_shift() {
        let img = ramp(5, 6);
        let out = warp(&img, &ElasticField::constant(5, 6, 1.0, 0.0), Interp::Bilinear).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..6 {
                    let sx = (x + 1).min(5);
                    assert_eq!(out.data()[c * 30 + y * 6 + x], img.data()[c * 30 + y * 6 + sx]);
                }
            }
        }
        assert!(warp(&img, &ElasticField::zero(4, 6), Interp::Bilinear).is_err());
    }

    #[test]
    fn nearest_warp_keeps_masks_binary() {
        let mut mask = vec![0.0f32; 64];
        for (i, v) in mask.iter_mut().enumerate() {
            if (i / 8 + i % 8) % 3 == 0 {
                *v = 1.0;
            }
        }
        let m = Tensor::new([1, 8, 8], mask).unwrap();
        let f = sample_elastic(8, 8, 2.5, 2.0, &mut Rng::new(1)).unwrap();
        let w = warp(&m, &f, Interp::Nearest).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn geometry_inverses() {
        let img = ramp(4, 6);
        assert_eq!(SharedGeom::IDENTITY.apply(&img).unwrap(), img);
        let h = SharedGeom { hflip: true, ..SharedGeom::IDENTITY };
        assert_eq!(h.apply(&h.apply(&img).unwrap()).unwrap(), img);
        let r = SharedGeom { rot90: 1, ..SharedGeom::IDENTITY };
        let mut t = img.clone();
        for _ in 0..4 {
            t = r.apply(&t).unwrap();
        }
        assert_eq!(t, img);
        assert_eq!(r.apply(&img).unwrap().shape(), &[3, 6, 4]);
    }

    #[test]
    fn rotation_moves_top_right_to_top_left() {
        let t = Tensor::<f32>::from_f64([1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = rot90_ccw(&t).unwrap();
        assert_eq!(r.shape(), &[1, 3, 2]);
        assert_eq!(r.data(), &[3., 6., 2., 5., 1., 4.]);
    }

    proptest! {
        #[test]
        fn geometry_undo_recovers(h in any::<bool>(), v in any::<bool>(), rot in 0u8..4, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let data: Vec<f32> = (0..2 * 3 * 5).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
            let img = Tensor::new([2, 3, 5], data).unwrap();
            let g = SharedGeom { hflip: h, vflip: v, rot90: rot };
            prop_assert_eq!(g.undo(&g.apply(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn histogram_match_is_monotone(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let src: Vec<f32> = (0..3 * 64).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
            let refd: Vec<f32> = (0..3 * 64).map(|_| rng.uniform(0.0, 1.0).powi(2) as f32).collect();
            let s = Tensor::new([3, 8, 8], src).unwrap();
            let out = histogram_match(&s, &Tensor::new([3, 8, 8], refd).unwrap()).unwrap();
            for c in 0..3 {
                for i in 0..64 {
                    for j in 0..64 {
                        let (a, b) = (s.data()[c * 64 + i], s.data()[c * 64 + j]);
                        if a <= b {
                            prop_assert!(out.data()[c * 64 + i] <= out.data()[c * 64 + j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn color_branch_commutes_with_pixel_permutation(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let n = 36;
            let img: Vec<f64> = (0..3 * n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let refimg = Tensor::<f64>::new([3, 6, 6], (0..3 * n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permute = |v: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; v.len()];
                for c in 0..3 {
                    for (dst, &src) in perm.iter().enumerate() {
                        out[c * n + dst] = v[c * n + src];
                    }
                }
                out
            };
            let a = Tensor::new([3, 6, 6], img.clone()).unwrap();
            let b = Tensor::new([3, 6, 6], permute(&img)).unwrap();
            let (out_a, aug_a) = color_branch(&a, &[&refimg], &JitterRanges::default(), &mut Rng::new(seed)).unwrap();
            let (out_b, aug_b) = color_branch(&b, &[&refimg], &JitterRanges::default(), &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(aug_a, aug_b);
            for (x, y) in permute(out_a.data()).iter().zip(out_b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
