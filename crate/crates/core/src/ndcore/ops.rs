//! Forward and backward kernels.
//!
//! Each differentiable op is a pair: `foo` computes the output and
//! `foo_backward` maps the output gradient to input gradients. The
//! [`Graph`](super::Graph) wires them together; evaluation-only code calls
//! the forward kernels directly.

use super::{Scalar, Tensor};
use crate::error::{config_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [batch, c_in, height, width] = match *input.shape() {
            [b, c, h, w] => [b, c, h, w],
            ref s => return Err(dim_err!("conv2d input must be [B,C,H,W], got {s:?}")),
        };
        let [c_out, w_in, kh, kw] = match *weight.shape() {
            [o, i, kh, kw] => [o, i, kh, kw],
            ref s => return Err(dim_err!("conv2d weight must be [Cout,Cin,k,k], got {s:?}")),
        };
        if kh != kw {
            return Err(dim_err!("conv2d kernel must be square, got {kh}x{kw}"));
        }
        if kh % 2 == 0 {
            return Err(config_err!("conv2d kernel size must be odd, got {kh}"));
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        if w_in != c_in {
            return Err(dim_err!("conv2d weight expects {w_in} input channels, input has {c_in}"));
        }
        if bias.numel() != c_out {
            return Err(dim_err!("conv2d bias has {} entries for {c_out} filters", bias.numel()));
        }
        if height + 2 * pad < kh || width + 2 * pad < kh {
            return Err(dim_err!("conv2d kernel {kh} larger than padded input {height}x{width}"));
        }
        let out_h = (height + 2 * pad - kh) / stride + 1;
        let out_w = (width + 2 * pad - kh) / stride + 1;
        Ok(ConvGeom { batch, c_in, height, width, c_out, kernel: kh, stride, pad, out_h, out_w })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one `[Cin, H, W]` sample into `[Cin·k·k, Ho·Wo]`.
    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let k = self.kernel;
        let n = self.out_len();
        for ci in 0..self.c_in {
            let plane = &image[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds columns back into an image.
    fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        let k = self.kernel;
        let n = self.out_len();
        for ci in 0..self.c_in {
            let plane =
                &mut image[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, bias, stride, pad)?;
    let (kk, n) = (g.patch_len(), g.out_len());
    let in_per = g.c_in * g.height * g.width;
    let out_per = g.c_out * n;
    let mut out = vec![T::zero(); g.batch * out_per];
    let mut col = vec![T::zero(); kk * n];
    for b in 0..g.batch {
        g.im2col(&input.data()[b * in_per..(b + 1) * in_per], &mut col);
        let y = &mut out[b * out_per..(b + 1) * out_per];
        for (co, row) in y.chunks_mut(n).enumerate() {
            row.fill(bias.data()[co]);
        }
        T::gemm(
            g.c_out,
            kk,
            n,
            T::one(),
            weight.data(),
            kk as isize,
            1,
            &col,
            n as isize,
            1,
            T::one(),
            y,
            n as isize,
            1,
        );
    }
    Tensor::new([g.batch, g.c_out, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] w.r.t. input (when `need_input`), weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, weight, bias, stride, pad)?;
    let (kk, n) = (g.patch_len(), g.out_len());
    let in_per = g.c_in * g.height * g.width;
    let out_per = g.c_out * n;
    if grad_out.numel() != g.batch * out_per {
        return Err(dim_err!("conv2d grad_out has {} values, expected {}", grad_out.numel(), g.batch * out_per));
    }
    let mut gx = vec![T::zero(); if need_input { input.numel() } else { 0 }];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.c_out];
    let mut col = vec![T::zero(); kk * n];
    let mut gcol = vec![T::zero(); if need_input { kk * n } else { 0 }];
    for b in 0..g.batch {
        let gy = &grad_out.data()[b * out_per..(b + 1) * out_per];
        g.im2col(&input.data()[b * in_per..(b + 1) * in_per], &mut col);
        // gW += gY · colᵀ
        T::gemm(g.c_out, n, kk, T::one(), gy, n as isize, 1, &col, 1, n as isize, T::one(), &mut gw, kk as isize, 1);
        for (co, row) in gy.chunks(n).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            gb[co] = gb[co] + T::lit(s);
        }
        if need_input {
            // gcol = Wᵀ · gY
            T::gemm(kk, g.c_out, n, T::one(), weight.data(), 1, kk as isize, gy, n as isize, 1, T::zero(), &mut gcol, n as isize, 1);
            g.col2im(&gcol, &mut gx[b * in_per..(b + 1) * in_per]);
        }
    }
    Ok((
        if need_input { Some(Tensor::new(input.shape().to_vec(), gx)?) } else { None },
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(bias.shape().to_vec(), gb)?,
    ))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// 2×2 max-pool with stride 2. Returns the pooled tensor and, per output cell,
/// the flat input index of the selected maximum (first in row-major window order).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = match *input.shape() {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(dim_err!("maxpool2 input must be [B,C,H,W], got {s:?}")),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("maxpool2 needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new([b, c, oh, ow], out)?, idx))
}

pub fn maxpool2_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let d = gx.data_mut();
    for (&j, &g) in argmax.iter().zip(grad_out.data()) {
        d[j] = d[j] + g;
    }
    gx
}

pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(config_err!("upsample factor must be >= 1, got {factor}"));
    }
    let [b, c, h, w] = match *input.shape() {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(dim_err!("upsample input must be [B,C,H,W], got {s:?}")),
    };
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        for oy in 0..oh {
            let row = &x[plane * h * w + (oy / factor) * w..plane * h * w + (oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new([b, c, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Scalar>(input_shape: &[usize], factor: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let d = gx.data_mut();
    let gy = grad_out.data();
    for plane in 0..input_shape[0] * input_shape[1] {
        for oy in 0..oh {
            for ox in 0..ow {
                let j = plane * h * w + (oy / factor) * w + ox / factor;
                d[j] = d[j] + gy[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    gx
}

/// Concatenates `[B, Ci, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let [b, _, h, w] = match *first.shape() {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(dim_err!("concat input must be [B,C,H,W], got {s:?}")),
    };
    let mut channels = 0;
    for p in parts {
        match *p.shape() {
            [pb, c, ph, pw] if pb == b && ph == h && pw == w => channels += c,
            ref s => return Err(dim_err!("concat shape {s:?} incompatible with {:?}", first.shape())),
        }
    }
    let mut out = Vec::with_capacity(b * channels * h * w);
    for bi in 0..b {
        for p in parts {
            let per = p.numel() / b;
            out.extend_from_slice(&p.data()[bi * per..(bi + 1) * per]);
        }
    }
    Tensor::new([b, channels, h, w], out)
}

pub fn concat_channels_backward<T: Scalar>(shapes: &[Vec<usize>], grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    let b = shapes[0][0];
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let gy = grad_out.data();
    let mut offset = 0;
    for _ in 0..b {
        for (s, part) in shapes.iter().zip(parts.iter_mut()) {
            let per: usize = s[1..].iter().product();
            part.extend_from_slice(&gy[offset..offset + per]);
            offset += per;
        }
    }
    shapes
        .iter()
        .zip(parts)
        .map(|(s, d)| Tensor::new(s.clone(), d).expect("split shape"))
        .collect()
}

/// Per-pixel softmax over the channel axis, stabilised by max subtraction.
pub fn softmax_channel<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = logits.dims4()?;
    if c < 2 {
        return Err(config_err!("softmax needs at least 2 channels, got {c}"));
    }
    let hw = h * w;
    let z = logits.data();
    let mut out = vec![T::zero(); z.len()];
    let mut e = vec![0.0f64; c];
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let max = (0..c).map(|ci| z[base + ci * hw + px].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ci in 0..c {
                e[ci] = (z[base + ci * hw + px].as_f64() - max).exp();
                sum += e[ci];
            }
            for ci in 0..c {
                out[base + ci * hw + px] = T::lit(e[ci] / sum);
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn softmax_channel_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = probs.dims4()?;
    let hw = h * w;
    let p = probs.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); p.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let dot: f64 = (0..c).map(|ci| gy[base + ci * hw + px].as_f64() * p[base + ci * hw + px].as_f64()).sum();
            for ci in 0..c {
                let j = base + ci * hw + px;
                gx[j] = T::lit(p[j].as_f64() * (gy[j].as_f64() - dot));
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), gx)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect())
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = T::lit(factor);
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * f).collect()).expect("same shape")
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::lit(a.sum_f64()))
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::lit(a.mean_f64()))
}

fn check_target<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, weights: Option<&Tensor<T>>) -> Result<[usize; 4]> {
    let dims = logits.dims4()?;
    if target.shape() != logits.shape() {
        return Err(dim_err!("target {:?} vs logits {:?}", target.shape(), logits.shape()));
    }
    if let Some(w) = weights {
        let [b, _, h, wd] = dims;
        if w.numel() != b * h * wd {
            return Err(dim_err!("pixel weights hold {} values for {} pixels", w.numel(), b * h * wd));
        }
    }
    Ok(dims)
}

/// Mean over pixels of `w · (−Σ_c t_c log softmax(z)_c)`.
///
/// `weights` has one entry per pixel (`[B, 1, H, W]` or any shape with `B·H·W`
/// values); `None` means all ones.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, weights: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_target(logits, target, weights)?;
    let hw = h * w;
    let z = logits.data();
    let t = target.data();
    let mut total = 0.0f64;
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let max = (0..c).map(|ci| z[base + ci * hw + px].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ci| (z[base + ci * hw + px].as_f64() - max).exp()).sum::<f64>().ln();
            let mut nll = 0.0;
            for ci in 0..c {
                let j = base + ci * hw + px;
                nll -= t[j].as_f64() * (z[j].as_f64() - lse);
            }
            let wt = weights.map_or(1.0, |wt| wt.data()[bi * hw + px].as_f64());
            total += wt * nll;
        }
    }
    Ok(Tensor::scalar(T::lit(total / (b * hw) as f64)))
}

/// Gradient of [`cross_entropy`] w.r.t. the logits, scaled by `grad_out`.
pub fn cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    weights: Option<&Tensor<T>>,
    grad_out: f64,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = check_target(logits, target, weights)?;
    let hw = h * w;
    let probs = softmax_channel(logits)?;
    let p = probs.data();
    let t = target.data();
    let n = (b * hw) as f64;
    let mut gx = vec![T::zero(); p.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let wt = weights.map_or(1.0, |wt| wt.data()[bi * hw + px].as_f64());
            let mass: f64 = (0..c).map(|ci| t[base + ci * hw + px].as_f64()).sum();
            for ci in 0..c {
                let j = base + ci * hw + px;
                gx[j] = T::lit(grad_out * wt / n * (p[j].as_f64() * mass - t[j].as_f64()));
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), gx)
}

/// `1 − mean_{b,c} (2Σ p·t + s) / (Σ p + Σ t + s)`, sums over pixels.
pub fn soft_dice<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<Tensor<T>> {
    let stats = dice_stats(probs, target)?;
    let ratio: f64 = stats.iter().map(|&(i, p, t)| (2.0 * i + smooth) / (p + t + smooth)).sum::<f64>() / stats.len() as f64;
    Ok(Tensor::scalar(T::lit(1.0 - ratio)))
}

pub fn soft_dice_backward<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64, grad_out: f64) -> Result<Tensor<T>> {
    let [.., h, w] = probs.dims4()?;
    let hw = h * w;
    let stats = dice_stats(probs, target)?;
    let n = stats.len() as f64;
    let t = target.data();
    let mut gx = vec![T::zero(); probs.numel()];
    for (bc, &(inter, psum, tsum)) in stats.iter().enumerate() {
        let den = psum + tsum + smooth;
        let num = 2.0 * inter + smooth;
        let base = bc * hw;
        for px in 0..hw {
            let d = (2.0 * t[base + px].as_f64() * den - num) / (den * den);
            gx[base + px] = T::lit(-grad_out * d / n);
        }
    }
    Tensor::new(probs.shape().to_vec(), gx)
}

/// Per `(batch, class)`: `(Σ p·t, Σ p, Σ t)` in 64-bit accumulation.
fn dice_stats<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<(f64, f64, f64)>> {
    let [b, c, h, w] = probs.dims4()?;
    if target.shape() != probs.shape() {
        return Err(dim_err!("dice target {:?} vs probs {:?}", target.shape(), probs.shape()));
    }
    let hw = h * w;
    let (p, t) = (probs.data(), target.data());
    Ok((0..b * c)
        .map(|bc| {
            let (ps, ts) = (&p[bc * hw..(bc + 1) * hw], &t[bc * hw..(bc + 1) * hw]);
            ps.iter().zip(ts).fold((0.0, 0.0, 0.0), |(i, sp, st), (&pv, &tv)| {
                let (pv, tv) = (pv.as_f64(), tv.as_f64());
                (i + pv * tv, sp + pv, st + tv)
            })
        })
        .collect())
}
