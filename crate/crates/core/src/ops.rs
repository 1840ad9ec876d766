//! Forward and backward kernels for every operation the networks use.
//!
//! Kernels are generic over [`Real`] so that the gradient checker can run
//! them at 64-bit precision. Convolution reductions always accumulate in f64.

use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::{Real, Tensor};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<(usize, Self)> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {input:?} and {weight:?}"),
            ));
        };
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok((
            n,
            ConvGeometry {
                cin,
                h,
                w,
                cout,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            },
        ))
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate for output index `o` and kernel tap `t`, if inside the image.
    #[inline(always)]
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let s = (o * stride + t) as isize - pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }

    /// Output columns `[lo, hi)` whose source column for tap `kx` lies inside the image.
    #[inline(always)]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Output rows per im2col chunk, sized so a chunk's column matrix stays in L2.
    fn chunk_rows(&self) -> usize {
        const COL_BUDGET: usize = 1 << 16;
        (COL_BUDGET / (self.k() * self.wo)).clamp(1, self.ho)
    }

    /// Lowers output rows `[oy0, oy1)` of one `[C,H,W]` image into a
    /// `[K × (rows·Wo)]` column matrix.
    fn im2col<T: Real>(&self, x: &[T], oy0: usize, oy1: usize, col: &mut [f64]) {
        let p = (oy1 - oy0) * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in oy0..oy1 {
                        let d = &mut dst[(oy - oy0) * self.wo..(oy - oy0 + 1) * self.wo];
                        let Some(sy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                            d.fill(0.0);
                            continue;
                        };
                        let srow = &x[(c * self.h + sy) * self.w..(c * self.h + sy + 1) * self.w];
                        d[..lo].fill(0.0);
                        d[hi..].fill(0.0);
                        let off = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            for (v, s) in d[lo..hi].iter_mut().zip(&srow[off..]) {
                                *v = s.as_f64();
                            }
                        } else {
                            for (i, v) in d[lo..hi].iter_mut().enumerate() {
                                *v = srow[off + i * self.stride].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatters the column gradient of output rows `[oy0, oy1)` back onto a
    /// `[C,H,W]` f64 buffer.
    fn col2im(&self, col: &[f64], oy0: usize, oy1: usize, dx: &mut [f64]) {
        let p = (oy1 - oy0) * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in oy0..oy1 {
                        let Some(sy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                            continue;
                        };
                        let drow = &mut dx[(c * self.h + sy) * self.w..(c * self.h + sy + 1) * self.w];
                        let r = (oy - oy0) * self.wo;
                        let s = &src[r + lo..r + hi];
                        let off = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            for (d, v) in drow[off..].iter_mut().zip(s) {
                                *d += v;
                            }
                        } else {
                            for (i, v) in s.iter().enumerate() {
                                drow[off + i * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g) = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.len(), g.cout),
            ));
        }
    }
    let (k, p) = (g.k(), g.p());
    let rows = g.chunk_rows();
    let w64: Vec<f64> = weight.data().iter().map(|v| v.as_f64()).collect();
    let mut col = vec![0.0; k * rows * g.wo];
    let mut acc = vec![0.0; g.cout * rows * g.wo];
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * g.cout * p];
    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let y = &mut out[s * g.cout * p..(s + 1) * g.cout * p];
        for oy0 in (0..g.ho).step_by(rows) {
            let oy1 = (oy0 + rows).min(g.ho);
            let pc = (oy1 - oy0) * g.wo;
            let (col, acc) = (&mut col[..k * pc], &mut acc[..g.cout * pc]);
            g.im2col(x, oy0, oy1, col);
            match bias {
                Some(b) => {
                    for (row, bv) in acc.chunks_mut(pc).zip(b.data()) {
                        row.fill(bv.as_f64());
                    }
                }
                None => acc.fill(0.0),
            }
            gemm::gemm(g.cout, k, pc, &w64, col, acc, true);
            for (co, row) in acc.chunks(pc).enumerate() {
                let dst = &mut y[co * p + oy0 * g.wo..co * p + oy0 * g.wo + pc];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = T::from_f64(v);
                }
            }
        }
    }
    Tensor::new([n, g.cout, g.ho, g.wo], out)
}

#[derive(Debug)]
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    let (n, g) = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if grad_out.shape() != [n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?} vs output [{n}, {}, {}, {}]", grad_out.shape(), g.cout, g.ho, g.wo),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let rows = g.chunk_rows();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;

    let w_t = need_input_grad.then(|| {
        let w64: Vec<f64> = weight.data().iter().map(|v| v.as_f64()).collect();
        gemm::transpose(g.cout, k, &w64)
    });
    let mut col = vec![0.0; k * rows * g.wo];
    let mut dcol = vec![0.0; if need_input_grad { k * rows * g.wo } else { 0 }];
    let mut dy = vec![0.0; g.cout * rows * g.wo];
    let mut dw = vec![0.0; g.cout * k];
    let mut db = vec![0.0; g.cout];
    let mut dx_acc = vec![0.0; in_len];
    let mut dx = Vec::with_capacity(if need_input_grad { n * in_len } else { 0 });

    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let gy = &grad_out.data()[s * out_len..(s + 1) * out_len];
        if has_bias {
            for (co, row) in gy.chunks(p).enumerate() {
                db[co] += row.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        dx_acc.fill(0.0);
        for oy0 in (0..g.ho).step_by(rows) {
            let oy1 = (oy0 + rows).min(g.ho);
            let pc = (oy1 - oy0) * g.wo;
            let (col, dy) = (&mut col[..k * pc], &mut dy[..g.cout * pc]);
            for (co, row) in dy.chunks_mut(pc).enumerate() {
                let src = &gy[co * p + oy0 * g.wo..co * p + oy0 * g.wo + pc];
                for (d, v) in row.iter_mut().zip(src) {
                    *d = v.as_f64();
                }
            }
            g.im2col(x, oy0, oy1, col);
            gemm::gemm_nt(g.cout, pc, k, dy, col, &mut dw, true);
            if let Some(w_t) = &w_t {
                let dcol = &mut dcol[..k * pc];
                gemm::gemm(k, g.cout, pc, w_t, dy, dcol, false);
                g.col2im(dcol, oy0, oy1, &mut dx_acc);
            }
        }
        if need_input_grad {
            dx.extend(dx_acc.iter().map(|&v| T::from_f64(v)));
        }
    }
    Ok(Conv2dGrads {
        input: if need_input_grad {
            Some(Tensor::new(input.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), dw.into_iter().map(T::from_f64).collect())?,
        bias: has_bias
            .then(|| Tensor::new([g.cout], db.into_iter().map(T::from_f64).collect()))
            .transpose()?,
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the input is strictly positive; zero at and below 0.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn upsample_nearest<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if factor == 0 {
        return Err(Error::shape("upsample_nearest", "factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data().chunks(h * w) {
        for oy in 0..ho {
            let src = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..wo {
                out.push(src[ox / factor]);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

/// Sums each `factor × factor` block of the upstream gradient into its source pixel.
pub fn upsample_nearest_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = grad_out.dims4()?;
    if factor == 0 || ho % factor != 0 || wo % factor != 0 {
        return Err(Error::shape(
            "upsample_nearest_backward",
            format!("{ho}x{wo} not divisible by {factor}"),
        ));
    }
    let (h, w) = (ho / factor, wo / factor);
    let mut out = vec![0.0f64; n * c * h * w];
    for (plane, dst) in grad_out.data().chunks(ho * wo).zip(out.chunks_mut(h * w)) {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / factor) * w + ox / factor] += plane[oy * wo + ox].as_f64();
            }
        }
    }
    Tensor::new([n, c, h, w], out.into_iter().map(T::from_f64).collect())
}

#[derive(Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Tensor<T>,
    /// Number of pixels that contributed to the loss.
    pub valid: usize,
}

/// Per-pixel softmax cross-entropy averaged over non-ignored pixels.
///
/// `labels` is `[N, H, W]` flattened; [`IGNORE`] marks excluded pixels. With
/// no valid pixels the loss and gradient are both zero.
pub fn softmax_ce<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<LossOutput<T>> {
    let [n, c, h, w] = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(
            "softmax_ce",
            format!("{} labels for logits {:?}", labels.len(), logits.shape()),
        ));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != IGNORE && l as usize >= c {
            return Err(Error::Label {
                value: l,
                pixel: i,
                classes: c,
            });
        }
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = vec![T::zero(); logits.len()];
    if valid == 0 {
        return Ok(LossOutput {
            loss: T::zero(),
            grad: Tensor::new(logits.shape().to_vec(), grad)?,
            valid,
        });
    }
    let scale = 1.0 / valid as f64;
    let x = logits.data();
    let mut total = 0.0f64;
    let mut prob = vec![0.0f64; c];
    for s in 0..n {
        let base = s * c * hw;
        for px in 0..hw {
            let label = labels[s * hw + px];
            if label == IGNORE {
                continue;
            }
            let max = (0..c)
                .map(|k| x[base + k * hw + px].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, p) in prob.iter_mut().enumerate() {
                *p = (x[base + k * hw + px].as_f64() - max).exp();
                z += *p;
            }
            let label = label as usize;
            total += z.ln() - (x[base + label * hw + px].as_f64() - max);
            for (k, p) in prob.iter().enumerate() {
                let onehot = if k == label { 1.0 } else { 0.0 };
                grad[base + k * hw + px] = T::from_f64((p / z - onehot) * scale);
            }
        }
    }
    Ok(LossOutput {
        loss: T::from_f64(total * scale),
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
        valid,
    })
}

/// Mean squared error over mask-selected pixels, normalized by `channels × selected`.
///
/// `mask` is `[N, 1, H, W]` with entries in {0, 1}; the gradient is taken with
/// respect to `pred` and is exactly zero wherever the mask is zero.
pub fn masked_mse<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<LossOutput<T>> {
    let [n, c, h, w] = pred.dims4()?;
    if target.shape() != pred.shape() || mask.shape() != [n, 1, h, w] {
        return Err(Error::shape(
            "masked_mse",
            format!(
                "pred {:?}, target {:?}, mask {:?}",
                pred.shape(),
                target.shape(),
                mask.shape()
            ),
        ));
    }
    let mut selected = 0usize;
    for (i, &m) in mask.data().iter().enumerate() {
        if m == T::one() {
            selected += 1;
        } else if m != T::zero() {
            return Err(Error::NonBinaryMask {
                index: i,
                value: m.as_f64(),
            });
        }
    }
    let hw = h * w;
    let mut grad = vec![T::zero(); pred.len()];
    if selected == 0 {
        return Ok(LossOutput {
            loss: T::zero(),
            grad: Tensor::new(pred.shape().to_vec(), grad)?,
            valid: 0,
        });
    }
    let denom = (c * selected) as f64;
    let (p, t, m) = (pred.data(), target.data(), mask.data());
    let mut total = 0.0f64;
    for s in 0..n {
        for px in 0..hw {
            if m[s * hw + px] == T::zero() {
                continue;
            }
            for k in 0..c {
                let i = (s * c + k) * hw + px;
                let d = p[i].as_f64() - t[i].as_f64();
                total += d * d;
                grad[i] = T::from_f64(2.0 * d / denom);
            }
        }
    }
    Ok(LossOutput {
        loss: T::from_f64(total / denom),
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
        valid: selected,
    })
}

/// Channel-wise softmax of NCHW logits.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = logits.dims4()?;
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let base = s * c * hw;
        for px in 0..hw {
            let max = (0..c)
                .map(|k| x[base + k * hw + px].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (x[base + k * hw + px].as_f64() - max).exp()).sum();
            for k in 0..c {
                out[base + k * hw + px] = T::from_f64((x[base + k * hw + px].as_f64() - max).exp() / z);
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Per-pixel argmax over channels; ties go to the lowest index.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = logits.dims4()?;
    let hw = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if x[(s * c + k) * hw + px] > x[(s * c + best) * hw + px] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
