//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Every kernel writes each output element from exactly one task and reduces
//! in a fixed order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::array::{Shape, Tensor};

/// Dot product with eight independent partial sums (vectorizes without
/// reassociating a single accumulator).
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + xa[i] * xb[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        let [_, cin, h, w] = input.0;
        let [cout, wcin, kh, kw] = weight.0;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight {weight:?} expects {wcin}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {weight:?}")));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {input:?} (pad {pad})"),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    #[inline]
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample `(cin, h, w)` into `(cin*k*k, ho*wo)` patch rows.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox: 0 <= ox + kx - pad < w
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let off = lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
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
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the input grid.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries, expected {}", b.len(), g.cout),
            ));
        }
    }
    let n = input.shape().n();
    let p = g.out_plane();
    let rows = g.rows();
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * g.cout * p];
    let wdata = weight.data();
    out.par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each(|(s, out_s)| {
            let x = &input.data()[s * in_per..(s + 1) * in_per];
            let owned;
            let col: &[T] = if g.is_pointwise() {
                x
            } else {
                let mut buf = vec![T::zero(); rows * p];
                im2col(x, &g, &mut buf);
                owned = buf;
                &owned
            };
            let beta = match bias {
                Some(b) => {
                    for (co, orow) in out_s.chunks_mut(p).enumerate() {
                        orow.fill(b.data()[co]);
                    }
                    T::one()
                }
                None => T::zero(),
            };
            let (rows_i, p_i) = (rows as isize, p as isize);
            T::gemm([g.cout, rows, p], (wdata, rows_i, 1), (col, p_i, 1), beta, (out_s, p_i, 1));
        });
    Tensor::from_vec([n, g.cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    let n = input.shape().n();
    let p = g.out_plane();
    let rows = g.rows();
    let in_per = g.cin * g.h * g.w;
    let wdata = weight.data();
    let go = grad_out.data();

    // Per-sample partials, reduced in sample order below.
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x = &input.data()[s * in_per..(s + 1) * in_per];
            let gs = &go[s * g.cout * p..(s + 1) * g.cout * p];
            let col_owned;
            let col: &[T] = if g.is_pointwise() {
                x
            } else if need[1] {
                let mut buf = vec![T::zero(); rows * p];
                im2col(x, &g, &mut buf);
                col_owned = buf;
                &col_owned
            } else {
                &[]
            };
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); g.cout * rows];
                // dW = G col^T
                T::gemm([g.cout, p, rows], (gs, p as isize, 1), (col, 1, p as isize), T::zero(), (&mut dw, rows as isize, 1));
                dw
            });
            let dx = need[0].then(|| {
                let mut dcol = vec![T::zero(); rows * p];
                // dcol = W^T G
                T::gemm([rows, g.cout, p], (wdata, 1, rows as isize), (gs, p as isize, 1), T::zero(), (&mut dcol, p as isize, 1));
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); in_per];
                    col2im(&dcol, &g, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if need[0] {
        let mut dx = Vec::with_capacity(n * in_per);
        for (sdx, _) in &per_sample {
            dx.extend_from_slice(sdx.as_ref().expect("input gradient computed"));
        }
        grads.input = Some(Tensor::from_vec(input.shape(), dx)?);
    }
    if need[1] {
        let mut dw = vec![T::zero(); g.cout * rows];
        for (_, sdw) in &per_sample {
            for (a, b) in dw.iter_mut().zip(sdw.as_ref().expect("weight gradient computed")) {
                *a = *a + *b;
            }
        }
        grads.weight = Some(Tensor::from_vec(weight.shape(), dw)?);
    }
    if need[2] {
        let mut db = vec![T::zero(); g.cout];
        for s in 0..n {
            for (co, b) in db.iter_mut().enumerate() {
                let off = (s * g.cout + co) * p;
                *b = *b + go[off..off + p].iter().copied().sum::<T>();
            }
        }
        grads.bias = Some(Tensor::from_vec([g.cout, 1, 1, 1], db)?);
    }
    Ok(grads)
}

/// Per-channel mean and biased variance over (N, H, W), accumulated in f64.
pub(crate) fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.dims();
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x.plane(b, ch).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for b in 0..n {
            ss += x
                .plane(b, ch)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    let _ = (h, w);
    (mean, var)
}

pub(crate) struct BnForward<T> {
    pub output: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode only).
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: f64,
) -> Result<BnForward<T>> {
    let [n, c, h, w] = x.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("input has {c} channels, affine params have {}", gamma.len()),
        ));
    }
    let (mean, inv_std, moments): (Vec<T>, Vec<T>, _) = match running {
        None => {
            let (mu, var) = channel_moments(x);
            let inv = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
            (mu.iter().map(|&m| T::of(m)).collect(), inv, Some((mu, var)))
        }
        Some((rm, rv)) => (
            rm.to_vec(),
            rv.iter()
                .map(|&v| T::of(1.0 / (v.as_f64() + eps).sqrt()))
                .collect(),
            None,
        ),
    };
    let plane = h * w;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - mu) * is;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
    Ok(BnForward {
        output: Tensor::from_vec(x.shape(), out)?,
        xhat,
        inv_std,
        moments,
    })
}

/// Returns (d input, d gamma, d beta).
pub(crate) fn batch_norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = grad.dims();
    let plane = h * w;
    let m = T::of((n * plane) as f64);
    let g = grad.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            let off = (b * c + ch) * plane;
            dbeta[ch] = dbeta[ch] + g[off..off + plane].iter().copied().sum::<T>();
            dgamma[ch] = dgamma[ch] + dot(&g[off..off + plane], &xhat[off..off + plane]);
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for ch in 0..c {
        let scale = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = if batch_stats {
                    scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x2 non-overlapping max; ties resolve to the first index in scan order.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial size {h}x{w} must be even"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            let plane = x.plane(b, ch);
            let base = (b * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    arg.push((base + best) as u32);
                }
            }
        }
    }
    Ok((Tensor::from_vec([n, c, ho, wo], out)?, arg))
}

/// Source taps for one output coordinate of a 2x bilinear resize
/// (half-pixel centers, edge clamped).
#[inline]
fn bilinear_taps(dst: usize, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

pub(crate) fn upsample_bilinear2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let (ho, wo) = (2 * h, 2 * w);
    let ytaps: Vec<_> = (0..ho).map(|y| bilinear_taps(y, h)).collect();
    let xtaps: Vec<_> = (0..wo).map(|x| bilinear_taps(x, w)).collect();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            for &(y0, y1, ly) in &ytaps {
                let ly = T::of(ly);
                for &(x0, x1, lx) in &xtaps {
                    let lx = T::of(lx);
                    let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                    let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                    out.push(top * (T::one() - ly) + bot * ly);
                }
            }
        }
    }
    Tensor::from_vec([n, c, ho, wo], out).expect("upsample shape")
}

pub(crate) fn upsample_bilinear2_backward<T: Scalar>(grad: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let [n, c, h, w] = in_shape.0;
    let (ho, wo) = (2 * h, 2 * w);
    let ytaps: Vec<_> = (0..ho).map(|y| bilinear_taps(y, h)).collect();
    let xtaps: Vec<_> = (0..wo).map(|x| bilinear_taps(x, w)).collect();
    let mut dx = vec![T::zero(); in_shape.numel()];
    for b in 0..n {
        for ch in 0..c {
            let g = grad.plane(b, ch);
            let d = &mut dx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ytaps.iter().enumerate() {
                let ly = T::of(ly);
                for (ox, &(x0, x1, lx)) in xtaps.iter().enumerate() {
                    let lx = T::of(lx);
                    let gv = g[oy * wo + ox];
                    let top = gv * (T::one() - ly);
                    let bot = gv * ly;
                    d[y0 * w + x0] = d[y0 * w + x0] + top * (T::one() - lx);
                    d[y0 * w + x1] = d[y0 * w + x1] + top * lx;
                    d[y1 * w + x0] = d[y1 * w + x0] + bot * (T::one() - lx);
                    d[y1 * w + x1] = d[y1 * w + x1] + bot * lx;
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx).expect("upsample grad shape")
}

pub(crate) fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    Tensor::from_fn([n, c, 2 * h, 2 * w], |[b, ch, y, xx]| x.at(b, ch, y / 2, xx / 2))
}

pub(crate) fn upsample_nearest2_backward<T: Scalar>(grad: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let [n, c, h2, w2] = grad.dims();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    let v = dx.at(b, ch, y / 2, x / 2) + grad.at(b, ch, y, x);
                    dx.set(b, ch, y / 2, x / 2, v);
                }
            }
        }
    }
    dx
}
