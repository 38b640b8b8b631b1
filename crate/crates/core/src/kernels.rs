//! Convolution kernels (im2col + gemm) with forward and backward passes.
//!
//! Work is split into fixed bands of whole output rows per sample. Band
//! boundaries depend only on the tensor shapes, and partial results are
//! merged in band order, so results do not depend on the dispatch mode.

use crate::exec;
use crate::tensor::{Real, Tensor};

/// Target number of output positions per work band.
const BAND_POSITIONS: usize = 2048;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn rows_per_band(&self) -> usize {
        (BAND_POSITIONS / self.out_w().max(1)).max(1)
    }

    fn bands(&self) -> usize {
        self.out_h().div_ceil(self.rows_per_band())
    }

    fn band_rows(&self, band: usize) -> (usize, usize) {
        let r = self.rows_per_band();
        let start = band * r;
        (start, (start + r).min(self.out_h()))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose tap `ox * s + offset` lands inside `0..w`.
fn valid_span(offset: isize, s: isize, w: isize, wo: usize) -> (usize, usize) {
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = if w - offset <= 0 { 0 } else { (w - offset + s - 1) / s };
    let hi = (hi as usize).min(wo);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// Fill `col` (patch_len × positions) for output rows `oy0..oy1`.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, oy0: usize, oy1: usize, col: &mut [T]) {
    let wo = g.out_w();
    let len = (oy1 - oy0) * wo;
    let (h, w, k, s) = (g.in_h as isize, g.in_w as isize, g.kernel, g.stride as isize);
    let pad = g.pad as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * len..(row + 1) * len];
                let mut p = 0;
                for oy in oy0..oy1 {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        dst[p..p + wo].fill(T::zero());
                        p += wo;
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let out = &mut dst[p..p + wo];
                    let (lo, hi) = valid_span(kx as isize - pad, s, w, wo);
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if s == 1 {
                        let start = (lo as isize + kx as isize - pad) as usize;
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = src[(ox as isize * s + kx as isize - pad) as usize];
                        }
                    }
                    p += wo;
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add `col` back into an input band whose first row is `iy_base`.
fn col2im_band<T: Real>(
    col: &[T],
    g: &ConvGeometry,
    oy0: usize,
    oy1: usize,
    iy_base: isize,
    band_h: usize,
    out: &mut [T],
) {
    let wo = g.out_w();
    let len = (oy1 - oy0) * wo;
    let (h, w, k, s) = (g.in_h as isize, g.in_w as isize, g.kernel, g.stride as isize);
    let pad = g.pad as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &mut out[ci * band_h * g.in_w..(ci + 1) * band_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * len..(row + 1) * len];
                let mut p = 0;
                for oy in oy0..oy1 {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        p += wo;
                        continue;
                    }
                    let dst = &mut plane[((iy - iy_base) * w) as usize..((iy - iy_base + 1) * w) as usize];
                    let (lo, hi) = valid_span(kx as isize - pad, s, w, wo);
                    let src = &src[p..p + wo];
                    if s == 1 {
                        let start = (lo as isize + kx as isize - pad) as usize;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = (ox as isize * s + kx as isize - pad) as usize;
                            dst[ix] = dst[ix] + src[ox];
                        }
                    }
                    p += wo;
                }
                row += 1;
            }
        }
    }
}

/// Input rows touched by output rows `oy0..oy1`, clipped to the image.
fn input_band(g: &ConvGeometry, oy0: usize, oy1: usize) -> (isize, usize) {
    let lo = (oy0 as isize * g.stride as isize - g.pad as isize).max(0);
    let hi = ((oy1 as isize - 1) * g.stride as isize - g.pad as isize + g.kernel as isize)
        .min(g.in_h as isize);
    (lo, (hi - lo).max(0) as usize)
}

/// Forward convolution. `x` is N×Cin×H×W, `weight` Cout×Cin×k×k, `bias` 1×Cout×1×1.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let n = x.batch();
    let (ho, wo) = (g.out_h(), g.out_w());
    let plen = g.patch_len();
    let bands = g.bands();
    let cout = g.out_channels;
    let results: Vec<Vec<T>> = exec::map_indexed(n * bands, |item| {
        let (s, band) = (item / bands, item % bands);
        let (oy0, oy1) = g.band_rows(band);
        let len = (oy1 - oy0) * wo;
        let xs = x.sample(s);
        let mut out = vec![T::zero(); cout * len];
        if g.is_pointwise() {
            T::gemm(
                cout, plen, len, T::one(),
                weight.data(), plen as isize, 1,
                &xs[oy0 * wo..], (g.in_h * g.in_w) as isize, 1,
                T::zero(), &mut out, len as isize, 1,
            );
        } else {
            T::with_scratch(plen * len, 0, |col, _| {
                im2col(xs, g, oy0, oy1, col);
                T::gemm(
                    cout, plen, len, T::one(),
                    weight.data(), plen as isize, 1,
                    col, len as isize, 1,
                    T::zero(), &mut out, len as isize, 1,
                );
            });
        }
        out
    });
    let mut y = Tensor::zeros([n, cout, ho, wo]);
    let plane = ho * wo;
    let yd = y.data_mut();
    for (item, part) in results.iter().enumerate() {
        let (s, band) = (item / bands, item % bands);
        let (oy0, oy1) = g.band_rows(band);
        let len = (oy1 - oy0) * wo;
        for co in 0..cout {
            let b = bias.map_or(T::zero(), |b| b.data()[co]);
            let dst = &mut yd[(s * cout + co) * plane + oy0 * wo..][..len];
            for (d, &v) in dst.iter_mut().zip(&part[co * len..(co + 1) * len]) {
                *d = v + b;
            }
        }
    }
    y
}

/// Gradients of a convolution.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward convolution given the output gradient `dy`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let n = x.batch();
    let wo = g.out_w();
    let plen = g.patch_len();
    let bands = g.bands();
    let cout = g.out_channels;
    let out_plane = g.out_h() * wo;

    struct Part<T> {
        dw: Vec<T>,
        dx_band: Vec<T>,
        iy_base: isize,
        band_h: usize,
    }

    let parts: Vec<Part<T>> = exec::map_indexed(n * bands, |item| {
        let (s, band) = (item / bands, item % bands);
        let (oy0, oy1) = g.band_rows(band);
        let len = (oy1 - oy0) * wo;
        let xs = x.sample(s);
        let dys = &dy.sample(s)[oy0 * wo..];
        let mut dw = vec![T::zero(); cout * plen];
        let pointwise = g.is_pointwise();
        let (iy_base, band_h) = input_band(g, oy0, oy1);
        let mut dx_band = Vec::new();
        let col_len = if pointwise { 0 } else { plen * len };
        let dcol_len = if need_input { plen * len } else { 0 };
        T::with_scratch(col_len, dcol_len, |col_buf, dcol| {
            let (col, col_rs): (&[T], isize) = if pointwise {
                (&xs[oy0 * wo..], (g.in_h * g.in_w) as isize)
            } else {
                im2col(xs, g, oy0, oy1, col_buf);
                (col_buf, len as isize)
            };
            // dW = dy_band (cout×len) · colᵀ (len×plen)
            T::gemm(
                cout, len, plen, T::one(),
                dys, out_plane as isize, 1,
                col, 1, col_rs,
                T::zero(), &mut dw, plen as isize, 1,
            );
            if need_input {
                // dcol = Wᵀ (plen×cout) · dy_band (cout×len)
                T::gemm(
                    plen, cout, len, T::one(),
                    weight.data(), 1, plen as isize,
                    dys, out_plane as isize, 1,
                    T::zero(), dcol, len as isize, 1,
                );
                dx_band = vec![T::zero(); g.in_channels * band_h * g.in_w];
                if pointwise {
                    dx_band.copy_from_slice(dcol);
                } else {
                    col2im_band(dcol, g, oy0, oy1, iy_base, band_h, &mut dx_band);
                }
            }
        });
        Part {
            dw,
            dx_band,
            iy_base,
            band_h,
        }
    });

    let mut dweight = Tensor::zeros(weight.shape());
    let mut dinput = need_input.then(|| Tensor::zeros(x.shape()));
    let in_plane = g.in_h * g.in_w;
    for (item, part) in parts.iter().enumerate() {
        for (a, &b) in dweight.data_mut().iter_mut().zip(&part.dw) {
            *a = *a + b;
        }
        if let Some(dx) = dinput.as_mut() {
            let s = item / bands;
            let dxd = dx.data_mut();
            for ci in 0..g.in_channels {
                let dst = &mut dxd[(s * g.in_channels + ci) * in_plane + part.iy_base as usize * g.in_w..]
                    [..part.band_h * g.in_w];
                let src = &part.dx_band[ci * part.band_h * g.in_w..(ci + 1) * part.band_h * g.in_w];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
    }
    let mut dbias = Tensor::zeros([1, cout, 1, 1]);
    for s in 0..n {
        for co in 0..cout {
            let acc: T = dy.plane(s, co).iter().copied().sum();
            dbias.data_mut()[co] = dbias.data()[co] + acc;
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}
