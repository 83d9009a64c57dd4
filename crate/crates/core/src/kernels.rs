//! Raw forward/backward kernels over flat `[C, H, W]` buffers.

use crate::tensor::{gemm, Element};

/// Geometry of a square-kernel convolution with symmetric "same" zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies inside the image.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (pad, s, wo) = (g.pad(), g.stride, g.out_w());
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
    let hi = if g.w + pad > kx {
        ((g.w + pad - kx - 1) / s + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` into a `[C·k·k, Ho·Wo]` column matrix.
fn im2col<F: Element>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.pad();
    let mut col = Vec::with_capacity(g.patch_len() * ho * wo);
    let zeros = |col: &mut Vec<F>, n: usize| col.extend(std::iter::repeat_n(F::zero(), n));
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..ho {
                    let iy = oy * g.stride + ky;
                    if iy < pad || iy - pad >= g.h {
                        zeros(&mut col, wo);
                        continue;
                    }
                    let src = &plane[(iy - pad) * g.w..(iy - pad + 1) * g.w];
                    zeros(&mut col, lo);
                    if hi > lo {
                        let first = lo * g.stride + kx - pad;
                        if g.stride == 1 {
                            col.extend_from_slice(&src[first..first + hi - lo]);
                        } else {
                            col.extend(src[first..].iter().step_by(g.stride).take(hi - lo).copied());
                        }
                    }
                    zeros(&mut col, wo - hi);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds a column matrix back into `[C, H, W]`, summing overlaps.
fn col2im<F: Element>(col: &[F], g: &ConvGeom) -> Vec<F> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.pad();
    let mut x = vec![F::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                if hi <= lo {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy * g.stride + ky;
                    if iy < pad || iy - pad >= g.h {
                        continue;
                    }
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    let first = (iy - pad) * g.w + lo * g.stride + kx - pad;
                    if g.stride == 1 {
                        for (d, &v) in plane[first..first + s.len()].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in plane[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward<F: Element>(x: &[F], weight: &[F], bias: &[F], g: &ConvGeom) -> Vec<F> {
    let p = g.out_h() * g.out_w();
    let mut out = vec![F::zero(); g.c_out * p];
    for (o, &b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
    }
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, p, weight, false, x, false, F::one(), &mut out);
    } else {
        let col = im2col(x, g);
        gemm(
            g.c_out,
            g.patch_len(),
            p,
            weight,
            false,
            &col,
            false,
            F::one(),
            &mut out,
        );
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub x: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub(crate) fn conv2d_backward<F: Element>(
    x: &[F],
    weight: &[F],
    gout: &[F],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<F> {
    let p = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let col_owned;
    let col: &[F] = if g.is_pointwise() {
        x
    } else if need[1] {
        col_owned = im2col(x, g);
        &col_owned
    } else {
        &[]
    };
    let dx = need[0].then(|| {
        let mut dcol = vec![F::zero(); kk * p];
        gemm(kk, g.c_out, p, weight, true, gout, false, F::zero(), &mut dcol);
        if g.is_pointwise() {
            dcol
        } else {
            col2im(&dcol, g)
        }
    });
    let dw = need[1].then(|| {
        let mut dw = vec![F::zero(); g.c_out * kk];
        gemm(g.c_out, p, kk, gout, false, col, true, F::zero(), &mut dw);
        dw
    });
    let db = need[2].then(|| {
        gout.chunks(p)
            .map(|row| row.iter().fold(F::zero(), |a, &b| a + b))
            .collect()
    });
    ConvGrads {
        x: dx,
        weight: dw,
        bias: db,
    }
}

/// Per-output-index sampling taps `(i0, i1, frac)` for 2× half-pixel bilinear upsampling
/// of an axis of length `n`.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn up2_forward<F: Element>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::from_f64_lossy(fy);
            let gy = F::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::from_f64_lossy(fx);
                let gx = F::one() - fx;
                let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * gy + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn up2_backward<F: Element>(gout: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx_all = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let g = &gout[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut gx_all[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::from_f64_lossy(fy);
            let gy = F::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::from_f64_lossy(fx);
                let gx = F::one() - fx;
                let v = g[oy * wo + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + v * gy * gx;
                dst[y0 * w + x1] = dst[y0 * w + x1] + v * gy * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + v * fy * gx;
                dst[y1 * w + x1] = dst[y1 * w + x1] + v * fy * fx;
            }
        }
    }
    gx_all
}

pub(crate) fn area_down_forward<F: Element>(x: &[F], c: usize, h: usize, w: usize, f: usize) -> Vec<F> {
    if f == 1 {
        return x.to_vec();
    }
    let (ho, wo) = (h / f, w / f);
    let inv = F::one() / F::from_usize(f * f).unwrap();
    let mut out = vec![F::zero(); c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            let row = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let orow = &mut out[(ch * ho + y / f) * wo..(ch * ho + y / f + 1) * wo];
            for (xi, &v) in row.iter().enumerate() {
                orow[xi / f] = orow[xi / f] + v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    out
}

pub(crate) fn area_down_backward<F: Element>(gout: &[F], c: usize, h: usize, w: usize, f: usize) -> Vec<F> {
    if f == 1 {
        return gout.to_vec();
    }
    let (ho, wo) = (h / f, w / f);
    let inv = F::one() / F::from_usize(f * f).unwrap();
    let mut gx = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let grow = &gout[(ch * ho + y / f) * wo..(ch * ho + y / f + 1) * wo];
            let row = &mut gx[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xi, v) in row.iter_mut().enumerate() {
                *v = grow[xi / f] * inv;
            }
        }
    }
    gx
}
