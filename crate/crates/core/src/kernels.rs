//! Convolution kernels: im2col + GEMM for the general case and a direct
//! stride-1 kernel, generic over `f32`/`f64` arithmetic.

use std::ops::{Add, Mul};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::ConvGeometry;
use crate::tensor::{Shape, Tensor};

pub(crate) struct Im2col {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub g: ConvGeometry,
}

/// Element type used inside the GEMM kernels.
pub(crate) trait Elem: Copy + Default + Send + Sync + Add<Output = Self> + Mul<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `self * a + b` rounded once.
    fn fused(self, a: Self, b: Self) -> Self;
    /// # Safety
    /// Pointers and strides must describe valid matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn fused(self, a: f64, b: f64) -> f64 {
        self.mul_add(a, b)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn fused(self, a: f32, b: f32) -> f32 {
        self.mul_add(a, b)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

fn convert<T: Elem>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

impl Im2col {
    pub fn rows(&self) -> usize {
        self.c * self.g.kernel * self.g.kernel
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input row for output row `oy` and kernel row `ky`, `None` in the padding.
    #[inline]
    fn src_y(&self, ky: usize, oy: usize) -> Option<usize> {
        let y = (oy * self.g.stride + ky * self.g.dilation) as isize - self.g.padding as isize;
        (0..self.h as isize).contains(&y).then_some(y as usize)
    }

    /// Output columns whose tap `kx` lands inside the input, with the offset
    /// to add to `ox * stride` to get the input column.
    #[inline]
    fn x_span(&self, kx: usize) -> (usize, usize, isize) {
        let off = (kx * self.g.dilation) as isize - self.g.padding as isize;
        let s = self.g.stride as isize;
        // smallest ox with ox*s + off >= 0, largest with ox*s + off < w
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let hi_excl = ((self.w as isize - off + s - 1) / s).clamp(0, self.ow as isize) as usize;
        (lo.min(hi_excl), hi_excl, off)
    }

    /// Unfold one sample into `cols` (`rows x cols`, zero-initialized).
    fn unfold<T: Elem>(&self, input: &[f64], cols: &mut [T]) {
        let k = self.g.kernel;
        let p = self.cols();
        let s = self.g.stride;
        for ci in 0..self.c {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi, off) = self.x_span(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(y) = self.src_y(ky, oy) else { continue };
                        let src_row = &plane[y * self.w..(y + 1) * self.w];
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if s == 1 {
                            let start = (lo as isize + off) as usize;
                            for (d, &v) in out_row[lo..hi].iter_mut().zip(&src_row[start..start + hi - lo]) {
                                *d = T::from_f64(v);
                            }
                        } else {
                            for ox in lo..hi {
                                out_row[ox] = T::from_f64(src_row[((ox * s) as isize + off) as usize]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back onto one sample.
    fn fold_add<T: Elem>(&self, cols: &[T], out: &mut [f64]) {
        let k = self.g.kernel;
        let p = self.cols();
        let s = self.g.stride;
        for ci in 0..self.c {
            let plane = &mut out[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi, off) = self.x_span(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(y) = self.src_y(ky, oy) else { continue };
                        let in_row = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst_row = &mut plane[y * self.w..(y + 1) * self.w];
                        for ox in lo..hi {
                            dst_row[((ox * s) as isize + off) as usize] += in_row[ox].to_f64();
                        }
                    }
                }
            }
        }
    }

    /// Whether the input gradient is itself a convolution of the same
    /// geometry with the flipped kernel.
    fn transposable(&self) -> bool {
        let g = self.g;
        g.stride == 1 && 2 * g.padding == (g.kernel - 1) * g.dilation && self.oh == self.h && self.ow == self.w
    }
}

/// Row-major `c = a * b (+ c if accumulate)` where `a` is m x k and `b` is k x n.
/// `a_t`/`b_t` read the operand as stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Elem>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T], accumulate: bool) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::from_f64(1.0) } else { T::default() };
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize);
    }
}

pub(crate) fn conv_layout(input: Shape, weight: Shape, g: ConvGeometry) -> Result<Im2col> {
    if weight.h != g.kernel || weight.w != g.kernel {
        return Err(Error::Shape(format!("weight {weight} does not match kernel size {}", g.kernel)));
    }
    if weight.c != input.c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {} channels, weight expects {}",
            input.c, weight.c
        )));
    }
    let oh = g.output_len(input.h)?;
    let ow = g.output_len(input.w)?;
    Ok(Im2col { c: input.c, h: input.h, w: input.w, oh, ow, g })
}

/// Raw forward convolution of a batch laid out as `layout` describes.
pub(crate) fn conv_forward<T: Elem>(x: &[f64], n: usize, w: &[f64], co: usize, bias: Option<&[f64]>, layout: &Im2col) -> Vec<f64> {
    let sample = layout.c * layout.h * layout.w;
    if let Some(direct) = Direct::new(layout, co) {
        let wt: Vec<T> = direct.pack_weight(w);
        let mut bt = vec![T::default(); direct.cop];
        if let Some(b) = bias {
            for (d, &v) in bt.iter_mut().zip(b) {
                *d = T::from_f64(v);
            }
        }
        let samples: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xp = direct.pad_input::<T>(&x[i * sample..(i + 1) * sample]);
                let mut out = vec![T::default(); direct.cop * direct.oh * direct.owp];
                direct.forward(&xp, &wt, &bt, &mut out);
                let mut res = Vec::with_capacity(co * direct.oh * direct.ow);
                for row in out.chunks(direct.owp).take(co * direct.oh) {
                    res.extend(row[..direct.ow].iter().map(|v| v.to_f64()));
                }
                res
            })
            .collect();
        return samples.concat();
    }
    let (kk, p) = (layout.rows(), layout.cols());
    let wt: Vec<T> = convert(w);
    let samples: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![T::default(); kk * p];
            layout.unfold(&x[i * sample..(i + 1) * sample], &mut cols);
            let mut out = vec![T::default(); co * p];
            if let Some(b) = bias {
                for (o, chunk) in out.chunks_mut(p).enumerate() {
                    chunk.fill(T::from_f64(b[o]));
                }
            }
            gemm(co, kk, p, &wt, false, &cols, false, &mut out, bias.is_some());
            out.into_iter().map(T::to_f64).collect()
        })
        .collect();
    samples.concat()
}

/// Input and weight gradients of a convolution.
pub(crate) fn conv_backward<T: Elem>(
    x: &Tensor,
    w: &Tensor,
    gy: &[f64],
    layout: &Im2col,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (co, kk, p) = (ws.n, layout.rows(), layout.cols());
    let k = layout.g.kernel;

    let grad_w = need_w.then(|| {
        let direct = Direct::new(layout, co);
        let per_sample: Vec<Vec<T>> = (0..xs.n)
            .into_par_iter()
            .map(|n| {
                let xn = &x.data()[n * xs.sample()..(n + 1) * xs.sample()];
                let gyn = &gy[n * co * p..(n + 1) * co * p];
                if let Some(direct) = &direct {
                    let mut dw = vec![T::default(); co * kk];
                    direct.weight_grad(&direct.pad_input::<T>(xn), &direct.pad_output::<T>(gyn), &mut dw);
                    return dw;
                }
                let mut cols = vec![T::default(); kk * p];
                layout.unfold(xn, &mut cols);
                let dy: Vec<T> = convert(gyn);
                let mut dw = vec![T::default(); co * kk];
                gemm(co, p, kk, &dy, false, &cols, true, &mut dw, false);
                dw
            })
            .collect();
        let mut acc = vec![0.0; ws.numel()];
        for dw in per_sample {
            for (a, b) in acc.iter_mut().zip(dw) {
                *a += b.to_f64();
            }
        }
        acc
    });

    let grad_x = need_x.then(|| {
        if layout.transposable() {
            // W'[ci, o, ky, kx] = W[o, ci, k-1-ky, k-1-kx]
            let flipped = Tensor::from_fn(Shape::new(ws.c, co, k, k), |ci, o, ky, kx| {
                w.at(o, ci, k - 1 - ky, k - 1 - kx)
            });
            let back = Im2col { c: co, h: layout.oh, w: layout.ow, oh: xs.h, ow: xs.w, g: layout.g };
            conv_forward::<T>(gy, xs.n, flipped.data(), ws.c, None, &back)
        } else {
            let wt: Vec<T> = convert(w.data());
            let per_sample: Vec<Vec<f64>> = (0..xs.n)
                .into_par_iter()
                .map(|n| {
                    let dy: Vec<T> = convert(&gy[n * co * p..(n + 1) * co * p]);
                    let mut dcols = vec![T::default(); kk * p];
                    gemm(kk, co, p, &wt, true, &dy, false, &mut dcols, false);
                    let mut dx = vec![0.0; xs.sample()];
                    layout.fold_add(&dcols, &mut dx);
                    dx
                })
                .collect();
            per_sample.concat()
        }
    });
    (grad_x, grad_w)
}

const OB: usize = 4;
const XB: usize = 16;

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Padded layout for the direct stride-1 kernel: the input is zero-padded so
/// every tap is in range and rows are widened to a multiple of `XB`.
struct Direct {
    c: usize,
    co: usize,
    cop: usize,
    k: usize,
    d: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    owp: usize,
    hp: usize,
    wp: usize,
}

impl Direct {
    fn new(layout: &Im2col, co: usize) -> Option<Self> {
        let g = layout.g;
        if g.stride != 1 {
            return None;
        }
        let span = (g.kernel - 1) * g.dilation;
        let owp = round_up(layout.ow, XB);
        Some(Direct {
            c: layout.c,
            co,
            cop: round_up(co, OB),
            k: g.kernel,
            d: g.dilation,
            pad: g.padding,
            h: layout.h,
            w: layout.w,
            oh: layout.oh,
            ow: layout.ow,
            owp,
            hp: layout.oh + span,
            wp: owp + span,
        })
    }

    fn pad_input<T: Elem>(&self, x: &[f64]) -> Vec<T> {
        let mut xp = vec![T::default(); self.c * self.hp * self.wp];
        let rows = self.h.min(self.hp.saturating_sub(self.pad));
        let cols = self.w.min(self.wp.saturating_sub(self.pad));
        for ci in 0..self.c {
            for y in 0..rows {
                let src = &x[(ci * self.h + y) * self.w..][..cols];
                let dst = &mut xp[(ci * self.hp + y + self.pad) * self.wp + self.pad..][..cols];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = T::from_f64(v);
                }
            }
        }
        xp
    }

    /// Weights interleaved for the kernel: `[cop / OB][c][k][k][OB]`, extra
    /// output rows zero.
    fn pack_weight<T: Elem>(&self, w: &[f64]) -> Vec<T> {
        let taps = self.c * self.k * self.k;
        let mut wr = vec![T::default(); self.cop * taps];
        for o in 0..self.co {
            let (blk, i) = (o / OB, o % OB);
            for t in 0..taps {
                wr[(blk * taps + t) * OB + i] = T::from_f64(w[o * taps + t]);
            }
        }
        wr
    }

    /// `cop x oh x owp` output gradient, padding zero.
    fn pad_output<T: Elem>(&self, gy: &[f64]) -> Vec<T> {
        let mut out = vec![T::default(); self.cop * self.oh * self.owp];
        for o in 0..self.co {
            for y in 0..self.oh {
                let src = &gy[(o * self.oh + y) * self.ow..][..self.ow];
                for (d, &v) in out[(o * self.oh + y) * self.owp..].iter_mut().zip(src) {
                    *d = T::from_f64(v);
                }
            }
        }
        out
    }

    /// Offset of every (ci, ky, kx) tap from the top-left input position.
    fn tap_offsets(&self) -> Vec<usize> {
        let (k, d) = (self.k, self.d);
        let mut offs = Vec::with_capacity(self.c * k * k);
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    offs.push((ci * self.hp + ky * d) * self.wp + kx * d);
                }
            }
        }
        offs
    }

    #[inline(always)]
    fn forward_body<T: Elem, const FUSED: bool>(&self, xp: &[T], wr: &[T], bias: &[T], out: &mut [T]) {
        let offs = self.tap_offsets();
        let taps = offs.len();
        let span = (self.k - 1) * self.d;
        assert!(xp.len() >= self.c * self.hp * self.wp && self.hp >= self.oh + span && self.wp >= self.owp + span);
        assert!(wr.len() >= self.cop * taps && bias.len() >= self.cop);
        assert!(out.len() >= self.cop * self.oh * self.owp);
        for ob in (0..self.cop).step_by(OB) {
            let wblk = &wr[ob * taps..(ob + OB) * taps];
            for y in 0..self.oh {
                for xb in (0..self.owp).step_by(XB) {
                    let base = y * self.wp + xb;
                    let mut acc = [[T::default(); XB]; OB];
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a = [bias[ob + i]; XB];
                    }
                    for (&o, wv) in offs.iter().zip(wblk.chunks_exact(OB)) {
                        // SAFETY: base + o + XB <= c*hp*wp by the assertions above.
                        let src: [T; XB] = unsafe { xp.as_ptr().wrapping_add(base.wrapping_add(o)).cast::<[T; XB]>().read_unaligned() };
                        for i in 0..OB {
                            for j in 0..XB {
                                acc[i][j] = if FUSED { wv[i].fused(src[j], acc[i][j]) } else { wv[i] * src[j] + acc[i][j] };
                            }
                        }
                    }
                    for (i, a) in acc.iter().enumerate() {
                        out[((ob + i) * self.oh + y) * self.owp + xb..][..XB].copy_from_slice(a);
                    }
                }
            }
        }
    }

    #[inline(always)]
    fn weight_grad_body<T: Elem, const FUSED: bool>(&self, xp: &[T], dy: &[T], dw: &mut [T]) {
        let offs = self.tap_offsets();
        let taps = offs.len();
        let span = (self.k - 1) * self.d;
        assert!(xp.len() >= self.c * self.hp * self.wp && self.hp >= self.oh + span && self.wp >= self.owp + span);
        assert!(dy.len() >= self.cop * self.oh * self.owp);
        assert!(dw.len() >= self.co * taps);
        let gstride = self.oh * self.owp;
        for ob in (0..self.cop).step_by(OB) {
            let gblk = &dy[ob * gstride..(ob + OB) * gstride];
            for (t, &o) in offs.iter().enumerate() {
                let mut acc = [[T::default(); XB]; OB];
                for y in 0..self.oh {
                    for xb in (0..self.owp).step_by(XB) {
                        let pos = y * self.wp + xb;
                        let gpos = y * self.owp + xb;
                        // SAFETY: pos + o + XB <= c*hp*wp and
                        // (OB-1)*gstride + gpos + XB <= OB*gstride.
                        let src: [T; XB] = unsafe { xp.as_ptr().wrapping_add(pos.wrapping_add(o)).cast::<[T; XB]>().read_unaligned() };
                        for i in 0..OB {
                            let g: [T; XB] = unsafe {
                                gblk.as_ptr().wrapping_add(i.wrapping_mul(gstride).wrapping_add(gpos)).cast::<[T; XB]>().read_unaligned()
                            };
                            for j in 0..XB {
                                acc[i][j] = if FUSED { g[j].fused(src[j], acc[i][j]) } else { g[j] * src[j] + acc[i][j] };
                            }
                        }
                    }
                }
                for (i, a) in acc.iter().enumerate() {
                    if ob + i < self.co {
                        dw[(ob + i) * taps + t] = a.iter().fold(T::default(), |s, &v| s + v);
                    }
                }
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn forward_avx2<T: Elem>(&self, xp: &[T], wt: &[T], bias: &[T], out: &mut [T]) {
        self.forward_body::<T, true>(xp, wt, bias, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn weight_grad_avx2<T: Elem>(&self, xp: &[T], dy: &[T], dw: &mut [T]) {
        self.weight_grad_body::<T, true>(xp, dy, dw)
    }

    fn forward<T: Elem>(&self, xp: &[T], wt: &[T], bias: &[T], out: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        if has_fma() {
            // SAFETY: the CPU supports the enabled features.
            return unsafe { self.forward_avx2(xp, wt, bias, out) };
        }
        self.forward_body::<T, false>(xp, wt, bias, out)
    }

    fn weight_grad<T: Elem>(&self, xp: &[T], dy: &[T], dw: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        if has_fma() {
            // SAFETY: the CPU supports the enabled features.
            return unsafe { self.weight_grad_avx2(xp, dy, dw) };
        }
        self.weight_grad_body::<T, false>(xp, dy, dw)
    }
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}
