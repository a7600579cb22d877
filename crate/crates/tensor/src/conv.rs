//! im2col lowering shared by strided convolution and its transpose.

use crate::real::Real;

/// Geometry of a 2-D convolution mapping `[n, c_in, h, w]` to
/// `[n, c_out, out_h, out_w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Forward-convolution geometry; `None` when the kernel does not fit.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the lowered matrix: one per output pixel.
    pub fn rows(&self) -> usize {
        self.n * self.out_h * self.out_w
    }

    /// Columns of the lowered matrix: one per kernel tap.
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Gather input patches into `cols[rows, patch]`; padding reads as zero.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let patch = g.patch();
    let (h, w) = (g.h as isize, g.w as isize);
    let mut row = 0;
    for n in 0..g.n {
        let img = &x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                let y0 = (oy * g.stride) as isize - g.pad as isize;
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                let mut k = 0;
                for c in 0..g.c_in {
                    let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh as isize {
                        let iy = y0 + ky;
                        for kx in 0..g.kw as isize {
                            let ix = x0 + kx;
                            dst[k] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize]
                            } else {
                                T::zero()
                            };
                            k += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add `cols[rows, patch]` back onto an input-shaped buffer.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let patch = g.patch();
    let (h, w) = (g.h as isize, g.w as isize);
    let mut row = 0;
    for n in 0..g.n {
        let img = &mut x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                let y0 = (oy * g.stride) as isize - g.pad as isize;
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                let mut k = 0;
                for c in 0..g.c_in {
                    let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh as isize {
                        let iy = y0 + ky;
                        for kx in 0..g.kw as isize {
                            let ix = x0 + kx;
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize] += src[k];
                            }
                            k += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `[n, c, hw]` channel-major to `[n * hw, c]` pixel-major.
pub(crate) fn nchw_to_rows<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                out[(b * hw + p) * c + ch] = v;
            }
        }
    }
    out
}

/// Inverse of [`nchw_to_rows`].
pub(crate) fn rows_to_nchw<T: Real>(rows: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len()];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (p, v) in dst.iter_mut().enumerate() {
                *v = rows[(b * hw + p) * c + ch];
            }
        }
    }
    out
}
