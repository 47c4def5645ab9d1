//! Raw numeric kernels shared by the forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

use super::shape::{contiguous_strides, numel};
use super::Real;

/// Strided row-major matrix view: element (i, j) lives at `off + i*rs + j*cs`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn rowmajor(off: usize, cols: usize) -> Self {
        Self { off, rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        Self { off: self.off, rs: self.cs, cs: self.rs }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.off;
        }
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

const SMALL_GEMM: usize = 2048;

/// `c[m,n] (+)= a[m,k] · b[k,n]` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    va: MatView,
    b: &[T],
    vb: MatView,
    c: &mut [T],
    vc: MatView,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(va.max_index(m, k) < a.len().max(1) || k == 0);
    assert!(vb.max_index(k, n) < b.len().max(1) || k == 0);
    assert!(vc.max_index(m, n) < c.len());
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[vc.off + i * vc.rs + j * vc.cs] = T::zero();
                }
            }
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let ci = vc.off + i * vc.rs + j * vc.cs;
                if !accumulate {
                    c[ci] = T::zero();
                }
            }
            for p in 0..k {
                let aip = a[va.off + i * va.rs + p * va.cs];
                let brow = vb.off + p * vb.rs;
                let crow = vc.off + i * vc.rs;
                for j in 0..n {
                    c[crow + j * vc.cs] = c[crow + j * vc.cs] + aip * b[brow + j * vb.cs];
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every reachable index by the slice lengths.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C*kh*kw, Ho*Wo]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `[C, H, W]`.
pub(crate) fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// The four bilinear taps of a normalized point on an `h x w` grid, with
/// pixel centers at `(i + 0.5) / extent`. Taps falling outside the grid are
/// reported as `None` (zero padding).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps<T> {
    pub idx: [Option<usize>; 4],
    pub fx: T,
    pub fy: T,
}

#[inline]
pub(crate) fn bilinear_taps<T: Real>(xn: T, yn: T, h: usize, w: usize) -> Taps<T> {
    let half = T::of(0.5);
    let x = xn * T::of(w as f64) - half;
    let y = yn * T::of(h as f64) - half;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let inside = |yy: T, xx: T| -> Option<usize> {
        if xx >= T::zero() && yy >= T::zero() && xx < T::of(w as f64) && yy < T::of(h as f64) {
            Some(yy.as_f64() as usize * w + xx.as_f64() as usize)
        } else {
            None
        }
    };
    let one = T::one();
    Taps {
        // order: (y0,x0), (y0,x1), (y1,x0), (y1,x1)
        idx: [inside(y0, x0), inside(y0, x0 + one), inside(y0 + one, x0), inside(y0 + one, x0 + one)],
        fx,
        fy,
    }
}

/// Generic N-d transpose: `out[i_0..i_n] = x[i_perm^-1]`.
pub(crate) fn permute_copy<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(&out_shape);
    let mut out = Vec::with_capacity(total);
    let nd = out_shape.len();
    if nd == 0 || total == 0 {
        out.extend_from_slice(&x[..total]);
        return (out_shape, out);
    }
    let inner = out_shape[nd - 1];
    let si = strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut off = 0usize;
    for _ in 0..total / inner {
        if si == 1 {
            out.extend_from_slice(&x[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| x[off + j * si]));
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}
