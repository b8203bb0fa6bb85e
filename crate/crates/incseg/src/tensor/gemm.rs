//! im2col lowering for convolutions plus a thin row-major GEMM wrapper.
//!
//! The lowering is strided: a whole batch is written into one wide
//! (cin*kh*kw, n*ho*wo) column matrix so each convolution becomes a single
//! GEMM, which keeps throughput up at small channel counts.

use super::Scalar;

/// C = alpha * A(m,k) * B(k,n) + beta * C(m,n), all row-major contiguous.
pub fn gemm_rowmajor<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same as [`gemm_rowmajor`] but with A transposed: C = alpha * A^T(m,k) * B + beta * C,
/// where `a` is stored as (k, m) row-major.
pub fn gemm_at_b<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same as [`gemm_rowmajor`] but with B transposed: C = alpha * A * B^T(k,n) + beta * C,
/// where `b` is stored as (n, k) row-major.
pub fn gemm_a_bt<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower one image `x` of shape (cin, h, w) into the columns of a wider
/// matrix: row `r` of the conceptual (cin*kh*kw, ho*wo) patch matrix lands
/// at `cols[r * row_stride ..][.. ho*wo]`. Out-of-bounds taps are 0.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
    row_stride: usize,
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert!(row_stride >= ho * wo);
    debug_assert!(cols.len() >= (cin * kh * kw - 1) * row_stride + ho * wo);
    let mut row = 0;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for p in 0..kh {
            for q in 0..kw {
                let out_row = &mut cols[row * row_stride..row * row_stride + ho * wo];
                for oh in 0..ho {
                    let iy = (oh * stride + p) as isize - pad as isize;
                    let dst = &mut out_row[oh * wo..(oh + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let ix = (ow * stride + q) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add patch-matrix columns back onto an image: the adjoint of
/// [`im2col`] with the same strided layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [S],
    row_stride: usize,
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert!(row_stride >= ho * wo);
    debug_assert!(cols.len() >= (cin * kh * kw - 1) * row_stride + ho * wo);
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for p in 0..kh {
            for q in 0..kw {
                let src_row = &cols[row * row_stride..row * row_stride + ho * wo];
                for oh in 0..ho {
                    let iy = (oh * stride + p) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ow, s) in src_row[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let ix = (ow * stride + q) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
