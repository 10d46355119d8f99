//! Row-major matrix multiply kernels.
//!
//! Every kernel here accumulates each output element serially over the inner
//! dimension in ascending order, starting from either zero or the existing
//! value of `c`. No fused multiply-add is used, so the packed f32 kernel and
//! the portable loop produce bit-identical results.

use super::Element;

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all slices contiguous row-major.
///
/// When `accumulate` is false `c` is overwritten.
pub fn gemm<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    T::gemm_kernel(m, n, k, a, b, c, accumulate);
}

/// Portable kernel. i-t-j loop order keeps each `c[i][j]` summed in
/// ascending `t`.
pub(crate) fn gemm_portable<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if !accumulate {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(b_row) {
                *cv = *cv + a_it * bv;
            }
        }
    }
}

const MR: usize = 6;
const NR: usize = 16;
const NR_F64: usize = 8;

/// f32 entry point: packed panels with an AVX2 register-tiled kernel when the
/// CPU supports it, otherwise the portable loop.
pub(crate) fn sgemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if m * n * k >= 4096 && std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked above.
            unsafe { gemm_packed::<f32, NR>(m, n, k, a, b, c, accumulate, kernel_6x16) };
            return;
        }
    }
    gemm_portable(m, n, k, a, b, c, accumulate);
}

/// f64 counterpart of [`sgemm`] with 6×8 tiles.
pub(crate) fn dgemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if m * n * k >= 4096 && std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked above.
            unsafe { gemm_packed::<f64, NR_F64>(m, n, k, a, b, c, accumulate, kernel_6x8_f64) };
            return;
        }
    }
    gemm_portable(m, n, k, a, b, c, accumulate);
}

/// Packs `b` into `ceil(n/W)` column panels of `k × W`, zero-filled past `n`.
fn pack_b<T: Element, const W: usize>(n: usize, k: usize, b: &[T]) -> Vec<T> {
    let panels = n.div_ceil(W);
    let mut packed = vec![T::zero(); panels * k * W];
    for p in 0..panels {
        let j0 = p * W;
        let width = W.min(n - j0);
        let dst = &mut packed[p * k * W..(p + 1) * k * W];
        for t in 0..k {
            dst[t * W..t * W + width].copy_from_slice(&b[t * n + j0..t * n + j0 + width]);
        }
    }
    packed
}

/// `kernel(k, rows, panel, tile)` adds `rows[r][t] * panel[t][j]` over
/// ascending `t` onto an `MR × W` tile.
type Kernel<T> = unsafe fn(usize, &[*const T; MR], *const T, &mut [T]);

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_packed<T: Element, const W: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
    kernel: Kernel<T>,
) {
    let packed = pack_b::<T, W>(n, k, b);
    let panels = n.div_ceil(W);
    let mut tile = vec![T::zero(); MR * W];
    for p in 0..panels {
        let j0 = p * W;
        let width = W.min(n - j0);
        let panel = &packed[p * k * W..(p + 1) * k * W];
        let mut i0 = 0;
        while i0 < m {
            let rows = MR.min(m - i0);
            for r in 0..MR {
                let dst = &mut tile[r * W..(r + 1) * W];
                if accumulate && r < rows {
                    let src = &c[(i0 + r) * n + j0..(i0 + r) * n + j0 + width];
                    dst[..width].copy_from_slice(src);
                    dst[width..].iter_mut().for_each(|v| *v = T::zero());
                } else {
                    dst.iter_mut().for_each(|v| *v = T::zero());
                }
            }
            // Rows past `m` re-read the last valid row; their results are discarded.
            let mut row_ptrs = [std::ptr::null::<T>(); MR];
            for (r, ptr) in row_ptrs.iter_mut().enumerate() {
                let row = i0 + r.min(rows - 1);
                *ptr = a.as_ptr().add(row * k);
            }
            kernel(k, &row_ptrs, panel.as_ptr(), &mut tile);
            for r in 0..rows {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + width].copy_from_slice(&tile[r * W..r * W + width]);
            }
            i0 += MR;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn kernel_6x8_f64(k: usize, rows: &[*const f64; MR], panel: *const f64, tile: &mut [f64]) {
    use std::arch::x86_64::*;
    assert!(tile.len() >= MR * NR_F64);
    let tp = tile.as_mut_ptr();
    let mut acc = [[_mm256_setzero_pd(); 2]; MR];
    for (r, pair) in acc.iter_mut().enumerate() {
        pair[0] = _mm256_loadu_pd(tp.add(r * NR_F64));
        pair[1] = _mm256_loadu_pd(tp.add(r * NR_F64 + 4));
    }
    for t in 0..k {
        let b0 = _mm256_loadu_pd(panel.add(t * NR_F64));
        let b1 = _mm256_loadu_pd(panel.add(t * NR_F64 + 4));
        for (r, pair) in acc.iter_mut().enumerate() {
            let av = _mm256_set1_pd(*rows[r].add(t));
            pair[0] = _mm256_add_pd(pair[0], _mm256_mul_pd(av, b0));
            pair[1] = _mm256_add_pd(pair[1], _mm256_mul_pd(av, b1));
        }
    }
    for (r, pair) in acc.iter().enumerate() {
        _mm256_storeu_pd(tp.add(r * NR_F64), pair[0]);
        _mm256_storeu_pd(tp.add(r * NR_F64 + 4), pair[1]);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn kernel_6x16(k: usize, rows: &[*const f32; MR], panel: *const f32, tile: &mut [f32]) {
    use std::arch::x86_64::*;
    assert!(tile.len() >= MR * NR);
    let tp = tile.as_mut_ptr();
    let mut c00 = _mm256_loadu_ps(tp);
    let mut c01 = _mm256_loadu_ps(tp.add(8));
    let mut c10 = _mm256_loadu_ps(tp.add(16));
    let mut c11 = _mm256_loadu_ps(tp.add(24));
    let mut c20 = _mm256_loadu_ps(tp.add(32));
    let mut c21 = _mm256_loadu_ps(tp.add(40));
    let mut c30 = _mm256_loadu_ps(tp.add(48));
    let mut c31 = _mm256_loadu_ps(tp.add(56));
    let mut c40 = _mm256_loadu_ps(tp.add(64));
    let mut c41 = _mm256_loadu_ps(tp.add(72));
    let mut c50 = _mm256_loadu_ps(tp.add(80));
    let mut c51 = _mm256_loadu_ps(tp.add(88));
    let [r0, r1, r2, r3, r4, r5] = *rows;
    for t in 0..k {
        let b0 = _mm256_loadu_ps(panel.add(t * NR));
        let b1 = _mm256_loadu_ps(panel.add(t * NR + 8));
        let a0 = _mm256_set1_ps(*r0.add(t));
        c00 = _mm256_add_ps(c00, _mm256_mul_ps(a0, b0));
        c01 = _mm256_add_ps(c01, _mm256_mul_ps(a0, b1));
        let a1 = _mm256_set1_ps(*r1.add(t));
        c10 = _mm256_add_ps(c10, _mm256_mul_ps(a1, b0));
        c11 = _mm256_add_ps(c11, _mm256_mul_ps(a1, b1));
        let a2 = _mm256_set1_ps(*r2.add(t));
        c20 = _mm256_add_ps(c20, _mm256_mul_ps(a2, b0));
        c21 = _mm256_add_ps(c21, _mm256_mul_ps(a2, b1));
        let a3 = _mm256_set1_ps(*r3.add(t));
        c30 = _mm256_add_ps(c30, _mm256_mul_ps(a3, b0));
        c31 = _mm256_add_ps(c31, _mm256_mul_ps(a3, b1));
        let a4 = _mm256_set1_ps(*r4.add(t));
        c40 = _mm256_add_ps(c40, _mm256_mul_ps(a4, b0));
        c41 = _mm256_add_ps(c41, _mm256_mul_ps(a4, b1));
        let a5 = _mm256_set1_ps(*r5.add(t));
        c50 = _mm256_add_ps(c50, _mm256_mul_ps(a5, b0));
        c51 = _mm256_add_ps(c51, _mm256_mul_ps(a5, b1));
    }
    _mm256_storeu_ps(tp, c00);
    _mm256_storeu_ps(tp.add(8), c01);
    _mm256_storeu_ps(tp.add(16), c10);
    _mm256_storeu_ps(tp.add(24), c11);
    _mm256_storeu_ps(tp.add(32), c20);
    _mm256_storeu_ps(tp.add(40), c21);
    _mm256_storeu_ps(tp.add(48), c30);
    _mm256_storeu_ps(tp.add(56), c31);
    _mm256_storeu_ps(tp.add(64), c40);
    _mm256_storeu_ps(tp.add(72), c41);
    _mm256_storeu_ps(tp.add(80), c50);
    _mm256_storeu_ps(tp.add(88), c51);
}

/// Transposes a row-major `rows × cols` block into `out` (`cols × rows`).
pub fn transpose_into<T: Copy>(rows: usize, cols: usize, src: &[T], out: &mut [T]) {
    const BLOCK: usize = 32;
    for ib in (0..rows).step_by(BLOCK) {
        for jb in (0..cols).step_by(BLOCK) {
            for i in ib..(ib + BLOCK).min(rows) {
                for j in jb..(jb + BLOCK).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}
