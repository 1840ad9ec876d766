//! Register-tiled f64 matrix multiplies used by the convolution kernels.
//!
//! Each output element is reduced in a fixed order that does not depend on
//! the thread count, so results are bit-identical in serial and parallel mode.
//! [`gemm`] reduces over `k` in ascending order; [`gemm_nt`] uses eight
//! interleaved partial sums followed by a fixed tree reduction.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rayon::prelude::*;

const MR: usize = 4;
const NR: usize = 32;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Sets the worker count for the deterministic parallel mode.
///
/// Must be called before the first multiply; later calls do not resize the
/// pool. `1` (the default) keeps everything on the calling thread.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = threads();
        (n > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool")
        })
    })
    .as_ref()
}

#[inline(always)]
fn madd(acc: f64, a: f64, b: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, acc)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        acc + a * b
    }
}

/// Splits the rows of `c` across the pool (if any) and runs `f(row0, rows, c_rows)`.
fn by_rows(m: usize, n: usize, c: &mut [f64], f: impl Fn(usize, usize, &mut [f64]) + Sync) {
    let rows_per_task = MR * 4;
    match pool() {
        Some(pool) if m > rows_per_task => pool.install(|| {
            c.par_chunks_mut(rows_per_task * n)
                .enumerate()
                .for_each(|(t, rows)| f(t * rows_per_task, rows.len() / n, rows))
        }),
        _ => f(0, m, c),
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` (or `+=` when `accumulate`), row-major.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    by_rows(m, n, c, |r0, rows, c_rows| {
        gemm_rows(rows, k, n, &a[r0 * k..(r0 + rows) * k], b, c_rows)
    });
}

fn gemm_rows(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut i0 = 0;
    while i0 < m {
        let rows = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let cols = NR.min(n - j0);
            nn::tile(k, n, a, b, c, i0, rows, j0, cols);
            j0 += cols;
        }
        i0 += rows;
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ` (or `+=` when `accumulate`), row-major.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    by_rows(m, n, c, |r0, rows, c_rows| {
        let a = &a[r0 * k..(r0 + rows) * k];
        let mut i0 = 0;
        while i0 < rows {
            let ri = 4.min(rows - i0);
            let mut j0 = 0;
            while j0 < n {
                let rj = 4.min(n - j0);
                nt::tile(k, n, a, b, c_rows, i0, ri, j0, rj);
                j0 += rj;
            }
            i0 += ri;
        }
    });
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod nn {
    use std::arch::x86_64::*;

    use super::{madd, MR};

    /// Full-height tiles with a multiple-of-8 width use AVX-512; ragged tiles
    /// fall back to scalar code with the same ascending-k order, so both paths
    /// round identically.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    pub(super) fn tile(
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        i0: usize,
        rows: usize,
        j0: usize,
        cols: usize,
    ) {
        if rows == MR && cols % 8 == 0 {
            // SAFETY: rows i0..i0+MR and cols j0..j0+cols are within c (m×n) and
            // b (k×n); a is m×k. Bounds follow from the caller's loop limits.
            unsafe {
                match cols / 8 {
                    4 => simd::<4>(k, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr(), i0, j0),
                    3 => simd::<3>(k, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr(), i0, j0),
                    2 => simd::<2>(k, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr(), i0, j0),
                    _ => simd::<1>(k, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr(), i0, j0),
                }
            }
            return;
        }
        for i in i0..i0 + rows {
            let crow = &mut c[i * n + j0..i * n + j0 + cols];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j0 + cols];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = madd(*cv, av, bv);
                }
            }
        }
    }

    #[inline(always)]
    unsafe fn simd<const V: usize>(
        k: usize,
        n: usize,
        a: *const f64,
        b: *const f64,
        c: *mut f64,
        i0: usize,
        j0: usize,
    ) {
        let mut acc = [[_mm512_setzero_pd(); V]; MR];
        for (r, row) in acc.iter_mut().enumerate() {
            for (v, x) in row.iter_mut().enumerate() {
                *x = _mm512_loadu_pd(c.add((i0 + r) * n + j0 + v * 8));
            }
        }
        for p in 0..k {
            let bp = b.add(p * n + j0);
            let mut bv = [_mm512_setzero_pd(); V];
            for (v, x) in bv.iter_mut().enumerate() {
                *x = _mm512_loadu_pd(bp.add(v * 8));
            }
            for (r, row) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_pd(*a.add((i0 + r) * k + p));
                for (x, bx) in row.iter_mut().zip(bv) {
                    *x = _mm512_fmadd_pd(av, bx, *x);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            for (v, x) in row.iter().enumerate() {
                _mm512_storeu_pd(c.add((i0 + r) * n + j0 + v * 8), *x);
            }
        }
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
mod nn {
    use super::{madd, MR, NR};

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    pub(super) fn tile(
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        i0: usize,
        rows: usize,
        j0: usize,
        cols: usize,
    ) {
        if rows == MR && cols == NR {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for j in 0..NR {
                        row[j] = madd(row[j], av, brow[j]);
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
            return;
        }
        for i in i0..i0 + rows {
            let crow = &mut c[i * n + j0..i * n + j0 + cols];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j0 + cols];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = madd(*cv, av, bv);
                }
            }
        }
    }
}

/// Dot-product tiles for `a · bᵀ`: eight lane-wise partial sums over `k`,
/// combined pairwise, then the `k % 8` tail added in order.
mod nt {
    use super::madd;

    #[inline(always)]
    fn lanes_dot(x: &[f64], y: &[f64]) -> f64 {
        let mut lanes = [0.0f64; 8];
        let body = x.len() / 8 * 8;
        for (xc, yc) in x[..body].chunks_exact(8).zip(y[..body].chunks_exact(8)) {
            for l in 0..8 {
                lanes[l] = madd(lanes[l], xc[l], yc[l]);
            }
        }
        let mut s = combine(lanes);
        for p in body..x.len() {
            s = madd(s, x[p], y[p]);
        }
        s
    }

    #[inline(always)]
    pub(super) fn combine(l: [f64; 8]) -> f64 {
        ((l[0] + l[4]) + (l[2] + l[6])) + ((l[1] + l[5]) + (l[3] + l[7]))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn tile(
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        i0: usize,
        ri: usize,
        j0: usize,
        rj: usize,
    ) {
        #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
        if ri == 4 && rj == 4 {
            // SAFETY: rows i0..i0+4 of a (·×k) and j0..j0+4 of b (·×k) and the
            // 4×4 block of c are in bounds by the caller's loop limits.
            unsafe { simd(k, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr(), i0, j0) };
            return;
        }
        for i in i0..i0 + ri {
            for j in j0..j0 + rj {
                c[i * n + j] += lanes_dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
            }
        }
    }

    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    #[inline(always)]
    unsafe fn simd(k: usize, n: usize, a: *const f64, b: *const f64, c: *mut f64, i0: usize, j0: usize) {
        use std::arch::x86_64::*;
        let mut acc = [[_mm512_setzero_pd(); 4]; 4];
        let body = k / 8 * 8;
        let mut p = 0;
        while p < body {
            let mut bv = [_mm512_setzero_pd(); 4];
            for (j, x) in bv.iter_mut().enumerate() {
                *x = _mm512_loadu_pd(b.add((j0 + j) * k + p));
            }
            for (i, row) in acc.iter_mut().enumerate() {
                let av = _mm512_loadu_pd(a.add((i0 + i) * k + p));
                for (x, bx) in row.iter_mut().zip(bv) {
                    *x = _mm512_fmadd_pd(av, bx, *x);
                }
            }
            p += 8;
        }
        for (i, row) in acc.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                let mut lanes = [0.0f64; 8];
                _mm512_storeu_pd(lanes.as_mut_ptr(), *x);
                let mut s = combine(lanes);
                for q in body..k {
                    s = madd(s, *a.add((i0 + i) * k + q), *b.add((j0 + j) * k + q));
                }
                *c.add((i0 + i) * n + j0 + j) += s;
            }
        }
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut dst = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}
