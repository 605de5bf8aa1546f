//! Single-core matrix multiply kernel used by matmul, batched matmul and
//! convolution (via im2col).
//!
//! Register-blocked 4 rows x 4 depth steps; the inner loop is written so
//! LLVM auto-vectorizes it without needing float reassociation.

use crate::scalar::Scalar;

/// True when `T` is `f32`; lets the generic entry points take the fused
/// single-precision path.
fn is_f32<T: 'static>() -> bool {
    std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>()
}

#[cfg(target_arch = "x86_64")]
fn as_f32_slices<'a, T: 'static>(a: &'a [T], b: &'a [T], c: &'a mut [T]) -> (&'a [f32], &'a [f32], &'a mut [f32]) {
    debug_assert!(is_f32::<T>());
    // Safety: caller verified T == f32, so the layouts are identical.
    unsafe {
        (
            core::slice::from_raw_parts(a.as_ptr() as *const f32, a.len()),
            core::slice::from_raw_parts(b.as_ptr() as *const f32, b.len()),
            core::slice::from_raw_parts_mut(c.as_mut_ptr() as *mut f32, c.len()),
        )
    }
}

/// C += A * B where A is m x k, B is k x n, C is m x n, all row-major.
///
/// Dispatches to a fused-multiply-add microkernel for f32 on AVX2 hardware
/// and otherwise to an AVX2 recompilation of the portable body.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        if is_f32::<T>() {
            let (a32, b32, c32) = as_f32_slices(a, b, c);
            // Safety: avx2+fma verified at runtime.
            unsafe {
                return x86_fma::gemm_f32(a32, b32, c32, m, k, n);
            }
        }
        // Safety: avx2 verified at runtime.
        unsafe {
            return gemm_acc_avx2(a, b, c, m, k, n);
        }
    }
    gemm_acc_core(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_acc_avx2<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc_core(a, b, c, m, k, n);
}

#[inline(always)]
fn gemm_acc_core<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }

    let m4 = m / 4 * 4;
    let k4 = k / 4 * 4;
    let mut i = 0;
    while i < m4 {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        let ar0 = &a[i * k..(i + 1) * k];
        let ar1 = &a[(i + 1) * k..(i + 2) * k];
        let ar2 = &a[(i + 2) * k..(i + 3) * k];
        let ar3 = &a[(i + 3) * k..(i + 4) * k];
        let mut p = 0;
        while p < k4 {
            let b0 = &b[p * n..p * n + n];
            let b1 = &b[(p + 1) * n..(p + 1) * n + n];
            let b2 = &b[(p + 2) * n..(p + 2) * n + n];
            let b3 = &b[(p + 3) * n..(p + 3) * n + n];
            let (a00, a01, a02, a03) = (ar0[p], ar0[p + 1], ar0[p + 2], ar0[p + 3]);
            let (a10, a11, a12, a13) = (ar1[p], ar1[p + 1], ar1[p + 2], ar1[p + 3]);
            let (a20, a21, a22, a23) = (ar2[p], ar2[p + 1], ar2[p + 2], ar2[p + 3]);
            let (a30, a31, a32, a33) = (ar3[p], ar3[p + 1], ar3[p + 2], ar3[p + 3]);
            for j in 0..n {
                let v0 = b0[j];
                let v1 = b1[j];
                let v2 = b2[j];
                let v3 = b3[j];
                c0[j] += a00 * v0 + a01 * v1 + a02 * v2 + a03 * v3;
                c1[j] += a10 * v0 + a11 * v1 + a12 * v2 + a13 * v3;
                c2[j] += a20 * v0 + a21 * v1 + a22 * v2 + a23 * v3;
                c3[j] += a30 * v0 + a31 * v1 + a32 * v2 + a33 * v3;
            }
            p += 4;
        }
        while p < k {
            let br = &b[p * n..(p + 1) * n];
            let (a0, a1, a2, a3) = (ar0[p], ar1[p], ar2[p], ar3[p]);
            for j in 0..n {
                let v = br[j];
                c0[j] += a0 * v;
                c1[j] += a1 * v;
                c2[j] += a2 * v;
                c3[j] += a3 * v;
            }
            p += 1;
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p < k4 {
            let b0 = &b[p * n..p * n + n];
            let b1 = &b[(p + 1) * n..(p + 1) * n + n];
            let b2 = &b[(p + 2) * n..(p + 2) * n + n];
            let b3 = &b[(p + 3) * n..(p + 3) * n + n];
            let (a0, a1, a2, a3) = (ar[p], ar[p + 1], ar[p + 2], ar[p + 3]);
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let br = &b[p * n..(p + 1) * n];
            let av = ar[p];
            for j in 0..n {
                crow[j] += av * br[j];
            }
            p += 1;
        }
        i += 1;
    }
}

/// C += A * B^T where A is m x k, B is n x k, C is m x n. The contraction
/// runs over the contiguous axis of both inputs (blocked dot products), so
/// no transpose is materialized.
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // Safety: the avx2 feature was verified at runtime.
        unsafe {
            return gemm_nt_avx2(a, b, c, m, k, n);
        }
    }
    gemm_nt_core(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_nt_avx2<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_nt_core(a, b, c, m, k, n);
}

#[inline(always)]
fn gemm_nt_core<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let m2 = m / 2 * 2;
    let n2 = n / 2 * 2;
    let mut i = 0;
    while i < m2 {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let mut j = 0;
        while j < n2 {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let (mut s00, mut s01, mut s10, mut s11) = (T::zero(), T::zero(), T::zero(), T::zero());
            for p in 0..k {
                let (av0, av1) = (a0[p], a1[p]);
                let (bv0, bv1) = (b0[p], b1[p]);
                s00 += av0 * bv0;
                s01 += av0 * bv1;
                s10 += av1 * bv0;
                s11 += av1 * bv1;
            }
            c[i * n + j] += s00;
            c[i * n + j + 1] += s01;
            c[(i + 1) * n + j] += s10;
            c[(i + 1) * n + j + 1] += s11;
            j += 2;
        }
        while j < n {
            let b0 = &b[j * k..(j + 1) * k];
            let (mut s0, mut s1) = (T::zero(), T::zero());
            for p in 0..k {
                s0 += a0[p] * b0[p];
                s1 += a1[p] * b0[p];
            }
            c[i * n + j] += s0;
            c[(i + 1) * n + j] += s1;
            j += 1;
        }
        i += 2;
    }
    while i < m {
        let a0 = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b0 = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s += a0[p] * b0[p];
            }
            c[i * n + j] += s;
        }
        i += 1;
    }
}

/// C += A^T * B where A is m x k, B is m x n, C is k x n. Runs as a sum of
/// rank-1 updates with the contiguous output row innermost.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        if is_f32::<T>() {
            let (a32, b32, c32) = as_f32_slices(a, b, c);
            // Safety: avx2+fma verified at runtime.
            unsafe {
                return x86_fma::gemm_tn_f32(a32, b32, c32, m, k, n);
            }
        }
        // Safety: avx2 verified at runtime.
        unsafe {
            return gemm_tn_avx2(a, b, c, m, k, n);
        }
    }
    gemm_tn_core(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_tn_avx2<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_tn_core(a, b, c, m, k, n);
}

#[inline(always)]
fn gemm_tn_core<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let m4 = m / 4 * 4;
    let mut r = 0;
    while r < m4 {
        let a0 = &a[r * k..(r + 1) * k];
        let a1 = &a[(r + 1) * k..(r + 2) * k];
        let a2 = &a[(r + 2) * k..(r + 3) * k];
        let a3 = &a[(r + 3) * k..(r + 4) * k];
        let b0 = &b[r * n..(r + 1) * n];
        let b1 = &b[(r + 1) * n..(r + 2) * n];
        let b2 = &b[(r + 2) * n..(r + 3) * n];
        let b3 = &b[(r + 3) * n..(r + 4) * n];
        for p in 0..k {
            let (av0, av1, av2, av3) = (a0[p], a1[p], a2[p], a3[p]);
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av0 * b0[j] + av1 * b1[j] + av2 * b2[j] + av3 * b3[j];
            }
        }
        r += 4;
    }
    while r < m {
        let a0 = &a[r * k..(r + 1) * k];
        let b0 = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a0[p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * b0[j];
            }
        }
        r += 1;
    }
}

/// Single-precision AVX2+FMA microkernels. The tile shapes mirror the
/// portable kernels; remainders fall through to scalar loops.
#[cfg(target_arch = "x86_64")]
mod x86_fma {
    use core::arch::x86_64::*;

    /// C += A * B. Narrow outputs run a 4x16 accumulator tile (B column
    /// block stays cached); wide outputs run a row-streaming kernel so B is
    /// read sequentially.
    ///
    /// # Safety
    /// Requires avx2 and fma; slice lengths must match (m*k, k*n, m*n).
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_f32(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        if n <= 64 {
            gemm_f32_narrow(a, b, c, m, k, n);
        } else {
            gemm_f32_wide(a, b, c, m, k, n);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn gemm_f32_narrow(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let m4 = m / 4 * 4;
        let n16 = n / 16 * 16;
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();

        let mut i = 0;
        while i < m4 {
            let mut j = 0;
            while j < n16 {
                let mut acc = [_mm256_setzero_ps(); 8];
                for p in 0..k {
                    let b0 = _mm256_loadu_ps(bp.add(p * n + j));
                    let b1 = _mm256_loadu_ps(bp.add(p * n + j + 8));
                    for r in 0..4 {
                        let av = _mm256_set1_ps(*ap.add((i + r) * k + p));
                        acc[2 * r] = _mm256_fmadd_ps(av, b0, acc[2 * r]);
                        acc[2 * r + 1] = _mm256_fmadd_ps(av, b1, acc[2 * r + 1]);
                    }
                }
                for r in 0..4 {
                    let dst = cp.add((i + r) * n + j);
                    _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), acc[2 * r]));
                    _mm256_storeu_ps(
                        dst.add(8),
                        _mm256_add_ps(_mm256_loadu_ps(dst.add(8)), acc[2 * r + 1]),
                    );
                }
                j += 16;
            }
            while j + 8 <= n {
                let mut acc = [_mm256_setzero_ps(); 4];
                for p in 0..k {
                    let bv = _mm256_loadu_ps(bp.add(p * n + j));
                    for r in 0..4 {
                        let av = _mm256_set1_ps(*ap.add((i + r) * k + p));
                        acc[r] = _mm256_fmadd_ps(av, bv, acc[r]);
                    }
                }
                for r in 0..4 {
                    let dst = cp.add((i + r) * n + j);
                    _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), acc[r]));
                }
                j += 8;
            }
            for r in i..i + 4 {
                for jj in j..n {
                    let mut s = 0.0f32;
                    for p in 0..k {
                        s += a[r * k + p] * b[p * n + jj];
                    }
                    c[r * n + jj] += s;
                }
            }
            i += 4;
        }
        while i < m {
            for jj in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + jj];
                }
                c[i * n + jj] += s;
            }
            i += 1;
        }
    }

    /// Row-streaming variant: 4 rows x 4 depth steps, the inner loop runs
    /// along contiguous B/C rows inside an L1-sized column block.
    #[target_feature(enable = "avx2,fma")]
    unsafe fn gemm_f32_wide(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        const NB: usize = 1024;
        let m4 = m / 4 * 4;
        let k4 = k / 4 * 4;
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();

        let mut j0 = 0;
        while j0 < n {
            let jn = (j0 + NB).min(n);
            let jv = j0 + (jn - j0) / 8 * 8;

            let mut i = 0;
            while i < m4 {
                let mut p = 0;
                while p < k4 {
                    let mut av = [_mm256_setzero_ps(); 16];
                    for r in 0..4 {
                        for q in 0..4 {
                            av[r * 4 + q] = _mm256_set1_ps(*ap.add((i + r) * k + p + q));
                        }
                    }
                    let mut j = j0;
                    while j < jv {
                        let b0 = _mm256_loadu_ps(bp.add(p * n + j));
                        let b1 = _mm256_loadu_ps(bp.add((p + 1) * n + j));
                        let b2 = _mm256_loadu_ps(bp.add((p + 2) * n + j));
                        let b3 = _mm256_loadu_ps(bp.add((p + 3) * n + j));
                        for r in 0..4 {
                            let dst = cp.add((i + r) * n + j);
                            let mut cv = _mm256_loadu_ps(dst);
                            cv = _mm256_fmadd_ps(av[r * 4], b0, cv);
                            cv = _mm256_fmadd_ps(av[r * 4 + 1], b1, cv);
                            cv = _mm256_fmadd_ps(av[r * 4 + 2], b2, cv);
                            cv = _mm256_fmadd_ps(av[r * 4 + 3], b3, cv);
                            _mm256_storeu_ps(dst, cv);
                        }
                        j += 8;
                    }
                    while j < jn {
                        for r in 0..4 {
                            let mut s = c[(i + r) * n + j];
                            for q in 0..4 {
                                s += a[(i + r) * k + p + q] * b[(p + q) * n + j];
                            }
                            c[(i + r) * n + j] = s;
                        }
                        j += 1;
                    }
                    p += 4;
                }
                while p < k {
                    let a0 = _mm256_set1_ps(*ap.add(i * k + p));
                    let a1 = _mm256_set1_ps(*ap.add((i + 1) * k + p));
                    let a2 = _mm256_set1_ps(*ap.add((i + 2) * k + p));
                    let a3 = _mm256_set1_ps(*ap.add((i + 3) * k + p));
                    let mut j = j0;
                    while j < jv {
                        let bv = _mm256_loadu_ps(bp.add(p * n + j));
                        for (r, avr) in [a0, a1, a2, a3].iter().enumerate() {
                            let dst = cp.add((i + r) * n + j);
                            _mm256_storeu_ps(dst, _mm256_fmadd_ps(*avr, bv, _mm256_loadu_ps(dst)));
                        }
                        j += 8;
                    }
                    while j < jn {
                        for r in 0..4 {
                            c[(i + r) * n + j] += a[(i + r) * k + p] * b[p * n + j];
                        }
                        j += 1;
                    }
                    p += 1;
                }
                i += 4;
            }
            while i < m {
                for p in 0..k {
                    let av = a[i * k + p];
                    let avv = _mm256_set1_ps(av);
                    let mut j = j0;
                    while j < jv {
                        let dst = cp.add(i * n + j);
                        _mm256_storeu_ps(
                            dst,
                            _mm256_fmadd_ps(avv, _mm256_loadu_ps(bp.add(p * n + j)), _mm256_loadu_ps(dst)),
                        );
                        j += 8;
                    }
                    while j < jn {
                        c[i * n + j] += av * b[p * n + j];
                        j += 1;
                    }
                }
                i += 1;
            }
            j0 = jn;
        }
    }

    /// C += A^T * B with A of m x k and B of m x n; 8-deep rank-1 updates.
    ///
    /// # Safety
    /// Requires avx2 and fma; slice lengths must match (m*k, m*n, k*n).
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_tn_f32(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * n);
        debug_assert_eq!(c.len(), k * n);
        let m8 = m / 8 * 8;
        let n8 = n / 8 * 8;
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();

        let mut r = 0;
        while r < m8 {
            for p in 0..k {
                let a0 = _mm256_set1_ps(*ap.add(r * k + p));
                let a1 = _mm256_set1_ps(*ap.add((r + 1) * k + p));
                let a2 = _mm256_set1_ps(*ap.add((r + 2) * k + p));
                let a3 = _mm256_set1_ps(*ap.add((r + 3) * k + p));
                let a4 = _mm256_set1_ps(*ap.add((r + 4) * k + p));
                let a5 = _mm256_set1_ps(*ap.add((r + 5) * k + p));
                let a6 = _mm256_set1_ps(*ap.add((r + 6) * k + p));
                let a7 = _mm256_set1_ps(*ap.add((r + 7) * k + p));
                let mut j = 0;
                while j < n8 {
                    let mut acc = _mm256_loadu_ps(cp.add(p * n + j));
                    acc = _mm256_fmadd_ps(a0, _mm256_loadu_ps(bp.add(r * n + j)), acc);
                    acc = _mm256_fmadd_ps(a1, _mm256_loadu_ps(bp.add((r + 1) * n + j)), acc);
                    acc = _mm256_fmadd_ps(a2, _mm256_loadu_ps(bp.add((r + 2) * n + j)), acc);
                    acc = _mm256_fmadd_ps(a3, _mm256_loadu_ps(bp.add((r + 3) * n + j)), acc);
                    acc = _mm256_fmadd_ps(a4, _mm256_loadu_ps(bp.add((r + 4) * n + j)), acc);
                    acc = _mm256_fmadd_ps(a5, _mm256_loadu_ps(bp.add((r + 5) * n + j)), acc);
                    acc = _mm256_fmadd_ps(a6, _mm256_loadu_ps(bp.add((r + 6) * n + j)), acc);
                    acc = _mm256_fmadd_ps(a7, _mm256_loadu_ps(bp.add((r + 7) * n + j)), acc);
                    _mm256_storeu_ps(cp.add(p * n + j), acc);
                    j += 8;
                }
                while j < n {
                    let mut s = c[p * n + j];
                    for rr in 0..8 {
                        s += a[(r + rr) * k + p] * b[(r + rr) * n + j];
                    }
                    c[p * n + j] = s;
                    j += 1;
                }
            }
            r += 8;
        }
        while r < m {
            for p in 0..k {
                let av = a[r * k + p];
                for j in 0..n {
                    c[p * n + j] += av * b[r * n + j];
                }
            }
            r += 1;
        }
    }
}

/// out = transpose of src (rows x cols, row-major).
pub fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, out: &mut Vec<T>) {
    out.clear();
    out.resize(rows * cols, T::zero());
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}
