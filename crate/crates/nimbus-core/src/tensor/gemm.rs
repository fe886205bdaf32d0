//! Small dense matrix kernels shared by the convolution paths.
//!
//! The multiply accumulates into the destination (`C += A * B`) over column
//! tiles of [`NT`] and row blocks of [`MR`]; for every output element the
//! reduction over `k` runs in ascending order, which pins the floating-point
//! summation order regardless of tiling. Where the build targets AVX-512 the
//! tile runs on explicit 512-bit intrinsics; the generic tile computes the
//! same fused multiply-adds in the same order, so both paths produce
//! identical bits and the results do not depend on which one was compiled.

/// Column tile width. One tile of `f32` fills one 512-bit vector register.
pub(crate) const NT: usize = 16;
/// Rows of `C` updated per tile pass. Eight accumulator registers keep
/// enough independent fused multiply-add chains in flight to hide latency.
const MR: usize = 8;

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
pub(crate) fn gemm_accumulate(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    assert_eq!(c.len(), m * n, "gemm: dst length");
    gemm_strip::<true>(c, n, a, b, m, k, n);
}

/// `C[0..m][0..width] (+)= A * B` where `a` is packed `m x k`, `b` is a
/// packed `k x width` panel, and row `r` of the destination starts at
/// `c[r * cs]`. With `LOAD_C = false` the destination contents are ignored,
/// bitwise as if zero-filled first. Per output element this performs the
/// identical fused multiply-add sequence as [`gemm_accumulate`], so carving
/// a matrix into panels changes nothing about the result bits.
pub(crate) fn gemm_strip<const LOAD_C: bool>(c: &mut [f32], cs: usize, a: &[f32], b: &[f32], m: usize, k: usize, width: usize) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * width, "gemm: rhs length");
    assert!(m == 0 || (m - 1) * cs + width <= c.len(), "gemm: dst length");
    if m == 0 || width == 0 {
        return;
    }
    if k == 0 {
        if !LOAD_C {
            for r in 0..m {
                c[r * cs..][..width].fill(0.0);
            }
        }
        return;
    }
    let main = width - width % NT;
    let mut j0 = 0;
    while j0 < main {
        row_blocks::<LOAD_C>(&mut c[j0..], cs, a, &b[j0..], width, m, k);
        j0 += NT;
    }
    if main < width {
        tail_panel::<LOAD_C>(&mut c[main..], cs, a, &b[main..], width, m, k, width - main);
    }
}

/// Sweeps all row blocks of one [`NT`]-wide column stripe. `c` and `b` point
/// at the stripe's first column; their rows start `cs` and `bs` apart.
#[inline(always)]
fn row_blocks<const LOAD_C: bool>(c: &mut [f32], cs: usize, a: &[f32], b: &[f32], bs: usize, m: usize, k: usize) {
    let mut i0 = 0;
    while i0 + MR <= m {
        tile::<MR, LOAD_C>(c, cs, a, b, bs, i0, k);
        i0 += MR;
    }
    while i0 < m {
        tile::<1, LOAD_C>(c, cs, a, b, bs, i0, k);
        i0 += 1;
    }
}

/// Updates rows `i0..i0+R` of one [`NT`]-wide stripe. `c` and `b` point at
/// the stripe's first column, rows `cs` and `bs` apart.
#[inline(always)]
fn tile<const R: usize, const LOAD_C: bool>(c: &mut [f32], cs: usize, a: &[f32], b: &[f32], bs: usize, i0: usize, k: usize) {
    #[cfg(target_feature = "avx512f")]
    // Safety: the callers' length asserts and loop bounds guarantee the
    // block and all addressed rows lie inside the slices.
    unsafe {
        tile_avx512::<R, LOAD_C>(c, cs, a, b, bs, i0, k)
    }
    #[cfg(not(target_feature = "avx512f"))]
    tile_generic::<R, LOAD_C>(c, cs, a, b, bs, i0, k)
}

/// Portable tile; also the bit-for-bit oracle for the intrinsics path.
#[cfg_attr(target_feature = "avx512f", allow(dead_code))]
#[inline(always)]
fn tile_generic<const R: usize, const LOAD_C: bool>(
    c: &mut [f32],
    cs: usize,
    a: &[f32],
    b: &[f32],
    bs: usize,
    i0: usize,
    k: usize,
) {
    let mut acc = [[0.0f32; NT]; R];
    if LOAD_C {
        for r in 0..R {
            let row = &c[(i0 + r) * cs..][..NT];
            acc[r].copy_from_slice(row);
        }
    }
    let mut arows: [&[f32]; R] = [&[]; R];
    for r in 0..R {
        arows[r] = &a[(i0 + r) * k..][..k];
    }
    for kk in 0..k {
        let brow = &b[kk * bs..][..NT];
        for r in 0..R {
            let av = arows[r][kk];
            for j in 0..NT {
                acc[r][j] = av.mul_add(brow[j], acc[r][j]);
            }
        }
    }
    for r in 0..R {
        let row = &mut c[(i0 + r) * cs..][..NT];
        row.copy_from_slice(&acc[r]);
    }
}

/// Same arithmetic as [`tile_generic`], one 512-bit register per row: the
/// lane-wise fused multiply-adds run over `k` in the same ascending order,
/// so the results are bitwise identical.
///
/// Safety: requires `(i0 + R - 1) * cs + NT <= c.len()`,
/// `(k - 1) * bs + NT <= b.len()`, and `(i0 + R) * k <= a.len()`, which the
/// callers' asserts and loop bounds establish.
#[cfg(target_feature = "avx512f")]
#[inline(always)]
unsafe fn tile_avx512<const R: usize, const LOAD_C: bool>(
    c: &mut [f32],
    cs: usize,
    a: &[f32],
    b: &[f32],
    bs: usize,
    i0: usize,
    k: usize,
) {
    use std::arch::x86_64::{_mm512_fmadd_ps, _mm512_loadu_ps, _mm512_set1_ps, _mm512_setzero_ps, _mm512_storeu_ps};
    debug_assert!(R > 0 && (i0 + R - 1) * cs + NT <= c.len());
    debug_assert!(k > 0 && (k - 1) * bs + NT <= b.len());
    debug_assert!((i0 + R) * k <= a.len());
    let mut acc = [_mm512_setzero_ps(); R];
    if LOAD_C {
        for r in 0..R {
            acc[r] = _mm512_loadu_ps(c.as_ptr().add((i0 + r) * cs));
        }
    }
    let ap = a.as_ptr().add(i0 * k);
    for kk in 0..k {
        let brow = _mm512_loadu_ps(b.as_ptr().add(kk * bs));
        for r in 0..R {
            let av = _mm512_set1_ps(*ap.add(r * k + kk));
            acc[r] = _mm512_fmadd_ps(av, brow, acc[r]);
        }
    }
    for r in 0..R {
        _mm512_storeu_ps(c.as_mut_ptr().add((i0 + r) * cs), acc[r]);
    }
}

/// Scalar path for stripes narrower than [`NT`]. `c` and `b` point at the
/// stripe's first column, rows `cs` and `bs` apart, `width` columns wide.
fn tail_panel<const LOAD_C: bool>(c: &mut [f32], cs: usize, a: &[f32], b: &[f32], bs: usize, m: usize, k: usize, width: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * cs..][..width];
        if !LOAD_C {
            crow.fill(0.0);
        }
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * bs..][..width];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

/// `dst[c][r] = src[r][c]` for row-major `src: rows x cols`.
pub(crate) fn transpose(dst: &mut [f32], src: &[f32], rows: usize, cols: usize) {
    assert_eq!(src.len(), rows * cols, "transpose: src length");
    assert_eq!(dst.len(), rows * cols, "transpose: dst length");
    for r in 0..rows {
        let srow = &src[r * cols..][..cols];
        for (c, &v) in srow.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// Sum with a fixed reduction order: eight interleaved partial sums over the
/// 8-aligned prefix, combined pairwise, then the remainder left to right.
/// The order is part of the reproducibility contract.
pub(crate) fn sum_fixed(xs: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for ch in chunks {
        for (lane, &v) in lanes.iter_mut().zip(ch) {
            *lane += v;
        }
    }
    let mut tail = 0.0f32;
    for &v in rem {
        tail += v;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_across_odd_sizes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (4, 9, 16), (5, 7, 17), (13, 20, 33), (16, 16, 48), (2, 100, 15)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0f32; m * n];
            gemm_accumulate(&mut c, &a, &b, m, k, n);
            let expect = gemm_naive(&a, &b, m, k, n);
            for (got, want) in c.iter().zip(&expect) {
                assert!((*got as f64 - want).abs() < 1e-4, "({m},{k},{n}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn strip_sweep_matches_packed_gemm_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(m, k, n, pw) in &[(4, 9, 16, 16), (16, 27, 64, 16), (9, 13, 40, 32), (3, 7, 5, 2), (8, 21, 100, 48)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let init: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut packed = init.clone();
            gemm_accumulate(&mut packed, &a, &b, m, k, n);
            let mut paneled = init;
            let mut p0 = 0;
            while p0 < n {
                let w = (n - p0).min(pw);
                let mut b_panel = vec![0.0f32; k * w];
                for kk in 0..k {
                    b_panel[kk * w..][..w].copy_from_slice(&b[kk * n + p0..][..w]);
                }
                gemm_strip::<true>(&mut paneled[p0..], n, &a, &b_panel, m, k, w);
                p0 += w;
            }
            assert_eq!(packed, paneled, "({m},{k},{n}) pw {pw}");
        }
    }

    #[test]
    fn strip_overwrite_matches_zero_filled_accumulate_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(m, k, w) in &[(4, 9, 16), (9, 13, 11), (16, 144, 40), (3, 0, 7)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut via_zero = vec![0.0f32; m * w];
            gemm_strip::<true>(&mut via_zero, w, &a, &b, m, k, w);
            let mut direct = vec![f32::NAN; m * w];
            gemm_strip::<false>(&mut direct, w, &a, &b, m, k, w);
            assert_eq!(via_zero, direct, "({m},{k},{w})");
        }
    }

    #[test]
    fn accumulates_into_existing_values() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0, 10.0];
        // 1x2 by 2x1 is a dot product; run twice to confirm accumulation.
        gemm_accumulate(&mut c[..1], &a, &b, 1, 2, 1);
        assert_eq!(c[0], 21.0);
        gemm_accumulate(&mut c[..1], &a, &b, 1, 2, 1);
        assert_eq!(c[0], 32.0);
    }

    #[cfg(target_feature = "avx512f")]
    #[test]
    fn intrinsic_tile_matches_generic_tile_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for &(m, k, n) in &[(8, 37, 16), (16, 9, 64), (9, 144, 48), (1, 5, 16)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let init: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut fast = init.clone();
            gemm_accumulate(&mut fast, &a, &b, m, k, n);
            let mut slow = init;
            let mut j0 = 0;
            while j0 + NT <= n {
                let mut i0 = 0;
                while i0 + MR <= m {
                    tile_generic::<MR, true>(&mut slow[j0..], n, &a, &b[j0..], n, i0, k);
                    i0 += MR;
                }
                while i0 < m {
                    tile_generic::<1, true>(&mut slow[j0..], n, &a, &b[j0..], n, i0, k);
                    i0 += 1;
                }
                j0 += NT;
            }
            if j0 < n {
                tail_panel::<true>(&mut slow[j0..], n, &a, &b[j0..], n, m, k, n - j0);
            }
            assert_eq!(fast, slow, "({m},{k},{n})");
        }
    }

    #[test]
    fn transpose_round_trip() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut t = vec![0.0f32; 12];
        let mut back = vec![0.0f32; 12];
        transpose(&mut t, &src, 3, 4);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 4.0);
        transpose(&mut back, &t, 4, 3);
        assert_eq!(back, src);
    }

    #[test]
    fn sum_fixed_matches_exact_on_integers() {
        let xs: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        assert_eq!(sum_fixed(&xs), 5050.0);
        assert_eq!(sum_fixed(&[]), 0.0);
        assert_eq!(sum_fixed(&[2.5]), 2.5);
    }
}
