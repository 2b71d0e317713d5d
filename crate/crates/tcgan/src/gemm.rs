//! Small fixed-layout matrix kernels for the convolution hot path.
//!
//! The convolution working set here is many medium-sized row-major
//! multiplies (for example 256×2304 times 2304×64 in the residual stages).
//! A general BLAS spends a large share of each call packing operands;
//! these kernels instead stream the row-major inputs directly while a
//! register-resident accumulator tile (up to 6 rows by 64 columns) produces
//! each output tile in one pass, which is markedly faster at the shapes
//! this crate actually uses. Outputs are overwritten, never accumulated,
//! so destination buffers are written exactly once.

use crate::autodiff::Scalar;

/// Rows processed together; at the widest (64-column) stripe the 6×4
/// accumulator registers plus operands stay within the 32-register budget.
const MB: usize = 6;

/// `c = a · b` with `a: (m,k)`, `b: (k,n)`, `c: (m,n)`, all row-major and
/// densely packed. `c` is overwritten without being read.
pub(crate) fn gemm_rm<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let _t = crate::autodiff::optime::start_dyn(format!("gemm {m}x{k}x{n}"));
    assert_eq!(a.len(), m * k, "gemm: a length");
    assert_eq!(b.len(), k * n, "gemm: b length");
    assert_eq!(c.len(), m * n, "gemm: c length");
    let mut jb = 0;
    while jb < n {
        // The tile extents are const generics so the accumulators are
        // indexed with compile-time constants and live in registers. Any
        // width decomposes into these stripes; only a remainder narrower
        // than the smallest stripe takes the unspecialized edge kernel.
        let rem = n - jb;
        let nb = match rem {
            64.. => {
                col_sweep::<F, 64>(m, jb, k, n, a, b, c);
                64
            }
            48..=63 => {
                col_sweep::<F, 48>(m, jb, k, n, a, b, c);
                48
            }
            32..=47 => {
                col_sweep::<F, 32>(m, jb, k, n, a, b, c);
                32
            }
            16..=31 => {
                col_sweep::<F, 16>(m, jb, k, n, a, b, c);
                16
            }
            8..=15 => {
                col_sweep::<F, 8>(m, jb, k, n, a, b, c);
                8
            }
            _ => {
                // Ragged remainder: zero-pad the b stripe to 8 columns, run
                // the 8-wide kernel, and copy the live columns back out.
                let mut bpad = vec![F::zero(); k * 8];
                for kk in 0..k {
                    bpad[kk * 8..kk * 8 + rem].copy_from_slice(&b[kk * n + jb..kk * n + jb + rem]);
                }
                let mut cpad = vec![F::zero(); m * 8];
                col_sweep::<F, 8>(m, 0, k, 8, a, &bpad, &mut cpad);
                for i in 0..m {
                    c[i * n + jb..i * n + jb + rem].copy_from_slice(&cpad[i * 8..i * 8 + rem]);
                }
                rem
            }
        };
        jb += nb;
    }
}

/// All row blocks of one column stripe of width `NBC`.
#[inline]
fn col_sweep<F: Scalar, const NBC: usize>(
    m: usize,
    jb: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
) {
    let mut ib = 0;
    while ib + MB <= m {
        block::<F, MB, NBC>(ib, jb, k, n, a, b, c);
        ib += MB;
    }
    match m - ib {
        5 => block::<F, 5, NBC>(ib, jb, k, n, a, b, c),
        4 => block::<F, 4, NBC>(ib, jb, k, n, a, b, c),
        3 => block::<F, 3, NBC>(ib, jb, k, n, a, b, c),
        2 => block::<F, 2, NBC>(ib, jb, k, n, a, b, c),
        1 => block::<F, 1, NBC>(ib, jb, k, n, a, b, c),
        _ => {}
    }
}

/// One `MR`-row by `NBC`-column output tile.
#[inline]
fn block<F: Scalar, const MR: usize, const NBC: usize>(
    ib: usize,
    jb: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
) {
    let mut acc = [[F::zero(); NBC]; MR];
    for kk in 0..k {
        // Copy the b row into a fixed-size local: it then sits in vector
        // registers and is reused by every row instead of being reloaded
        // as a memory operand of each fused multiply-add.
        let brow: [F; NBC] = b[kk * n + jb..kk * n + jb + NBC].try_into().unwrap();
        for i in 0..MR {
            let aik = a[(ib + i) * k + kk];
            for j in 0..NBC {
                acc[i][j] = aik.mul_add(brow[j], acc[i][j]);
            }
        }
    }
    for (i, accrow) in acc.iter().enumerate() {
        let base = (ib + i) * n + jb;
        let crow: &mut [F; NBC] = (&mut c[base..base + NBC]).try_into().unwrap();
        *crow = *accrow;
    }
}

/// Row-major transpose: `src: (rows, cols)` into `dst: (cols, rows)`,
/// blocked for cache locality.
pub(crate) fn transpose_rm<F: Scalar>(rows: usize, cols: usize, src: &[F], dst: &mut [F]) {
    assert_eq!(src.len(), rows * cols, "transpose: src length");
    assert_eq!(dst.len(), rows * cols, "transpose: dst length");
    const TB: usize = 32;
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + TB).min(rows);
        let mut c0 = 0;
        while c0 < cols {
            let c1 = (c0 + TB).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_ndarray_dot_on_assorted_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (m, k, n) in [
            (1, 1, 1),
            (6, 3, 64),
            (7, 5, 63),
            (13, 200, 65),
            (64, 64, 64),
            (256, 2304, 64),
            (5, 48, 1024),
            (100, 7, 129),
            (9, 33, 16),
            (17, 12, 48),
            (8, 20, 112),
            (3, 4, 8),
        ] {
            let a = rand_mat(&mut rng, m, k);
            let b = rand_mat(&mut rng, k, n);
            let want = a.dot(&b);
            let mut c = vec![0.0f64; m * n];
            gemm_rm(m, k, n, a.as_slice().unwrap(), b.as_slice().unwrap(), &mut c);
            for i in 0..m {
                for j in 0..n {
                    let w = want[[i, j]];
                    assert!(
                        (c[i * n + j] - w).abs() <= 1e-9 * w.abs().max(1.0),
                        "({m},{k},{n}) at ({i},{j}): {} vs {w}",
                        c[i * n + j]
                    );
                }
            }
        }
    }

    #[test]
    fn overwrites_stale_output_contents() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 4, 10);
        let b = rand_mat(&mut rng, 10, 8);
        let mut c = vec![2.5f64; 32];
        gemm_rm(4, 10, 8, a.as_slice().unwrap(), b.as_slice().unwrap(), &mut c);
        let want = a.dot(&b);
        for i in 0..4 {
            for j in 0..8 {
                assert!((c[i * 8 + j] - want[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[ignore]
    fn bench_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, k, n) in [
            (256usize, 2304usize, 64usize),
            (512, 512, 512),
            (64, 576, 1024),
            (256, 64, 2304),
            (64, 256, 2304),
            (512, 4096, 16),
            (16, 512, 4096),
        ] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![0.0f32; m * n];
            let reps = (2e9 / (2.0 * (m * k * n) as f64)).ceil() as usize;
            let t0 = std::time::Instant::now();
            for _ in 0..reps {
                gemm_rm(m, k, n, &a, &b, &mut c);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gf = 2.0 * (m * k * n) as f64 * reps as f64 / dt / 1e9;
            eprintln!("gemm ({m},{k},{n}): {gf:.1} GFLOPS");
        }
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(1, 1), (3, 5), (40, 33), (64, 64), (2304, 64)] {
            let src = rand_mat(&mut rng, r, c);
            let mut t = vec![0.0f64; r * c];
            transpose_rm(r, c, src.as_slice().unwrap(), &mut t);
            let mut back = vec![0.0f64; r * c];
            transpose_rm(c, r, &t, &mut back);
            assert_eq!(back, src.as_slice().unwrap(), "({r},{c})");
        }
    }
}
