//! Plain numeric kernels shared by the forward and backward passes.
//!
//! Every reduction runs in a fixed index order so that results are
//! bit-identical between runs.

/// `C[m,n] = A[m,k] * B[k,n]`, all row-major.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(a, b, m, k, n, &mut c);
    c
}

const MR: usize = 4;
const NR: usize = 4;

/// `C += A * B`, with `A: [m, k]`, `B: [k, n]`, `C: [m, n]` row-major.
///
/// Full 4x4 tiles of `C` are accumulated in registers over the whole `k`
/// range; leftover rows and columns fall back to plain loops.
pub fn gemm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 {
        return;
    }
    let n_main = n / NR * NR;
    let mut i = 0;
    while i + MR <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for ((((&x0, &x1), &x2), &x3), brow) in a0.iter().zip(a1).zip(a2).zip(a3).zip(b.chunks_exact(n)) {
                let bv: &[f64; NR] = brow[j..j + NR].try_into().expect("tile width");
                for s in 0..NR {
                    acc[0][s] += x0 * bv[s];
                    acc[1][s] += x1 * bv[s];
                    acc[2][s] += x2 * bv[s];
                    acc[3][s] += x3 * bv[s];
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                crow.iter_mut().zip(acc_r).for_each(|(cv, &v)| *cv += v);
            }
        }
        for r in i..i + MR {
            let arow = &a[r * k..(r + 1) * k];
            for jj in n_main..n {
                let s: f64 = arow.iter().zip(b.chunks_exact(n)).map(|(&av, brow)| av * brow[jj]).sum();
                c[r * n + jj] += s;
            }
        }
        i += MR;
    }
    for r in i..m {
        let arow = &a[r * k..(r + 1) * k];
        let crow = &mut c[r * n..(r + 1) * n];
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            crow.iter_mut().zip(brow).for_each(|(cv, &bv)| *cv += av * bv);
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Product of two row-major matrices, each optionally transposed first.
/// `a` is stored as `ar x ac`, `b` as `br x bc`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_t(
    a: &[f64],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[f64],
    br: usize,
    bc: usize,
    tb: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let at;
    let a_eff = if ta {
        at = transpose(a, ar, ac);
        &at[..]
    } else {
        a
    };
    let bt;
    let b_eff = if tb {
        bt = transpose(b, br, bc);
        &bt[..]
    } else {
        b
    };
    (gemm(a_eff, b_eff, m, k, n), m, n)
}

/// Unfolds a `[t, c]` sequence into `[t, k*c]` columns for a same-padded,
/// dilated 1-D convolution. Out-of-range taps read zeros.
pub fn im2col(x: &[f64], t: usize, c: usize, k: usize, dilation: usize) -> Vec<f64> {
    let half = (k / 2) as isize * dilation as isize;
    let mut cols = vec![0.0; t * k * c];
    for i in 0..t {
        for tap in 0..k {
            let src = i as isize + tap as isize * dilation as isize - half;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            let dst = i * k * c + tap * c;
            cols[dst..dst + c].copy_from_slice(&x[src * c..(src + 1) * c]);
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the sequence.
pub fn col2im(cols: &[f64], t: usize, c: usize, k: usize, dilation: usize, dx: &mut [f64]) {
    let half = (k / 2) as isize * dilation as isize;
    for i in 0..t {
        for tap in 0..k {
            let src = i as isize + tap as isize * dilation as isize - half;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            let from = i * k * c + tap * c;
            for (d, &g) in dx[src * c..(src + 1) * c].iter_mut().zip(&cols[from..from + c]) {
                *d += g;
            }
        }
    }
}
