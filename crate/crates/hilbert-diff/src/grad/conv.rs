//! Convolution kernels behind the tape ops: dense 3x3 grid convolution via
//! im2col plus a scattered depthwise convolution driven by precomputed taps.

/// `c = a·b + beta·c` over row-major slices, `a` is `m x k`, `b` is `k x n`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a·bᵗ + beta·c` where `b` is stored `n x k` row-major.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵗ·b + beta·c` where `a` is stored `k x m` row-major.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unfold an `h x w x cin` image (rows = pixels, channel-fastest) into the
/// `h*w x 9*cin` patch matrix of a 3x3 zero-padded convolution.
pub fn im2col3x3(x: &[f64], h: usize, w: usize, cin: usize, col: &mut [f64]) {
    debug_assert_eq!(x.len(), h * w * cin);
    debug_assert_eq!(col.len(), h * w * 9 * cin);
    col.fill(0.0);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * 9 * cin;
            for di in 0..3usize {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..3usize {
                    let jj = j as isize + dj as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = (ii as usize * w + jj as usize) * cin;
                    let dst = base + (di * 3 + dj) * cin;
                    col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
}

/// Adjoint of `im2col3x3`: scatter-add the patch-matrix cotangent back onto
/// the image.
pub fn col2im3x3_acc(col_adj: &[f64], h: usize, w: usize, cin: usize, adj_x: &mut [f64]) {
    debug_assert_eq!(adj_x.len(), h * w * cin);
    debug_assert_eq!(col_adj.len(), h * w * 9 * cin);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * 9 * cin;
            for di in 0..3usize {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..3usize {
                    let jj = j as isize + dj as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = (ii as usize * w + jj as usize) * cin;
                    let dst = base + (di * 3 + dj) * cin;
                    for c in 0..cin {
                        adj_x[src + c] += col_adj[dst + c];
                    }
                }
            }
        }
    }
}

/// 3x3 zero-padded convolution, kernel stored `9*cin x cout` row-major with
/// patch cell outermost.
pub fn conv2d_forward(x: &[f64], kernel: &[f64], h: usize, w: usize, cin: usize, cout: usize, out: &mut [f64]) {
    let mut col = vec![0.0; h * w * 9 * cin];
    im2col3x3(x, h, w, cin, &mut col);
    gemm_nn(h * w, 9 * cin, cout, &col, kernel, 0.0, out);
}

/// Accumulate both convolution cotangents; the patch matrix is recomputed
/// rather than kept alive on the tape.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    adj_out: &[f64],
    adj_x: &mut [f64],
    adj_kernel: &mut [f64],
) {
    let hw = h * w;
    let mut col = vec![0.0; hw * 9 * cin];
    im2col3x3(x, h, w, cin, &mut col);
    gemm_tn(9 * cin, hw, cout, &col, adj_out, 1.0, adj_kernel);
    let mut col_adj = vec![0.0; hw * 9 * cin];
    gemm_nt(hw, cout, 9 * cin, adj_out, kernel, 0.0, &mut col_adj);
    col2im3x3_acc(&col_adj, h, w, cin, adj_x);
}

/// One source-to-destination contribution of the scattered depthwise
/// convolution. The kernel value at the continuous offset is read by
/// bilinear interpolation of up to four kernel cells; `weights` are the
/// bilinear coefficients pre-scaled by `1/|N(dst)|`. Exact cell hits carry a
/// single entry, which the kernels below exploit.
#[derive(Clone, Copy, Debug)]
pub struct SparseTap {
    pub dst: u32,
    pub src: u32,
    pub ncells: u8,
    pub cells: [u32; 4],
    pub weights: [f64; 4],
}

/// Tap list of a depthwise convolution over one fixed point cloud.
#[derive(Clone, Debug, Default)]
pub struct SparseConvPlan {
    pub taps: Vec<SparseTap>,
    pub num_points: usize,
    /// Kernel grid cells, `side * side`.
    pub kernel_cells: usize,
}

fn tap_kernel_row(tap: &SparseTap, kernel: &[f64], channels: usize, kval: &mut [f64]) {
    if tap.ncells == 1 {
        let w = tap.weights[0];
        let row = &kernel[tap.cells[0] as usize * channels..][..channels];
        for (kv, k) in kval.iter_mut().zip(row) {
            *kv = w * k;
        }
        return;
    }
    kval.fill(0.0);
    for j in 0..tap.ncells as usize {
        let w = tap.weights[j];
        if w == 0.0 {
            continue;
        }
        let row = &kernel[tap.cells[j] as usize * channels..][..channels];
        for (kv, k) in kval.iter_mut().zip(row) {
            *kv += w * k;
        }
    }
}

/// `out[dst] = sum over taps of kernel(offset) ⊙ x[src]`, averaged into the
/// pre-scaled weights.
pub fn sparse_conv_forward(plan: &SparseConvPlan, x: &[f64], kernel: &[f64], channels: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), plan.num_points * channels);
    debug_assert_eq!(kernel.len(), plan.kernel_cells * channels);
    debug_assert_eq!(out.len(), plan.num_points * channels);
    out.fill(0.0);
    let mut kval = vec![0.0; channels];
    for tap in &plan.taps {
        tap_kernel_row(tap, kernel, channels, &mut kval);
        let xs = &x[tap.src as usize * channels..][..channels];
        let o = &mut out[tap.dst as usize * channels..][..channels];
        for c in 0..channels {
            o[c] += kval[c] * xs[c];
        }
    }
}

/// Accumulate cotangents for both the point values and the kernel grid.
pub fn sparse_conv_backward(
    plan: &SparseConvPlan,
    x: &[f64],
    kernel: &[f64],
    channels: usize,
    adj_out: &[f64],
    adj_x: &mut [f64],
    adj_kernel: &mut [f64],
) {
    let mut kval = vec![0.0; channels];
    for tap in &plan.taps {
        let go = &adj_out[tap.dst as usize * channels..][..channels];
        let xs = &x[tap.src as usize * channels..][..channels];
        tap_kernel_row(tap, kernel, channels, &mut kval);
        let ax = &mut adj_x[tap.src as usize * channels..][..channels];
        for c in 0..channels {
            ax[c] += kval[c] * go[c];
        }
        for j in 0..tap.ncells as usize {
            let w = tap.weights[j];
            if w == 0.0 {
                continue;
            }
            let ak = &mut adj_kernel[tap.cells[j] as usize * channels..][..channels];
            for c in 0..channels {
                ak[c] += w * xs[c] * go[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn gemm_wrappers_match_naive_products() {
        let (m, k, n) = (5, 7, 3);
        let a = randv(m * k, 1);
        let b = randv(k * n, 2);
        let want = oracles::matmul_naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵗ route: feed a stored transposed.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, 0.0, &mut c2);
        // bᵗ route: feed b stored transposed.
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, 0.0, &mut c3);
        for i in 0..m * n {
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let (h, w, cin, cout) = (5, 4, 3, 2);
        let x = randv(h * w * cin, 3);
        let kernel = randv(9 * cin * cout, 4);
        let mut got = vec![0.0; h * w * cout];
        conv2d_forward(&x, &kernel, h, w, cin, cout, &mut got);
        let want = oracles::conv3x3_direct(&x, h, w, cin, cout, &kernel);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), y> must equal <x, col2im(y)> for random x, y.
        let (h, w, cin) = (4, 3, 2);
        let x = randv(h * w * cin, 5);
        let y = randv(h * w * 9 * cin, 6);
        let mut col = vec![0.0; y.len()];
        im2col3x3(&x, h, w, cin, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im3x3_acc(&y, h, w, cin, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn sparse_conv_single_cell_taps_shortcut_matches_general_path() {
        // The same tap written as one cell vs. four cells with three zero
        // weights must produce identical output.
        let channels = 3;
        let kernel = randv(9 * channels, 7);
        let x = randv(2 * channels, 8);
        let single = SparseConvPlan {
            taps: vec![SparseTap { dst: 0, src: 1, ncells: 1, cells: [4, 0, 0, 0], weights: [0.5, 0.0, 0.0, 0.0] }],
            num_points: 2,
            kernel_cells: 9,
        };
        let padded = SparseConvPlan {
            taps: vec![SparseTap { dst: 0, src: 1, ncells: 4, cells: [4, 1, 2, 3], weights: [0.5, 0.0, 0.0, 0.0] }],
            num_points: 2,
            kernel_cells: 9,
        };
        let mut a = vec![0.0; x.len()];
        let mut b = vec![0.0; x.len()];
        sparse_conv_forward(&single, &x, &kernel, channels, &mut a);
        sparse_conv_forward(&padded, &x, &kernel, channels, &mut b);
        assert_eq!(a, b);
    }
}
