//! Scalar f64 kernels behind the tensor ops.
//!
//! Everything here is written so the accumulation order is fixed by the code
//! structure (chunked independent accumulators, reduced in a fixed tree).
//! The compiler may vectorize freely; it cannot change the result.

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    let (a8, a_tail) = a.split_at(chunks * 8);
    let (b8, b_tail) = b.split_at(chunks * 8);
    for (ca, cb) in a8.chunks_exact(8).zip(b8.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in a_tail.iter().zip(b_tail) {
        tail += x * y;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// `y[i] += a * x[i]`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Sum with eight independent accumulators (fixed reduction order).
#[inline]
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    let (a8, tail) = a.split_at(chunks * 8);
    for ca in a8.chunks_exact(8) {
        for l in 0..8 {
            acc[l] += ca[l];
        }
    }
    let mut t = 0.0;
    for x in tail {
        t += x;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + t
}

/// `C += A * B` for row-major `A: m x k`, `B: k x n`, `C: m x n`.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(crow, aip, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `y = x @ w^T + bias` for `x: m x k`, `w: n x k` (row per output), `y: m x n`.
pub fn linear_forward(y: &mut [f64], x: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(bias.len(), n);
    debug_assert_eq!(y.len(), m * n);
    for i in 0..m {
        let xrow = &x[i * k..(i + 1) * k];
        let yrow = &mut y[i * n..(i + 1) * n];
        for (o, yv) in yrow.iter_mut().enumerate() {
            *yv = dot(xrow, &w[o * k..(o + 1) * k]) + bias[o];
        }
    }
}

/// `dx += g @ w` for `g: m x n`, `w: n x k`, `dx: m x k`.
pub fn linear_backward_input(dx: &mut [f64], g: &[f64], w: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let dxrow = &mut dx[i * k..(i + 1) * k];
        for (o, &gio) in grow.iter().enumerate() {
            axpy(dxrow, gio, &w[o * k..(o + 1) * k]);
        }
    }
}

/// `dw += g^T @ x` and `db += column sums of g`.
pub fn linear_backward_params(
    dw: &mut [f64],
    db: &mut [f64],
    g: &[f64],
    x: &[f64],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let xrow = &x[i * k..(i + 1) * k];
        for (o, &gio) in grow.iter().enumerate() {
            axpy(&mut dw[o * k..(o + 1) * k], gio, xrow);
            db[o] += gio;
        }
    }
}
