//! Raw f64 kernels shared by the autodiff graph and the plain inference path.
//!
//! Every reduction here runs sequentially over ascending indices. Both the
//! batched (tape) forward and the incremental decoder call these same
//! routines, so recomputing a trajectory reproduces the rollout's floats
//! exactly rather than merely approximately.

/// Dot product, accumulated in ascending index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// C[m,n] = A[m,k] @ B[k,n]. `out` must be zeroed by the caller.
///
/// Loop order is i-p-j for cache locality; each C[i,j] still accumulates
/// its k-terms in ascending order, identical to a per-element dot.
pub fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, m, k, b, n, &mut out);
    out
}

/// C[m,n] = A[m,k] @ B[n,k]^T (rows of B as columns).
pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// C[k,n] = A[m,k]^T @ B[m,n]. Used by matmul backward.
pub fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

/// Softmax over one row restricted to a visible subset.
///
/// Entries with `visible[j] == false` come out as exactly 0.0; the max shift
/// and the normalizing sum run over visible entries only, in ascending order.
/// Returns false if no entry is visible (caller turns that into an error).
pub fn softmax_row_masked(x: &[f64], visible: &[bool], out: &mut [f64]) -> bool {
    debug_assert_eq!(x.len(), visible.len());
    debug_assert_eq!(x.len(), out.len());
    let mut m = f64::NEG_INFINITY;
    for j in 0..x.len() {
        if visible[j] && x[j] > m {
            m = x[j];
        }
    }
    if m == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for j in 0..x.len() {
        if visible[j] {
            let e = (x[j] - m).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for j in 0..x.len() {
        if visible[j] {
            out[j] /= sum;
        }
    }
    true
}

/// Softmax over one dense row (all entries visible).
pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut sum = 0.0;
    for j in 0..x.len() {
        let e = (x[j] - m).exp();
        out[j] = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Max-shift stabilized log-softmax over one dense row.
pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut sum = 0.0;
    for &v in x {
        sum += (v - m).exp();
    }
    let lse = m + sum.ln();
    for j in 0..x.len() {
        out[j] = x[j] - lse;
    }
}

pub const RMSNORM_EPS: f64 = 1e-6;

/// y = x / rms(x) * scale, rms(x) = sqrt(mean(x^2) + eps).
/// Returns the reciprocal rms so backward can reuse it.
pub fn rmsnorm_row(x: &[f64], scale: &[f64], out: &mut [f64]) -> f64 {
    debug_assert_eq!(x.len(), scale.len());
    let mut ms = 0.0;
    for &v in x {
        ms += v * v;
    }
    ms /= x.len() as f64;
    let r = 1.0 / (ms + RMSNORM_EPS).sqrt();
    for j in 0..x.len() {
        out[j] = x[j] * r * scale[j];
    }
    r
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximation GELU (smooth, finite-difference friendly).
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub fn gelu_deriv(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}
