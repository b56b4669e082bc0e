//! Row-level float kernels shared by the autodiff graph and the incremental
//! inference path. Both sides must accumulate in the same order so that
//! streamed and offline forward passes stay bit-identical.

pub const LN_EPS: f32 = 1e-5;

/// C[i,j] = sum_k A[i,k] * B[k,j], k ascending. Row-major.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f32;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// out[j] = sum_i x[i] * W[i,j]; same accumulation order as one `matmul` row.
pub fn matvec(x: &[f32], w: &[f32], k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![0.0f32; n];
    for j in 0..n {
        let mut s = 0.0f32;
        for i in 0..k {
            s += x[i] * w[i * n + j];
        }
        out[j] = s;
    }
    out
}

pub fn add_assign(a: &mut [f32], b: &[f32]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += *y;
    }
}

/// In-place stable softmax. `-inf` entries become exact zeros and do not
/// perturb the finite part of the sum.
pub fn softmax_row(row: &mut [f32]) {
    let mut m = f32::NEG_INFINITY;
    for &x in row.iter() {
        if x > m {
            m = x;
        }
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// In-place stable log-softmax.
pub fn log_softmax_row(row: &mut [f32]) {
    let mut m = f32::NEG_INFINITY;
    for &x in row.iter() {
        if x > m {
            m = x;
        }
    }
    let mut sum = 0.0f32;
    for &x in row.iter() {
        sum += (x - m).exp();
    }
    let lse = m + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

pub fn logsumexp_row(row: &[f32]) -> f32 {
    let mut m = f32::NEG_INFINITY;
    for &x in row.iter() {
        if x > m {
            m = x;
        }
    }
    if m == f32::NEG_INFINITY {
        return f32::NEG_INFINITY;
    }
    let mut sum = 0.0f32;
    for &x in row.iter() {
        sum += (x - m).exp();
    }
    m + sum.ln()
}

/// Per-row layer norm with affine: out = (x - mean) / sqrt(var + eps) * g + b.
pub fn layernorm_row(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len();
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= n as f32;
    let mut var = 0.0f32;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n as f32;
    let inv = 1.0f32 / (var + LN_EPS).sqrt();
    for i in 0..n {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// tanh-approximation GELU; smooth, so finite-difference checks behave.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Periodic sinusoidal position features: pairs (sin, cos) with a fixed
/// geometric period ladder 4 * 1.6^p. Purely periodic (no monotone ramp) so
/// the same phase arithmetic transfers beyond the training range, and the
/// ladder is independent of `dim`: a low-dimensional code (anchor queries) is
/// a prefix of a high-dimensional one (decoder slot phases), so comparing a
/// position against an anchor is a sparse bilinear form instead of a
/// cross-ladder interpolation.
pub fn periodic_posenc(t: usize, dim: usize) -> Vec<f32> {
    let pairs = dim / 2;
    let mut out = vec![0.0f32; dim];
    for p in 0..pairs {
        let period = 4.0f32 * 1.6f32.powi(p as i32);
        let phase = 2.0 * std::f32::consts::PI * (t as f32) / period;
        out[2 * p] = phase.sin();
        out[2 * p + 1] = phase.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        assert_eq!(matmul(&i2, &b, 2, 2, 2), b);
    }

    #[test]
    fn matvec_matches_matmul_row() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let c = matmul(&a, &b, 1, 2, 1);
        assert_eq!(c, vec![11.0]);
        assert_eq!(matvec(&a, &b, 2, 1), vec![11.0]);
    }

    #[test]
    fn softmax_handles_neg_inf_and_large_values() {
        let mut r = vec![1000.0, 0.0];
        softmax_row(&mut r);
        assert_eq!(r, vec![1.0, 0.0]);

        let mut masked = vec![0.3, f32::NEG_INFINITY, 0.3];
        let mut plain = vec![0.3, f32::NEG_INFINITY, 0.3];
        softmax_row(&mut masked);
        softmax_row(&mut plain);
        assert_eq!(masked, plain);
        assert_eq!(masked[1], 0.0);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = vec![2.5; 4];
        let g = vec![1.0; 4];
        let b = vec![0.0; 4];
        let mut out = vec![0.0; 4];
        layernorm_row(&x, &g, &b, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-6));
    }
}
