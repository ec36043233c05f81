//! Slice-level numeric kernels shared by the inference path and the tape.
//!
//! Every routine processes output rows independently and in a fixed order,
//! so computing one row alone gives bit-identical results to computing it
//! as part of a larger matrix. The streaming cache relies on this.

pub const LN_EPS: f32 = 1e-5;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * w;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn matmul_tn_acc(a: &[f32], g: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += x * gv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` for `b[k×n]`.
pub fn matmul_nt_acc(g: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn add_row_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Max-subtracted softmax in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `ln Σ exp(row)` with max subtraction, accumulated in `f64`.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}

/// Normalizes one row; returns `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_row(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) -> (f32, f32) {
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS as f64).sqrt();
    for i in 0..x.len() {
        let xhat = ((x[i] as f64 - mean) * rstd) as f32;
        out[i] = xhat * gain[i] + bias[i];
    }
    (mean as f32, rstd as f32)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values_and_derivative() {
        assert_eq!(gelu(0.0), 0.0);
        // Reference values of the tanh form.
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
        assert!((gelu(6.0) - 6.0).abs() < 1e-5 && gelu(-6.0).abs() < 1e-5);
        let f = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_8 * (x + 0.044_715 * x * x * x)).tanh());
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let num = (f(x + 1e-6) - f(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x as f32) as f64 - num).abs() < 1e-5, "x = {x}");
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect(); // 2×3
        let g: Vec<f32> = (0..8).map(|v| (v as f32).sin()).collect(); // 2×4
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let expect = matmul(&at, &g, 3, 2, 4);
        let mut got = vec![0.0; 12];
        matmul_tn_acc(&a, &g, &mut got, 2, 3, 4);
        for (x, y) in expect.iter().zip(&got) {
            assert!((x - y).abs() < 1e-6);
        }

        let b: Vec<f32> = (0..12).map(|v| (v as f32).cos()).collect(); // 3×4
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let expect = matmul(&g, &bt, 2, 4, 3);
        let mut got = vec![0.0; 6];
        matmul_nt_acc(&g, &b, &mut got, 2, 3, 4);
        for (x, y) in expect.iter().zip(&got) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn softmax_sums_to_one_even_for_large_logits() {
        let mut r = vec![1000.0, 999.0, -5.0, 0.0];
        softmax_in_place(&mut r);
        let s: f32 = r.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_row_matmul_is_bit_identical_to_batched_row() {
        let a: Vec<f32> = (0..5 * 7).map(|v| ((v * 37 % 11) as f32 - 5.0) * 0.13).collect();
        let b: Vec<f32> = (0..7 * 3).map(|v| ((v * 17 % 13) as f32 - 6.0) * 0.07).collect();
        let full = matmul(&a, &b, 5, 7, 3);
        for i in 0..5 {
            let one = matmul(&a[i * 7..(i + 1) * 7], &b, 1, 7, 3);
            assert_eq!(&full[i * 3..(i + 1) * 3], &one[..]);
        }
    }
}
