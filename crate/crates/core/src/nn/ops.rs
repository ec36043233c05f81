//! Shape-checked forward operations on [`Tensor`]s.
//!
//! These are the inference-path counterparts of the tape operations and share
//! the same kernels, so a value computed here matches the tape bit for bit.

use super::kernels;
use super::Tensor;
use crate::error::{contract, Error, Result};

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(contract(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// `y = xW + b`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, d_in) = matrix_dims(x, "x")?;
    let (w_in, d_out) = matrix_dims(w, "W")?;
    if w_in != d_in || b.numel() != d_out {
        return Err(contract(format!(
            "linear: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = kernels::matmul(x.data(), w.data(), t, d_in, d_out);
    kernels::add_row_bias(&mut y, b.data());
    Tensor::new(vec![t, d_out], y)
}

/// Per-row normalization (ε = 1e-5) followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t, d) = matrix_dims(x, "x")?;
    if d == 0 || gain.numel() != d || bias.numel() != d {
        return Err(contract("layer norm: gain/bias must match row width"));
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        kernels::layer_norm_row(x.row(i), gain.data(), bias.data(), &mut out[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![t, d], out)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (t, c) = matrix_dims(x, "x")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        kernels::softmax_in_place(row);
    }
    Tensor::new(vec![t, c], out)
}

/// Mean negative log-likelihood over unmasked rows.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f32> {
    let (t, c) = matrix_dims(logits, "logits")?;
    if targets.len() != t || mask.len() != t {
        return Err(contract(format!("{t} logit rows, {} targets, {} mask flags", targets.len(), mask.len())));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        if targets[i] >= c {
            return Err(Error::Input(format!("target {} outside {c} classes", targets[i])));
        }
        let row = logits.row(i);
        total += kernels::log_sum_exp(row) - row[targets[i]] as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate("every position is masked".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    (0..x.rows()).map(|i| kernels::argmax(x.row(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tape::Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = linear_forward(&x, &eye, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(vec![5, 3], &mut rng);
        let y = linear_forward(&x, &Tensor::zeros(vec![3, 2]), &Tensor::vector(vec![3.0, 3.0])).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn linear_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![3, 4], &mut rng);
        let w = random(vec![4, 5], &mut rng);
        let b = random(vec![5], &mut rng);
        let y = linear_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = b.data()[j] as f64;
                for k in 0..4 {
                    s += x.data()[i * 4 + k] as f64 * w.data()[k * 5 + j] as f64;
                }
                assert!((y.data()[i * 5 + j] as f64 - s).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let x = Tensor::zeros(vec![2, 3]);
        let w = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            linear_forward(&x, &w, &Tensor::zeros(vec![2])),
            Err(Error::Contract(_))
        ));
        let w = Tensor::zeros(vec![3, 2]);
        assert!(linear_forward(&x, &w, &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn linear_backward_gives_exact_gradients() {
        // loss = Σ (xW + b) ⇒ dL/dx = row sums of W, dL/dW[k][j] = Σ_i x[i][k], dL/db = T.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(vec![3, 4], &mut rng);
        let w = random(vec![4, 2], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.input(3, 4, x.data().to_vec());
        let wv = tape.input(4, 2, w.data().to_vec());
        let bv = tape.input(1, 2, vec![0.5, -0.5]);
        let y = tape.matmul(xv, wv);
        let y = tape.add_row(y, bv);
        let loss = tape.sum(y);
        let g = tape.backward(loss);
        for i in 0..3 {
            for k in 0..4 {
                let want = w.data()[k * 2] + w.data()[k * 2 + 1];
                assert!((g.of(xv).unwrap()[i * 4 + k] - want).abs() < 1e-6);
            }
        }
        for k in 0..4 {
            let col: f32 = (0..3).map(|i| x.data()[i * 4 + k]).sum();
            assert!((g.of(wv).unwrap()[k * 2] - col).abs() < 1e-6);
        }
        assert_eq!(g.of(bv).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::vector(vec![1.0; 4]);
        let zero = Tensor::zeros(vec![4]);
        let y = layer_norm(&Tensor::filled(vec![1, 4], 2.5), &one, &zero).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(
            &Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap(),
            &Tensor::vector(vec![1.0; 2]),
            &Tensor::zeros(vec![2]),
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4 && (y.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_matches_mean_variance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(vec![1, 7], &mut rng);
        let g = random(vec![7], &mut rng);
        let b = random(vec![7], &mut rng);
        let y = layer_norm(&x, &g, &b).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / 7.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for j in 0..7 {
            let want = (xs[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] as f64 + b.data()[j] as f64;
            assert!((y.data()[j] as f64 - want).abs() <= 1e-6, "{j}");
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let loss = softmax_cross_entropy(&Tensor::zeros(vec![1, 4]), &[2], &[true]).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        let sat = Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap();
        assert!(softmax_cross_entropy(&sat, &[1], &[true]).unwrap() <= 1e-6);
        assert!(matches!(
            softmax_cross_entropy(&sat, &[1], &[false]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(softmax_cross_entropy(&sat, &[3], &[true]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(vec![6, 5], &mut rng);
        let targets: Vec<usize> = (0..6).map(|i| (i * 3) % 5).collect();
        let mask = [true, false, true, true, false, true];
        let got = softmax_cross_entropy(&logits, &targets, &mask).unwrap() as f64;
        let mut want = 0.0;
        for i in [0, 2, 3, 5] {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[targets[i]];
        }
        assert!((got - want / 4.0).abs() <= 1e-6);
    }

    #[test]
    fn tape_cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random(vec![3, 4], &mut rng);
        let mut tape = Tape::new();
        let lv = tape.input(3, 4, logits.data().to_vec());
        let loss = tape.softmax_ce(lv, &[0, 3, 1], &[true, true, false]).unwrap();
        assert_eq!(
            tape.scalar(loss),
            softmax_cross_entropy(&logits, &[0, 3, 1], &[true, true, false]).unwrap()
        );
        let g = tape.backward(loss);
        let probs = softmax_rows(&logits).unwrap();
        for (i, t) in [(0usize, 0usize), (1, 3)] {
            for j in 0..4 {
                let onehot = if j == t { 1.0 } else { 0.0 };
                let want = (probs.data()[i * 4 + j] - onehot) / 2.0;
                assert!((g.of(lv).unwrap()[i * 4 + j] - want).abs() < 1e-6);
            }
        }
        assert!(g.of(lv).unwrap()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(vec![10, 9], &mut rng);
        let p = softmax_rows(&x).unwrap();
        for i in 0..10 {
            let s: f64 = p.row(i).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}
