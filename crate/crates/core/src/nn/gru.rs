//! Gated recurrent unit.
//!
//! Gate layout follows the common `[reset, update, candidate]` column order:
//!
//! ```text
//! r  = σ(x Wx_r + bx_r + h Wh_r + bh_r)
//! z  = σ(x Wx_z + bx_z + h Wh_z + bh_z)
//! n  = tanh(x Wx_n + bx_n + r ⊙ (h Wh_n + bh_n))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use rand_chacha::ChaCha8Rng;

use super::kernels::{self, sigmoid};
use super::tape::{Tape, Var};
use super::{Init, ParamId, ParameterSet};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl Gru {
    pub fn new(ps: &mut ParameterSet, name: &str, d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        Gru {
            wx: ps.add(&format!("{name}.wx"), vec![d_in, 3 * d_h], Init::Uniform, rng),
            wh: ps.add(&format!("{name}.wh"), vec![d_h, 3 * d_h], Init::Uniform, rng),
            bx: ps.add(&format!("{name}.bx"), vec![3 * d_h], Init::Zeros, rng),
            bh: ps.add(&format!("{name}.bh"), vec![3 * d_h], Init::Zeros, rng),
            d_in,
            d_h,
        }
    }

    pub fn cell(&self, ps: &ParameterSet, x: &[f32], h: &[f32]) -> Result<Vec<f32>> {
        gru_cell(x, h, ps.data(self.wx), ps.data(self.wh), ps.data(self.bx), ps.data(self.bh))
    }

    /// One step for a batch: `x` is `[B×d_in]`, `h` is `[B×d_h]`.
    pub fn tape_step(&self, tape: &mut Tape, ps: &ParameterSet, x: Var, h: Var) -> Var {
        let dh = self.d_h;
        let wx = tape.param(ps, self.wx);
        let wh = tape.param(ps, self.wh);
        let bx = tape.param(ps, self.bx);
        let bh = tape.param(ps, self.bh);
        let gx = tape.matmul(x, wx);
        let gx = tape.add_row(gx, bx);
        let gh = tape.matmul(h, wh);
        let gh = tape.add_row(gh, bh);
        let gate = |tape: &mut Tape, i: usize| {
            let a = tape.slice_cols(gx, i * dh, dh);
            let b = tape.slice_cols(gh, i * dh, dh);
            (a, b)
        };
        let (xr, hr) = gate(tape, 0);
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);
        let (xz, hz) = gate(tape, 1);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);
        let (xn, hn) = gate(tape, 2);
        let rn = tape.mul(r, hn);
        let n = tape.add(xn, rn);
        let n = tape.tanh(n);
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }
}

/// Single GRU update on raw slices.
pub fn gru_cell(x: &[f32], h: &[f32], wx: &[f32], wh: &[f32], bx: &[f32], bh: &[f32]) -> Result<Vec<f32>> {
    let (d_in, d_h) = (x.len(), h.len());
    if wx.len() != d_in * 3 * d_h || wh.len() != d_h * 3 * d_h || bx.len() != 3 * d_h || bh.len() != 3 * d_h {
        return Err(contract(format!("gru: input {d_in}, hidden {d_h} do not match weights")));
    }
    let mut gx = kernels::matmul(x, wx, 1, d_in, 3 * d_h);
    kernels::add_row_bias(&mut gx, bx);
    let mut gh = kernels::matmul(h, wh, 1, d_h, 3 * d_h);
    kernels::add_row_bias(&mut gh, bh);
    let mut out = vec![0.0; d_h];
    for j in 0..d_h {
        let r = sigmoid(gx[j] + gh[j]);
        let z = sigmoid(gx[d_h + j] + gh[d_h + j]);
        let n = (gx[2 * d_h + j] + r * gh[2 * d_h + j]).tanh();
        out[j] = n + z * (h[j] - n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::rng;
    use rand::Rng;

    #[test]
    fn zero_weights_halve_the_state() {
        let (wx, wh, b) = (vec![0.0; 2 * 9], vec![0.0; 9 * 3], vec![0.0; 9]);
        let h = [0.4, -1.0, 2.0];
        let out = gru_cell(&[1.0, 2.0], &h, &wx, &wh, &b, &b).unwrap();
        assert_eq!(out, vec![0.2, -0.5, 1.0]);
        let out = gru_cell(&[1.0, 2.0], &[0.0; 3], &wx, &wh, &b, &b).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(gru_cell(&[1.0], &[0.0; 2], &[0.0; 6], &[0.0; 12], &[0.0; 6], &[0.0; 5]).is_err());
    }

    #[test]
    fn matches_scalar_gate_oracle() {
        let mut ps = ParameterSet::new();
        let mut r = rng(3);
        let g = Gru::new(&mut ps, "g", 4, 3, &mut r);
        for id in [g.bx, g.bh] {
            for v in ps.get_mut(id).data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        let x: Vec<f32> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let h: Vec<f32> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = g.cell(&ps, &x, &h).unwrap();
        let (wx, wh, bx, bh) = (ps.data(g.wx), ps.data(g.wh), ps.data(g.bx), ps.data(g.bh));
        let pre = |gate: usize, j: usize| -> (f64, f64) {
            let c = gate * 3 + j;
            let a: f64 = (0..4).map(|k| x[k] as f64 * wx[k * 9 + c] as f64).sum::<f64>() + bx[c] as f64;
            let b: f64 = (0..3).map(|k| h[k] as f64 * wh[k * 9 + c] as f64).sum::<f64>() + bh[c] as f64;
            (a, b)
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..3 {
            let (ra, rb) = pre(0, j);
            let (za, zb) = pre(1, j);
            let (na, nb) = pre(2, j);
            let r = sig(ra + rb);
            let z = sig(za + zb);
            let n = (na + r * nb).tanh();
            let want = (1.0 - z) * n + z * h[j] as f64;
            assert!((got[j] as f64 - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn tape_step_matches_cell() {
        let mut ps = ParameterSet::new();
        let mut r = rng(4);
        let g = Gru::new(&mut ps, "g", 5, 4, &mut r);
        let x: Vec<f32> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let h: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(2, 5, x.clone());
        let hv = tape.constant(2, 4, h.clone());
        let out = g.tape_step(&mut tape, &ps, xv, hv);
        for b in 0..2 {
            let want = g.cell(&ps, &x[b * 5..(b + 1) * 5], &h[b * 4..(b + 1) * 4]).unwrap();
            for j in 0..4 {
                assert!((tape.value(out)[b * 4 + j] - want[j]).abs() <= 1e-6);
            }
        }
    }
}
