use rand::Rng;

use super::tape::{Tape, Var};
use super::{params::rng, ParamId, ParameterSet};
use crate::error::{Error, Result};

/// Coordinates whose numeric and analytic gradients differ by at most this
/// much are treated as agreeing, whatever their relative error.
pub const ABS_TOLERANCE: f64 = 1e-6;

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|num − ana| / max(|num|, |ana|)`, or 0 within [`ABS_TOLERANCE`].
    pub fn relative_error(&self) -> f64 {
        let diff = (self.numeric - self.analytic).abs();
        if diff <= ABS_TOLERANCE {
            0.0
        } else {
            diff / self.numeric.abs().max(self.analytic.abs())
        }
    }
}

/// Central differences against backward-pass gradients on `probes`
/// coordinates drawn uniformly (with replacement) from the trainable
/// parameters. `build` must record the loss on a fresh tape deterministically.
pub fn probe_gradients<F>(ps: &mut ParameterSet, probes: usize, eps: f32, seed: u64, build: F) -> Result<Vec<Probe>>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    if probes == 0 {
        return Err(Error::Contract("at least one probe is required".into()));
    }
    let eval = |ps: &ParameterSet| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, ps)?;
        let v = tape.scalar_f64(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss is {v}")));
        }
        Ok((tape, loss))
    };
    let (tape, loss) = eval(ps)?;
    let grads = tape.backward(loss);

    let candidates: Vec<(ParamId, usize)> = ps
        .ids()
        .filter(|&id| ps.iter().nth(id.index()).is_some_and(|p| p.trainable))
        .flat_map(|id| (0..ps.get(id).numel()).map(move |i| (id, i)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Contract("no trainable coordinates to probe".into()));
    }
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let (id, i) = candidates[r.random_range(0..candidates.len())];
        let analytic = grads.param(id).map_or(0.0, |g| g[i] as f64);
        let orig = ps.get(id).data()[i];
        ps.get_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(ps).map(|(t, l)| t.scalar_f64(l));
        ps.get_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(ps).map(|(t, l)| t.scalar_f64(l));
        ps.get_mut(id).data_mut()[i] = orig;
        // The perturbed value is what the forward pass actually saw.
        let h = (orig + eps) as f64 - (orig - eps) as f64;
        out.push(Probe {
            param: id,
            index: i,
            analytic,
            numeric: (plus? - minus?) / h,
        });
    }
    Ok(out)
}

/// Largest relative error over [`probe_gradients`].
pub fn finite_difference_check<F>(ps: &mut ParameterSet, probes: usize, eps: f32, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let probes = probe_gradients(ps, probes, eps, seed, build)?;
    Ok(probes.iter().map(Probe::relative_error).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn linear_sum_has_unit_gradient() {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::vector(vec![0.3, -1.2, 4.0, 0.0]));
        let err = finite_difference_check(&mut ps, 16, 1e-3, 1, |tape, ps| {
            let w = tape.param(ps, id);
            Ok(tape.sum(w))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn zero_gradient_coordinates_pass() {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let err = finite_difference_check(&mut ps, 8, 1e-3, 2, |tape, ps| {
            let w = tape.param(ps, id);
            let z = tape.scale(w, 0.0);
            Ok(tape.sum(z))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::vector(vec![f32::INFINITY]));
        let res = finite_difference_check(&mut ps, 1, 1e-3, 3, |tape, ps| {
            let w = tape.param(ps, id);
            Ok(tape.sum(w))
        });
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // w + detach(w): the forward value moves at rate 2, backward reports 1.
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::vector(vec![0.5, 1.5]));
        let err = finite_difference_check(&mut ps, 4, 1e-3, 4, |tape, ps| {
            let w = tape.param(ps, id);
            let d = tape.detach(w);
            let s = tape.add(w, d);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn linear_layer_norm_cross_entropy() {
        use crate::nn::params::{rng, Init};
        use rand::Rng;
        let mut r = rng(5);
        let mut ps = ParameterSet::new();
        let w = ps.add("w", vec![5, 4], Init::Uniform, &mut r);
        let b = ps.add("b", vec![4], Init::Uniform, &mut r);
        let gain = ps.insert("gain", Tensor::vector((0..4).map(|_| r.random_range(0.5..1.5)).collect()));
        let shift = ps.add("shift", vec![4], Init::Uniform, &mut r);
        let x: Vec<f32> = (0..3 * 5).map(|_| r.random_range(-1.0..1.0)).collect();
        let probes = probe_gradients(&mut ps, 40, 1e-3, 6, |tape, ps| {
            let xv = tape.input(3, 5, x.clone());
            let (wv, bv) = (tape.param(ps, w), tape.param(ps, b));
            let h = tape.matmul(xv, wv);
            let h = tape.add_row(h, bv);
            let (g, s) = (tape.param(ps, gain), tape.param(ps, shift));
            let z = tape.layer_norm(h, g, s);
            tape.softmax_ce(z, &[2, 0, 3], &[true; 3])
        })
        .unwrap();
        assert!(probes.iter().all(|p| p.relative_error() <= 1e-2), "{probes:?}");
    }
}
