use super::ParameterSet;
use crate::error::{contract, Result};

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f32) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// Updates every trainable parameter from its gradient buffer, then
    /// clears all gradients. Frozen parameters are left untouched.
    pub fn step(&self, ps: &mut ParameterSet) -> Result<()> {
        if let Some(p) = ps.iter().find(|p| p.trainable && p.value.grad().is_none()) {
            return Err(contract(format!("no gradient for trainable parameter {}", p.name)));
        }
        let t = ps.bump_step() as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        for p in ps.params_mut() {
            if !p.trainable {
                p.value.clear_grad();
                continue;
            }
            let g = p.value.grad().expect("checked above").to_vec();
            let data = p.value.data_mut();
            for i in 0..data.len() {
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g[i];
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = p.m[i] as f64 / c1;
                let v_hat = p.v[i] as f64 / c2;
                data[i] -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
            p.value.clear_grad();
        }
        Ok(())
    }
}

pub fn adam_step(ps: &mut ParameterSet, lr: f32) -> Result<()> {
    Adam::with_lr(lr).step(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_set(w: f32) -> (ParameterSet, crate::nn::ParamId) {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::vector(vec![w]));
        (ps, id)
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        for g in [0.37f32, -5.0, 1e-3] {
            let (mut ps, id) = scalar_set(1.0);
            ps.get_mut(id).accumulate_grad(&[g]).unwrap();
            adam_step(&mut ps, 1e-3).unwrap();
            let delta = ps.data(id)[0] - 1.0;
            assert!((delta + 1e-3 * g.signum()).abs() <= 1e-6 * 1e-3 + 1e-7, "{g}: {delta}");
            assert!(ps.get(id).grad().is_none());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut ps, id) = scalar_set(0.25);
        ps.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        adam_step(&mut ps, 1e-3).unwrap();
        assert_eq!(ps.data(id)[0], 0.25);
    }

    #[test]
    fn quadratic_descends() {
        let (mut ps, id) = scalar_set(1.0);
        for _ in 0..2 {
            let w = ps.data(id)[0];
            ps.get_mut(id).accumulate_grad(&[2.0 * w]).unwrap();
            adam_step(&mut ps, 0.1).unwrap();
        }
        let w = ps.data(id)[0];
        assert!(w * w < 1.0);
        assert_eq!(ps.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_rejected_unless_frozen() {
        let (mut ps, id) = scalar_set(1.0);
        assert!(adam_step(&mut ps, 1e-3).is_err());
        ps.set_trainable(id, false);
        adam_step(&mut ps, 1e-3).unwrap();
        assert_eq!(ps.data(id)[0], 1.0);
    }

    #[test]
    fn deterministic_given_state_and_gradients() {
        let run = || {
            let (mut ps, id) = scalar_set(0.5);
            for k in 0..5 {
                ps.get_mut(id).accumulate_grad(&[0.1 * k as f32 - 0.2]).unwrap();
                adam_step(&mut ps, 1e-2).unwrap();
            }
            ps.data(id)[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
