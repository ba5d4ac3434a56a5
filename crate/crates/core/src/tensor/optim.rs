use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(param: &mut [T], grad: &[T], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if param.len() != grad.len() || state.first_moment.len() != param.len() {
        return Err(Error::dim("adam_step", &[param.len()], &[grad.len()]));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let one = T::one();
    let c1 = one - T::lit(libm_powi(state.beta1, t));
    let c2 = one - T::lit(libm_powi(state.beta2, t));
    let lr = T::lit(lr);
    let eps = T::lit(state.epsilon);
    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for ((p, &g), (m, v)) in param.iter_mut().zip(grad).zip(moments) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn libm_powi(base: f64, exp: i32) -> f64 {
    num_traits::Float::powi(base, exp)
}

/// Adam over every parameter of a [`ParamStore`], with optional coupled L2 decay.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    states: Vec<AdamState<T>>,
    pub weight_decay: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            states: store.iter().map(|(_, p)| AdamState::new(p.value.numel())).collect(),
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, decay: f64) -> Self {
        self.weight_decay = decay;
        self
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != self.states.len() || store.len() != self.states.len() {
            return Err(Error::dim("adam", &[self.states.len()], &[grads.len()]));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, (state, grad)) in ids.into_iter().zip(self.states.iter_mut().zip(grads)) {
            let Some(grad) = grad else { continue };
            let param = store.value_mut(id).data_mut();
            if self.weight_decay > 0.0 {
                let wd = T::lit(self.weight_decay);
                let decayed: Vec<T> = grad.iter().zip(param.iter()).map(|(&g, &p)| g + wd * p).collect();
                adam_step(param, &decayed, state, lr)?;
            } else {
                adam_step(param, grad, state, lr)?;
            }
        }
        Ok(())
    }

    pub fn states(&self) -> &[AdamState<T>] {
        &self.states
    }
}

/// Step decay: `base_lr * decay_factor^floor(epoch / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            decay_factor: 0.1,
            decay_every: 20,
            total_epochs: 50,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64, epochs: usize) -> Self {
        Self {
            base_lr: lr,
            decay_factor: 1.0,
            decay_every: usize::MAX,
            total_epochs: epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0) || self.decay_every == 0 {
            return Err(Error::Parameter(alloc::format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.decay_every) as i32;
        self.base_lr * libm_powi(self.decay_factor, drops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.5f64, -1.25, 3.0];
        let before = p.clone();
        let mut st = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut st, 1e-2).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn zero_lr_still_updates_moments() {
        let mut p = vec![1.0f32, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.5, -0.5], &mut st, 0.0).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(st.first_moment.iter().all(|&m| m != 0.0));
        assert!(st.second_moment.iter().all(|&v| v != 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias correction makes m_hat = v_hat = 1,
        // so the step is lr / (1 + eps).
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 1e-3).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12, "{}", p[0]);
        assert!((p[0] - 0.999).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![1.0f32; 3];
        let mut st = AdamState::new(3);
        assert!(matches!(
            adam_step(&mut p, &[1.0; 2], &mut st, 1e-3),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identical_inputs_give_identical_bits() {
        let grad: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let run = || {
            let mut p: Vec<f32> = (0..64).map(|i| i as f32 * 0.01).collect();
            let mut st = AdamState::new(64);
            for _ in 0..3 {
                adam_step(&mut p, &grad, &mut st, 1e-3).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn schedule_decays_tenfold_every_twenty_epochs() {
        let s = LrSchedule::default();
        for (epoch, want) in [(0, 1e-4), (19, 1e-4), (20, 1e-5), (39, 1e-5), (40, 1e-6), (49, 1e-6)] {
            let got = s.lr(epoch);
            assert!((got - want).abs() <= want * 1e-12, "epoch {epoch}: {got}");
        }
    }
}
