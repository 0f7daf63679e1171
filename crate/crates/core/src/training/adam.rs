use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("{name} = {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powf(state.t as f64);
    let c2 = 1.0 - cfg.beta2.powf(state.t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            *w -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(w: &mut Tensor, state: &mut AdamState, cfg: &AdamConfig) {
        let g = w.map(|v| 2.0 * v);
        adam_step(&mut [w], &[g], state, cfg).unwrap();
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = Tensor::from_vec(vec![1.0, -3.0]);
        let before = w.clone();
        let mut s = AdamState::new([&w]);
        let g = Tensor::zeros(&[2]);
        for _ in 0..5 {
            adam_step(&mut [&mut w], std::slice::from_ref(&g), &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn first_step_on_quadratic() {
        let mut w = Tensor::from_vec(vec![1.0]);
        let mut s = AdamState::new([&w]);
        step_scalar(&mut w, &mut s, &AdamConfig::default());
        // unit step direction: 1 − α·g/(|g| + ε)
        assert!((w.data()[0] - 0.9998).abs() < 1e-11);
    }

    #[test]
    fn matches_reference_recurrence() {
        let cfg = AdamConfig::default();
        let mut w = Tensor::from_vec(vec![1.0]);
        let mut s = AdamState::new([&w]);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            step_scalar(&mut w, &mut s, &cfg);
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 2e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((w.data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = Tensor::zeros(&[2]);
        let mut s = AdamState::new([&w]);
        let g = Tensor::zeros(&[3]);
        assert!(adam_step(&mut [&mut w], &[g], &mut s, &AdamConfig::default()).is_err());
        assert_eq!(s.t, 0);
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
