//! Adam optimizer and Polyak (moving-average) target updates.

use super::params::ParamVector;
use super::NeuralError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: ParamVector,
    v: ParamVector,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamVector) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn from_parts(m: ParamVector, v: ParamVector, step: u64) -> Result<Self, NeuralError> {
        m.check_layout(&v)?;
        Ok(Self { m, v, step })
    }

    pub fn first_moment(&self) -> &ParamVector {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamVector {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step applied to `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<(), NeuralError> {
        if params.len() != grads.len() || self.m.len() != params.len() {
            return Err(NeuralError::ShapeMismatch { expected: params.len(), actual: grads.len() });
        }
        params.check_layout(grads)?;
        params.check_layout(&self.m)?;
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let m = self.m.values_mut();
        let v = self.v.values_mut();
        for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grads.values()).zip(m).zip(v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// `target <- zeta * source + (1 - zeta) * target`, elementwise.
pub fn polyak_update(target: &mut ParamVector, source: &ParamVector, zeta: f64) -> Result<(), NeuralError> {
    target.check_layout(source)?;
    for (t, &s) in target.values_mut().iter_mut().zip(source.values()) {
        *t = zeta * s + (1.0 - zeta) * *t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::TensorSpec;

    fn pv(values: Vec<f64>) -> ParamVector {
        let n = values.len();
        ParamVector::from_parts(vec![TensorSpec::new("x", &[n])], values).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = pv(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        for _ in 0..5 {
            adam.step(&mut p, &pv(vec![0.0; 3]), 1e-2).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_sign() {
        let lr = 1e-3;
        let mut p = pv(vec![0.0, 0.0]);
        let g = pv(vec![0.37, -5.0]);
        let mut adam = AdamState::new(&p);
        let mut prev = p.clone();
        for _ in 0..1000 {
            prev = p.clone();
            adam.step(&mut p, &g, lr).unwrap();
        }
        let d0 = p.values()[0] - prev.values()[0];
        let d1 = p.values()[1] - prev.values()[1];
        assert!((d0 + lr).abs() < 1e-6 * lr.max(1.0), "{d0}");
        assert!((d1 - lr).abs() < 1e-6, "{d1}");
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = pv(vec![0.5]);
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &pv(vec![2.0]), 0.01).unwrap();
        let expected = 0.5 - 0.01 * 2.0 / (2.0 + EPSILON);
        assert_eq!(p.values()[0], expected);
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut p = pv(vec![0.1, 0.2, 0.3]);
            let mut adam = AdamState::new(&p);
            for i in 0..50 {
                let g = pv(vec![(i as f64).sin(), (i as f64).cos(), 0.5]);
                adam.step(&mut p, &g, 1e-2).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = pv(vec![0.0; 3]);
        let mut adam = AdamState::new(&p);
        assert!(adam.step(&mut p, &pv(vec![0.0; 2]), 0.1).is_err());
    }

    #[test]
    fn polyak_examples() {
        let src = pv(vec![1.0, 2.0]);
        let mut t = src.clone();
        polyak_update(&mut t, &src, 0.3).unwrap();
        assert_eq!(t, src);
        let mut t = pv(vec![5.0, -5.0]);
        polyak_update(&mut t, &src, 1.0).unwrap();
        assert_eq!(t, src);
        let mut t = pv(vec![0.0]);
        polyak_update(&mut t, &pv(vec![1.0]), 0.005).unwrap();
        assert!((t.values()[0] - 0.005).abs() < 1e-18);
        let other = ParamVector::from_parts(vec![TensorSpec::new("y", &[1])], vec![0.0]).unwrap();
        assert!(matches!(polyak_update(&mut t, &other, 0.5), Err(NeuralError::LayoutMismatch(_))));
    }
}
