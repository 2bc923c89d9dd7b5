use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::GradientField;
use crate::transform::DisplacementField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::argument("learning_rate", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::argument(name, format!("{b} is outside [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::argument("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Scalar storage the optimizer can update in place.
pub trait Param: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Param for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Param for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Adam moment estimates. Moments are kept in f64 regardless of parameter type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|m| *m = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
        self.t = 0;
    }

    /// One bias-corrected Adam update with a constant learning rate.
    /// Nothing is modified when the gradient contains a non-finite value.
    pub fn step<P: Param>(&mut self, params: &mut [P], grad: &[f64], cfg: &OptimizerConfig) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::argument(
                "grad",
                format!("{} parameters, {} gradients, state for {}", params.len(), grad.len(), self.m.len()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { iteration: self.t + 1 });
        }
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = P::from_f64(p.to_f64() - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon));
        }
        Ok(())
    }
}

/// Apply one Adam step to a displacement field.
pub fn adam_step(
    dvf: &mut DisplacementField,
    grad: &GradientField,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    dvf.dims().ensure_same(&grad.dims())?;
    state.step(dvf.as_flat_mut(), grad.as_flat(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn zero_gradient_keeps_params() {
        let dims = Dims::cube(3);
        let mut dvf = DisplacementField::constant(dims, [0.25, -1.0, 2.0]);
        let before = dvf.clone();
        let mut st = AdamState::new(3 * dims.len());
        adam_step(&mut dvf, &GradientField::zeros(dims), &mut st, &OptimizerConfig::default()).unwrap();
        assert_eq!(dvf, before);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig::default();
        let mut p = vec![0.0f64; 4];
        let mut st = AdamState::new(4);
        st.step(&mut p, &[0.5, 0.5, -2.0, 1e-3], &cfg).unwrap();
        // m_hat = g and v_hat = g^2 at t = 1, so the step is lr * |g| / (|g| + eps)
        for (pi, g) in p.iter().zip([0.5f64, 0.5, -2.0, 1e-3]) {
            let expect = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((pi - expect).abs() < 1e-15);
            assert!((pi.abs() - 3e-4).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = vec![1.0f32, 2.0];
        let mut st = AdamState::new(2);
        let cfg = OptimizerConfig::default();
        st.step(&mut p, &[0.1, 0.1], &cfg).unwrap();
        let snapshot = (p.clone(), st.clone());
        match st.step(&mut p, &[f64::NAN, 0.1], &cfg) {
            Err(Error::Numeric { iteration }) => assert_eq!(iteration, 2),
            other => panic!("{other:?}"),
        }
        assert_eq!((p, st), snapshot);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig::with_learning_rate(0.0).validate().is_err());
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }
}
