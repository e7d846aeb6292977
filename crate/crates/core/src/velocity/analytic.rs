//! Closed-form reference fields used for verification.

use super::VelocityField;
use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 1e-3;

/// Rotates consecutive coordinate pairs at angular rate `omega`:
/// `v(x) = omega * J x` with `J (a, b) = (-b, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationField {
    pub omega: f64,
}

impl RotationField {
    pub fn new(omega: f64) -> Self {
        RotationField { omega }
    }

    /// Exact solution of `dx/dt = v` carried from time `t_from` to `t_to`.
    pub fn exact_flow(&self, x: &[f64], t_from: f64, t_to: f64) -> Result<Vec<f64>> {
        check_even(x.len())?;
        let (s, c) = (self.omega * (t_to - t_from)).sin_cos();
        Ok(x.chunks_exact(2)
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect())
    }
}

fn check_even(len: usize) -> Result<()> {
    if !len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rotation field needs an even-length vector, got {len}"
        )));
    }
    Ok(())
}

impl VelocityField for RotationField {
    fn eval(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_even(x.len())?;
        let w = self.omega;
        Ok(x.chunks_exact(2)
            .flat_map(|p| [-w * p[1], w * p[0]])
            .collect())
    }
}

/// Exact marginal field when the data distribution is a point mass at `c`:
/// `v(x, t) = (x - c) / max(t, t_min)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTargetField {
    target: Vec<f64>,
    t_min: f64,
}

impl PointTargetField {
    pub fn new(target: Vec<f64>) -> Self {
        Self::with_t_min(target, DEFAULT_T_MIN)
    }

    pub fn with_t_min(target: Vec<f64>, t_min: f64) -> Self {
        assert!(t_min > 0.0, "t_min must be positive");
        PointTargetField { target, t_min }
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }
}

impl VelocityField for PointTargetField {
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.target.len() {
            return Err(Error::dims(self.target.len(), x.len()));
        }
        let denom = t.max(self.t_min);
        Ok(x.iter()
            .zip(&self.target)
            .map(|(a, c)| (a - c) / denom)
            .collect())
    }
}

/// Returns the same vector everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    value: Vec<f64>,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Self {
        ConstantField { value }
    }
}

impl VelocityField for ConstantField {
    fn eval(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        if x.len() != self.value.len() {
            return Err(Error::dims(self.value.len(), x.len()));
        }
        Ok(self.value.clone())
    }
}
