//! Time-dependent velocity fields `v_t(x)` driving the transport ODE.
//!
//! Time runs from `t = 1` (Gaussian source) to `t = 0` (image
//! distribution). Samplers integrate backwards with `x <- x - dt * v`.

mod analytic;
mod neural;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use analytic::{ConstantField, PointTargetField, RotationField, DEFAULT_T_MIN};
pub use neural::{
    time_embedding, time_embedding_derivative, Dense, NeuralVelocity, Params, DEFAULT_EMBED_DIM,
    DEFAULT_HIDDEN, T_FLOOR,
};
pub use train::{
    cfm_grad, cfm_loss, train, train_resume, Adam, CfmBatch, TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};

pub trait VelocityField: Send + Sync {
    /// Velocity at `x` and time `t`. Output length equals input length.
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Whether evaluations count as network function evaluations.
    fn is_neural(&self) -> bool {
        false
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).eval(x, t)
    }

    fn is_neural(&self) -> bool {
        (**self).is_neural()
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).eval(x, t)
    }

    fn is_neural(&self) -> bool {
        (**self).is_neural()
    }
}

/// Shared evaluation counter.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicUsize);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Wraps a field and bumps `counter` on every `eval`.
pub struct Counted<'a, F: ?Sized> {
    inner: &'a F,
    counter: &'a NfeCounter,
}

impl<'a, F: VelocityField + ?Sized> Counted<'a, F> {
    pub fn new(inner: &'a F, counter: &'a NfeCounter) -> Self {
        Counted { inner, counter }
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Counted<'_, F> {
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.counter.bump();
        self.inner.eval(x, t)
    }

    fn is_neural(&self) -> bool {
        self.inner.is_neural()
    }
}

/// Rectified-flow interpolant: `x_t = (1 - t) x0 + t x1` and target `x1 - x0`.
pub fn sample_interpolant(x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0.len() != x1.len() {
        return Err(Error::dims(x0.len(), x1.len()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    let xt = x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let target = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
    Ok((xt, target))
}
