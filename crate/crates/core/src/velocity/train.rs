//! Conditional flow-matching objective and the training loop.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::neural::{NeuralVelocity, Params, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::rng;

/// Draws of one objective evaluation, one row per batch item.
#[derive(Debug, Clone)]
pub struct CfmBatch {
    pub xt: Array2<f64>,
    pub target: Array2<f64>,
    pub t: Vec<f64>,
    pub x1: Array2<f64>,
}

fn draw_batch<X: AsRef<[f64]>>(batch_x0: &[X], seed: u64) -> Result<CfmBatch> {
    let Some(first) = batch_x0.first() else {
        return Err(Error::EmptyBatch);
    };
    let d = first.as_ref().len();
    let b = batch_x0.len();
    let mut r = rng::stream(seed, 0);
    let mut xt = Array2::zeros((b, d));
    let mut target = Array2::zeros((b, d));
    let mut x1 = Array2::zeros((b, d));
    let mut ts = Vec::with_capacity(b);
    for (i, x0) in batch_x0.iter().enumerate() {
        let x0 = x0.as_ref();
        if x0.len() != d {
            return Err(Error::dims(d, x0.len()));
        }
        let t: f64 = r.random();
        let noise = rng::standard_normal_vec(&mut r, d);
        for j in 0..d {
            xt[[i, j]] = (1.0 - t) * x0[j] + t * noise[j];
            target[[i, j]] = noise[j] - x0[j];
            x1[[i, j]] = noise[j];
        }
        ts.push(t);
    }
    Ok(CfmBatch {
        xt,
        target,
        t: ts,
        x1,
    })
}

/// Mean over the batch of `|v(x_t, t) - (x1 - x0)|^2`, with `t ~ U(0, 1)` and
/// `x1 ~ N(0, I)` drawn per item from `seed`.
pub fn cfm_loss<X: AsRef<[f64]>>(
    field: &NeuralVelocity,
    batch_x0: &[X],
    seed: u64,
) -> Result<(f64, CfmBatch)> {
    let batch = draw_batch(batch_x0, seed)?;
    let out = field.eval_batch(&batch.xt, &batch.t)?;
    let loss = (&out - &batch.target).mapv(|e| e * e).sum() / batch.t.len() as f64;
    Ok((loss, batch))
}

/// Exact gradient of [`cfm_loss`] under the same draws, plus the loss.
pub fn cfm_grad<X: AsRef<[f64]>>(
    field: &NeuralVelocity,
    batch_x0: &[X],
    seed: u64,
) -> Result<(f64, Params)> {
    let batch = draw_batch(batch_x0, seed)?;
    let (out, tape) = field.forward_tape(&batch.xt, &batch.t)?;
    let resid = out - &batch.target;
    let b = batch.t.len() as f64;
    let loss = resid.mapv(|e| e * e).sum() / b;
    let d_out = resid * (2.0 / b);
    Ok((loss, field.backward(&tape, &d_out)))
}

/// Adaptive-moment optimizer with bias correction on a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub image_size: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            n_steps: 1000,
            learning_rate: 1e-3,
            seed: 0,
            image_size: 32,
            hidden: DEFAULT_HIDDEN.to_vec(),
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.image_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and image_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeuralVelocity,
    pub optimizer: Adam,
    /// Minibatch loss of each step taken in this call.
    pub losses: Vec<f64>,
}

/// Trains a fresh network on `dataset` for `cfg.n_steps` steps.
pub fn train(dataset: &[Image], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pixels = cfg.image_size * cfg.image_size;
    let model = NeuralVelocity::new(
        pixels,
        &cfg.hidden,
        cfg.embed_dim,
        rng::derive_seed(cfg.seed, rng::streams::NET_INIT),
    )?;
    let optimizer = Adam::new(model.params().len(), cfg.learning_rate);
    train_resume(model, optimizer, dataset, cfg)
}

/// Continues training from `model` and `optimizer`. The minibatch stream is
/// keyed by the optimizer step count, so `k + n` steps in one call equal `k`
/// steps followed by a resumed call of `n`.
pub fn train_resume(
    mut model: NeuralVelocity,
    mut optimizer: Adam,
    dataset: &[Image],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let pixels = model.image_pixels();
    if let Some(bad) = dataset.iter().find(|im| im.values().len() != pixels) {
        return Err(Error::dims(
            format!("{pixels}-pixel training images"),
            bad.values().len(),
        ));
    }
    if optimizer.m.len() != model.params().len() {
        return Err(Error::ShapeMismatch(
            "optimizer state does not match the model".into(),
        ));
    }

    let mut losses = Vec::with_capacity(cfg.n_steps);
    let mut flat = model.params().to_flat();
    for _ in 0..cfg.n_steps {
        let step_seed = rng::derive_seed(cfg.seed, rng::streams::BATCH_BASE + optimizer.step);
        let mut pick = rng::stream(step_seed, 1);
        let batch: Vec<&[f64]> = (0..cfg.batch_size)
            .map(|_| dataset[pick.random_range(0..dataset.len())].values())
            .collect();
        let (loss, grad) = cfm_grad(&model, &batch, step_seed)?;
        optimizer.update(&mut flat, &grad.to_flat());
        model.params_mut().assign_flat(&flat)?;
        log::debug!("step {} loss {loss:.6}", optimizer.step);
        losses.push(loss);
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::VelocityField;

    fn toy_batch() -> Vec<Vec<f64>> {
        vec![vec![0.2, 0.9], vec![0.5, 0.1], vec![1.0, 0.0]]
    }

    #[test]
    fn zero_field_loss_matches_hand_average() {
        let net = NeuralVelocity::zeros(2, &[4], 4).unwrap();
        let batch = toy_batch();
        let (loss, cached) = cfm_loss(&net, &batch, 77).unwrap();
        // recompute the same seeded draws independently; the zero network
        // predicts a black image, so v = x_t / max(t, T_FLOOR)
        let mut r = rng::stream(77, 0);
        let mut acc = 0.0;
        for x0 in &batch {
            let t: f64 = r.random();
            let x1 = rng::standard_normal_vec(&mut r, 2);
            for (a, b) in x0.iter().zip(&x1) {
                let v = ((1.0 - t) * a + t * b) / t.max(crate::velocity::T_FLOOR);
                acc += (v - (b - a)).powi(2);
            }
        }
        assert!((loss - acc / 3.0).abs() < 1e-12);
        assert_eq!(cached.t.len(), 3);
        assert!(loss >= 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let net = NeuralVelocity::zeros(2, &[4], 4).unwrap();
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(cfm_loss(&net, &empty, 1), Err(Error::EmptyBatch)));
        assert!(matches!(cfm_grad(&net, &empty, 1), Err(Error::EmptyBatch)));
    }

    #[test]
    fn zero_loss_configuration_has_zero_gradient() {
        // the network predicts its own input, so v = 0 against a zero target
        let mut net = NeuralVelocity::zeros(2, &[4], 4).unwrap();
        net.params_mut().layers[1]
            .bias
            .assign(&ndarray::arr1(&[0.3, 0.1]));
        let x = Array2::from_shape_vec((2, 2), vec![0.3, 0.1, 0.3, 0.1]).unwrap();
        let (out, tape) = net.forward_tape(&x, &[0.2, 0.8]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let target = Array2::<f64>::zeros((2, 2));
        let d_out = (out - target) * (2.0 / 2.0);
        let grad = net.backward(&tape, &d_out);
        assert!(grad.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_deterministic() {
        let net = NeuralVelocity::new(2, &[4], 4, 3).unwrap();
        let a = cfm_grad(&net, &toy_batch(), 5).unwrap();
        let b = cfm_grad(&net, &toy_batch(), 5).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainConfig {
            n_steps: 0,
            image_size: 2,
            hidden: vec![4],
            embed_dim: 4,
            ..TrainConfig::default()
        };
        let data = vec![Image::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()];
        let out = train(&data, &cfg).unwrap();
        let init = NeuralVelocity::new(
            4,
            &[4],
            4,
            rng::derive_seed(cfg.seed, rng::streams::NET_INIT),
        )
        .unwrap();
        assert_eq!(out.model, init);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = TrainConfig {
            image_size: 2,
            hidden: vec![4],
            embed_dim: 4,
            ..TrainConfig::default()
        };
        assert!(train(&[], &cfg).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resume_equals_continuous_training() {
        let cfg = TrainConfig {
            n_steps: 6,
            batch_size: 4,
            image_size: 2,
            hidden: vec![4],
            embed_dim: 4,
            ..TrainConfig::default()
        };
        let data = vec![
            Image::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            Image::from_vec(2, 2, vec![0.9, 0.0, 0.5, 0.5]).unwrap(),
        ];
        let full = train(&data, &cfg).unwrap();
        let half_cfg = TrainConfig {
            n_steps: 3,
            ..cfg.clone()
        };
        let first = train(&data, &half_cfg).unwrap();
        let second = train_resume(first.model, first.optimizer, &data, &half_cfg).unwrap();
        assert_eq!(full.model, second.model);
        assert_eq!(full.losses[3..], second.losses[..]);
        assert!(full
            .model
            .eval(&[0.0; 4], 0.5)
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }
}
