//! Fully connected velocity network with hand-written reverse mode.
//!
//! Input is the flattened image concatenated with a sinusoidal embedding of
//! `t`. Hidden layers use SiLU; the output layer is linear. The network
//! output `D(x, t)` is a clean-image estimate and the velocity is
//! `(x - D) / max(t, T_FLOOR)`, the form of the exact field of a single
//! target image. For `t >= T_FLOOR` the extrapolation `x - t v` returns `D`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use super::VelocityField;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];
pub const DEFAULT_EMBED_DIM: usize = 32;

/// Smallest time used in the velocity scaling.
pub const T_FLOOR: f64 = 0.05;

/// Highest embedding frequency in rad per unit time; the lowest is 1.
const MAX_FREQUENCY: f64 = 64.0;

fn frequencies(embed_dim: usize) -> impl Iterator<Item = f64> {
    let half = embed_dim / 2;
    (0..half).map(move |k| {
        if half <= 1 {
            1.0
        } else {
            MAX_FREQUENCY.powf(k as f64 / (half - 1) as f64)
        }
    })
}

/// `[sin(w_k t) ..., cos(w_k t) ...]` with `w_k` geometric in `[1, 64]`.
pub fn time_embedding(t: f64, embed_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; embed_dim];
    let half = embed_dim / 2;
    for (k, w) in frequencies(embed_dim).enumerate() {
        let (s, c) = (w * t).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    out
}

/// `d/dt` of [`time_embedding`].
pub fn time_embedding_derivative(t: f64, embed_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; embed_dim];
    let half = embed_dim / 2;
    for (k, w) in frequencies(embed_dim).enumerate() {
        let (s, c) = (w * t).sin_cos();
        out[k] = w * c;
        out[half + k] = -w * s;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Affine layer `y = x W + b`, with `W` stored as `(inputs, outputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Trainable parameters, first layer first. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    /// Tensors in storage order: `W_1, b_1, ..., W_L, b_L`.
    pub fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push((
                vec![l.inputs(), l.outputs()],
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                vec![l.outputs()],
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, v) in self.tensors() {
            out.extend_from_slice(v);
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for dst in self.slices_mut() {
            let n = dst.len();
            dst.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralVelocity {
    image_pixels: usize,
    embed_dim: usize,
    params: Params,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Tape {
    /// `(layer input, pre-activation)` per layer.
    layers: Vec<(Array2<f64>, Array2<f64>)>,
    /// `1 / max(t, T_FLOOR)` per row.
    scale: Array2<f64>,
    denoised: Array2<f64>,
}

fn velocity_scale(t: f64) -> f64 {
    1.0 / t.max(T_FLOOR)
}

impl NeuralVelocity {
    fn check_arch(image_pixels: usize, hidden: &[usize], embed_dim: usize) -> Result<()> {
        if image_pixels == 0 {
            return Err(Error::InvalidArgument("image_pixels must be >= 1".into()));
        }
        if embed_dim < 2 || !embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "time embedding dimension must be even and >= 2, got {embed_dim}"
            )));
        }
        if hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    fn layer_shapes(
        image_pixels: usize,
        hidden: &[usize],
        embed_dim: usize,
    ) -> Vec<(usize, usize)> {
        let mut widths = vec![image_pixels + embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(image_pixels);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// All-zero network: `D = 0`, so `v = x / max(t, T_FLOOR)`.
    pub fn zeros(image_pixels: usize, hidden: &[usize], embed_dim: usize) -> Result<Self> {
        Self::check_arch(image_pixels, hidden, embed_dim)?;
        let layers = Self::layer_shapes(image_pixels, hidden, embed_dim)
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(NeuralVelocity {
            image_pixels,
            embed_dim,
            params: Params { layers },
        })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    pub fn new(image_pixels: usize, hidden: &[usize], embed_dim: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(image_pixels, hidden, embed_dim)?;
        let mut r = rng::stream(seed, rng::streams::NET_INIT);
        for layer in &mut net.params.layers {
            let bound = 1.0 / (layer.inputs() as f64).sqrt();
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = r.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn from_params(image_pixels: usize, embed_dim: usize, params: Params) -> Result<Self> {
        if params.layers.is_empty() {
            return Err(Error::ShapeMismatch("no layers".into()));
        }
        let hidden: Vec<usize> = params.layers[..params.layers.len() - 1]
            .iter()
            .map(Dense::outputs)
            .collect();
        Self::check_arch(image_pixels, &hidden, embed_dim)?;
        let expected = Self::layer_shapes(image_pixels, &hidden, embed_dim);
        for (k, (layer, &(i, o))) in params.layers.iter().zip(&expected).enumerate() {
            if layer.inputs() != i || layer.outputs() != o || layer.bias.len() != o {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} is {}x{} (bias {}), expected {i}x{o}",
                    layer.inputs(),
                    layer.outputs(),
                    layer.bias.len()
                )));
            }
        }
        Ok(NeuralVelocity {
            image_pixels,
            embed_dim,
            params,
        })
    }

    pub fn image_pixels(&self) -> usize {
        self.image_pixels
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden(&self) -> Vec<usize> {
        let n = self.params.layers.len();
        self.params.layers[..n - 1]
            .iter()
            .map(Dense::outputs)
            .collect()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn into_params(self) -> Params {
        self.params
    }

    fn embed_batch(&self, ts: &[f64]) -> Array2<f64> {
        let mut emb = Array2::zeros((ts.len(), self.embed_dim));
        for (mut row, &t) in emb.rows_mut().into_iter().zip(ts) {
            row.assign(&Array1::from(time_embedding(t, self.embed_dim)));
        }
        emb
    }

    fn check_batch(&self, x: &Array2<f64>, ts: &[f64]) -> Result<()> {
        if x.ncols() != self.image_pixels {
            return Err(Error::ShapeMismatch(format!(
                "input has {} pixels, network expects {}",
                x.ncols(),
                self.image_pixels
            )));
        }
        if x.nrows() != ts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} times",
                x.nrows(),
                ts.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_tape(&self, x: &Array2<f64>, ts: &[f64]) -> Result<(Array2<f64>, Tape)> {
        self.check_batch(x, ts)?;
        let embedding = self.embed_batch(ts);
        let mut h = concatenate![Axis(1), x.view(), embedding.view()];
        let n = self.params.layers.len();
        let mut cache = Vec::with_capacity(n);
        for (k, layer) in self.params.layers.iter().enumerate() {
            let pre = layer.forward(h.view());
            let next = if k + 1 < n {
                pre.mapv(silu)
            } else {
                pre.clone()
            };
            cache.push((h, pre));
            h = next;
        }
        let denoised = h;
        let scale = Array1::from_iter(ts.iter().map(|&t| velocity_scale(t))).insert_axis(Axis(1));
        let out = (x - &denoised) * &scale;
        Ok((
            out,
            Tape {
                layers: cache,
                scale,
                denoised,
            },
        ))
    }

    /// Batched evaluation, one row per sample.
    pub fn eval_batch(&self, x: &Array2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        Ok(self.forward_tape(x, ts)?.0)
    }

    /// Clean-image estimates `D(x, t)`, one row per sample.
    pub fn denoise_batch(&self, x: &Array2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        Ok(self.forward_tape(x, ts)?.1.denoised)
    }

    /// Parameter gradient given `d loss / d output`.
    pub(crate) fn backward(&self, tape: &Tape, d_out: &Array2<f64>) -> Params {
        let mut grad = self.params.zeros_like();
        let n = self.params.layers.len();
        let mut delta = -(d_out * &tape.scale);
        for k in (0..n).rev() {
            let (input, pre) = &tape.layers[k];
            if k + 1 < n {
                delta.zip_mut_with(pre, |d, &p| *d *= silu_grad(p));
            }
            grad.layers[k].weight = input.t().dot(&delta);
            grad.layers[k].bias = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&self.params.layers[k].weight.t());
            }
        }
        grad
    }

    /// Forward-mode derivative `d v / d t` at `(x, t)`.
    pub fn eval_time_derivative(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let (_, tape) = self.forward_tape(&xs, &[t])?;
        let d_emb = Array2::from_shape_vec(
            (1, self.embed_dim),
            time_embedding_derivative(t, self.embed_dim),
        )
        .expect("embedding shape");
        let n = self.params.layers.len();
        let first = &self.params.layers[0];
        let mut tangent = d_emb.dot(&first.weight.slice(s![self.image_pixels.., ..]));
        for k in 0..n {
            if k > 0 {
                tangent = tangent.dot(&self.params.layers[k].weight);
            }
            if k + 1 < n {
                let pre = &tape.layers[k].1;
                tangent.zip_mut_with(pre, |d, &p| *d *= silu_grad(p));
            }
        }
        let scale = velocity_scale(t);
        // d scale / d t vanishes below the floor
        let d_scale = if t > T_FLOOR { -scale * scale } else { 0.0 };
        Ok(tangent
            .row(0)
            .iter()
            .zip(x)
            .zip(tape.denoised.row(0))
            .map(|((d, xi), den)| -scale * d + d_scale * (xi - den))
            .collect())
    }
}

impl VelocityField for NeuralVelocity {
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.image_pixels {
            return Err(Error::ShapeMismatch(format!(
                "input has {} pixels, network expects {}",
                x.len(),
                self.image_pixels
            )));
        }
        let xs = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.eval_batch(&xs, &[t])?.into_raw_vec_and_offset().0)
    }

    fn is_neural(&self) -> bool {
        true
    }
}
