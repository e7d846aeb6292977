//! Reconstruction samplers.
//!
//! Each iteration at time `t` (from 1 down to `dt`) does an Euler transport
//! step `x' = x - dt v`, extrapolates the endpoint `x0_hat = x - t v`, and
//! adds the data-consistency correction of `x0_hat` to `x'`.
//!
//! [`efmct_reconstruct`] may instead reuse the cached velocity of the last
//! network evaluation for up to `max_reuse` consecutive iterations, as long
//! as the tentative state's residual stays within `eta` times the stored
//! residual. A failed check drops the cache and evaluates the network at the
//! same `t`, so every run takes exactly `n_steps` steps.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::consistency::{dc_correction, residual, DcConfig};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, Image, Sinogram};
use crate::rng;
use crate::velocity::{Counted, NfeCounter, VelocityField};

/// Which residual the reuse check stores after a fresh evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    /// Fresh steps store the post-correction residual, accepted reuse steps
    /// store the tentative (pre-correction) residual.
    #[default]
    Algorithm1,
    /// Both branches store the pre-correction residual of the transported
    /// state, so the check always compares two pre-correction quantities.
    PreDcOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub max_reuse: usize,
    pub eta: f64,
    /// 0-based iteration index from which reuse is permitted.
    pub reuse_start: usize,
    pub dc: DcConfig,
    pub seed: u64,
    pub record_velocities: bool,
    pub residual_mode: ResidualMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 50,
            max_reuse: 10,
            eta: 1.05,
            reuse_start: 1,
            dc: DcConfig::default(),
            seed: 0,
            record_velocities: false,
            residual_mode: ResidualMode::Algorithm1,
        }
    }
}

impl SamplerConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
        }
        self.dc.validate()
    }

    fn validate_reuse(&self) -> Result<()> {
        self.validate()?;
        if !(self.eta.is_finite() && self.eta > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eta must be > 1, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based iteration number.
    pub iter: usize,
    /// Time at the start of the iteration.
    pub t: f64,
    pub was_reuse: bool,
    /// 1 when the iteration evaluated the field.
    pub nfe_increment: usize,
    /// `|A x' - y|^2` of the transported state before correction.
    pub residual_pre_dc: f64,
    /// `|A x - y|^2` after the correction.
    pub residual_post_dc: f64,
    pub reuse_counter: usize,
    /// Residual `r` held by the reuse check after this iteration.
    pub stored_residual: f64,
    /// A reuse attempt was rejected before this iteration's fresh evaluation.
    pub reuse_rejected: bool,
    pub velocity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrace {
    pub records: Vec<StepRecord>,
    pub nfe: usize,
    /// Residual of the Gaussian initialization.
    pub initial_residual: f64,
    pub wall_time: Duration,
}

impl SamplerTrace {
    pub fn reuse_steps(&self) -> usize {
        self.records.iter().filter(|r| r.was_reuse).count()
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub image: Image,
    pub trace: SamplerTrace,
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(())
}

/// `x - dt * v`.
pub fn euler_step(x: &[f64], v: &[f64], dt: f64) -> Result<Vec<f64>> {
    check_len(x, v)?;
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    Ok(x.iter().zip(v).map(|(a, b)| a - dt * b).collect())
}

/// Straight-line endpoint estimate `x - t * v`.
pub fn extrapolate_x0(x: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len(x, v)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    Ok(x.iter().zip(v).map(|(a, b)| a - t * b).collect())
}

fn time_at(iter: usize, n_steps: usize) -> f64 {
    1.0 - (iter - 1) as f64 / n_steps as f64
}

fn gaussian_start(n_pixels: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, rng::streams::SAMPLER_INIT);
    rng::standard_normal_vec(&mut r, n_pixels)
}

struct Stepper<'a> {
    y: &'a Sinogram,
    g: &'a Geometry,
    dc: &'a DcConfig,
}

impl Stepper<'_> {
    fn image(&self, v: Vec<f64>) -> Result<Image> {
        let n = self.g.image_size();
        Image::from_vec(n, n, v)
    }

    fn residual(&self, x: Vec<f64>) -> Result<(Image, f64)> {
        let img = self.image(x)?;
        let r = residual(&img, self.y, self.g)?;
        Ok((img, r))
    }

    /// `moved + dc_correction(x - t v)`.
    fn correct(&self, moved: &Image, x: &[f64], v: &[f64], t: f64) -> Result<Image> {
        let x0_hat = self.image(extrapolate_x0(x, v, t)?)?;
        let correction = dc_correction(&x0_hat, self.y, self.g, self.dc)?;
        let next = moved
            .values()
            .iter()
            .zip(correction.values())
            .map(|(a, b)| a + b)
            .collect();
        self.image(next)
    }
}

fn run<F: VelocityField + ?Sized>(
    y: &Sinogram,
    g: &Geometry,
    field: &F,
    cfg: &SamplerConfig,
    allow_reuse: bool,
) -> Result<ReconResult> {
    g.check_sinogram(y)?;
    let start = Instant::now();
    let counter = NfeCounter::new();
    let field = Counted::new(field, &counter);
    let stepper = Stepper { y, g, dc: &cfg.dc };
    let n = cfg.n_steps;
    let dt = cfg.dt();

    let (mut x, mut r) = stepper.residual(gaussian_start(g.n_pixels(), cfg.seed))?;
    let initial_residual = r;
    let mut cached: Option<Vec<f64>> = None;
    let mut m = 0usize;
    let mut records = Vec::with_capacity(n);

    for iter in 1..=n {
        let t = time_at(iter, n);
        let mut reuse_rejected = false;

        if let Some(v_prev) = cached
            .as_ref()
            .filter(|_| allow_reuse && m < cfg.max_reuse && iter > cfg.reuse_start)
        {
            let (moved, r_tilde) = stepper.residual(euler_step(x.values(), v_prev, dt)?)?;
            if r_tilde <= cfg.eta * r {
                let next = stepper.correct(&moved, x.values(), v_prev, t)?;
                let post = residual(&next, y, g)?;
                r = r_tilde;
                m += 1;
                records.push(StepRecord {
                    iter,
                    t,
                    was_reuse: true,
                    nfe_increment: 0,
                    residual_pre_dc: r_tilde,
                    residual_post_dc: post,
                    reuse_counter: m,
                    stored_residual: r,
                    reuse_rejected: false,
                    velocity: None,
                });
                x = next;
                continue;
            }
            reuse_rejected = true;
        }

        let v = field.eval(x.values(), t)?;
        if v.len() != x.values().len() {
            return Err(Error::dims(x.values().len(), v.len()));
        }
        let (moved, pre) = stepper.residual(euler_step(x.values(), &v, dt)?)?;
        let next = stepper.correct(&moved, x.values(), &v, t)?;
        let post = residual(&next, y, g)?;
        r = match cfg.residual_mode {
            ResidualMode::Algorithm1 => post,
            ResidualMode::PreDcOnly => pre,
        };
        m = 0;
        records.push(StepRecord {
            iter,
            t,
            was_reuse: false,
            nfe_increment: 1,
            residual_pre_dc: pre,
            residual_post_dc: post,
            reuse_counter: 0,
            stored_residual: r,
            reuse_rejected,
            velocity: cfg.record_velocities.then(|| v.clone()),
        });
        cached = Some(v);
        x = next;
    }

    if !x.is_finite() {
        return Err(Error::InvalidArgument(
            "reconstruction produced non-finite values".into(),
        ));
    }
    let nfe = records.iter().map(|r| r.nfe_increment).sum();
    debug_assert_eq!(nfe, counter.get());
    Ok(ReconResult {
        image: x,
        trace: SamplerTrace {
            records,
            nfe,
            initial_residual,
            wall_time: start.elapsed(),
        },
    })
}

/// Flow-matching reconstruction with one field evaluation per step.
/// `cfg.max_reuse`, `cfg.eta` and `cfg.reuse_start` are ignored.
pub fn fmct_reconstruct<F: VelocityField + ?Sized>(
    y: &Sinogram,
    g: &Geometry,
    field: &F,
    cfg: &SamplerConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    run(y, g, field, cfg, false)
}

/// Flow-matching reconstruction with velocity reuse gated by the residual check.
pub fn efmct_reconstruct<F: VelocityField + ?Sized>(
    y: &Sinogram,
    g: &Geometry,
    field: &F,
    cfg: &SamplerConfig,
) -> Result<ReconResult> {
    cfg.validate_reuse()?;
    run(y, g, field, cfg, true)
}

/// Pure Euler integration of the field from Gaussian noise, no correction.
pub fn prior_sample<F: VelocityField + ?Sized>(
    field: &F,
    image_size: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Image> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = gaussian_start(image_size * image_size, seed);
    for iter in 1..=n_steps {
        let v = field.eval(&x, time_at(iter, n_steps))?;
        x = euler_step(&x, &v, dt)?;
    }
    Image::from_vec(image_size, image_size, x)
}
