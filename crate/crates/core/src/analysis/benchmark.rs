use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim};
use crate::consistency::residual;
use crate::error::{Error, Result};
use crate::geometry::{fbp, Geometry, Image, Sinogram};
use crate::sampler::{efmct_reconstruct, fmct_reconstruct, SamplerConfig};
use crate::velocity::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fbp,
    Fmct,
    Efmct,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fbp => "fbp",
            Method::Fmct => "fmct",
            Method::Efmct => "efmct",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTask {
    pub method: Method,
    /// Ignored for [`Method::Fbp`].
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub nfe: usize,
    pub wall_time_mean: f64,
    /// Sample standard deviation; `None` for a single repetition.
    pub wall_time_std: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    /// `|A x - y|^2` of the reconstruction.
    pub residual: f64,
}

fn reconstruct<F: VelocityField + ?Sized>(
    task: &BenchTask,
    y: &Sinogram,
    g: &Geometry,
    field: &F,
) -> Result<(Image, usize)> {
    Ok(match task.method {
        Method::Fbp => (fbp(y, g)?, 0),
        Method::Fmct => {
            let r = fmct_reconstruct(y, g, field, &task.sampler)?;
            (r.image, r.trace.nfe)
        }
        Method::Efmct => {
            let r = efmct_reconstruct(y, g, field, &task.sampler)?;
            (r.image, r.trace.nfe)
        }
    })
}

/// Runs every task `repetitions` times against the ground truth `truth`.
/// Metrics come from the first repetition; runs are deterministic.
pub fn benchmark<F: VelocityField + ?Sized>(
    truth: &Image,
    y: &Sinogram,
    g: &Geometry,
    field: &F,
    tasks: &[BenchTask],
    repetitions: usize,
    data_range: f64,
) -> Result<Vec<BenchRow>> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no benchmark tasks".into()));
    }
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    g.check_image(truth)?;
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut times = Vec::with_capacity(repetitions);
        let mut first: Option<(Image, usize)> = None;
        for _ in 0..repetitions {
            let start = Instant::now();
            let (image, nfe) = reconstruct(task, y, g, field)?;
            times.push(start.elapsed().as_secs_f64());
            match &first {
                Some((_, n)) if *n != nfe => {
                    return Err(Error::InvalidArgument(format!(
                        "{} NFE changed between repetitions: {n} vs {nfe}",
                        task.method
                    )));
                }
                Some(_) => {}
                None => first = Some((image, nfe)),
            }
        }
        let (image, nfe) = first.expect("at least one repetition");
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let std = (times.len() > 1)
            .then(|| (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        rows.push(BenchRow {
            method: task.method,
            nfe,
            wall_time_mean: mean,
            wall_time_std: std,
            psnr: psnr(truth, &image, data_range)?,
            ssim: ssim(truth, &image, data_range)?,
            residual: residual(&image, y, g)?,
        });
    }
    Ok(rows)
}
