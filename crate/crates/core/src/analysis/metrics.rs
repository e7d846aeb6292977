use crate::error::{Error, Result};
use crate::geometry::{dot, Image};
use crate::sampler::SamplerTrace;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 200.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dims(
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    Ok(())
}

pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    check_same(a, b)?;
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(Error::InvalidArgument("data_range must be positive".into()));
    }
    let n = a.values().len() as f64;
    let mse = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows.
pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    check_same(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(Error::InvalidArgument("data_range must be positive".into()));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let w = gaussian_window();
    let (width, height) = (a.width(), a.height());
    let (av, bv) = (a.values(), b.values());

    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=height - SSIM_WINDOW {
        for c0 in 0..=width - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wk = w[i * SSIM_WINDOW + j];
                    let p = (r0 + i) * width + c0 + j;
                    let (x, y) = (av[p], bv[p]);
                    ma += wk * x;
                    mb += wk * y;
                    saa += wk * (x * x);
                    sbb += wk * (y * y);
                    sab += wk * (x * y);
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySeries {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (dot(a, a), dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine similarity of consecutive recorded velocity snapshots.
pub fn cosine_series(trace: &SamplerTrace) -> Result<SimilaritySeries> {
    let recorded: Vec<(usize, &[f64])> = trace
        .records
        .iter()
        .filter_map(|r| r.velocity.as_deref().map(|v| (r.iter, v)))
        .collect();
    if recorded.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 velocity snapshots, trace has {}",
            recorded.len()
        )));
    }
    let mut snaps = Vec::with_capacity(recorded.len());
    for (iter, v) in recorded {
        if v.iter().all(|&e| e == 0.0) {
            log::info!("skipping zero velocity at iteration {iter}");
        } else {
            snaps.push(v);
        }
    }
    if snaps.len() < 2 {
        return Err(Error::InvalidArgument(
            "fewer than 2 nonzero velocity snapshots".into(),
        ));
    }
    let values: Vec<f64> = snaps
        .windows(2)
        .filter_map(|pair| cosine(pair[0], pair[1]))
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SimilaritySeries { values, mean, std })
}
