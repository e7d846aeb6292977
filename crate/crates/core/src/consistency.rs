//! Data consistency: truncated conjugate gradient on the normal equations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{back_project, dot, forward_project, norm, Geometry, Image, Sinogram};
use crate::phantom::{random_ellipse_phantom, PhantomKind, PhantomSpec, MIN_PHANTOM_SIZE};
use crate::rng;

/// Curvature below which a CG search direction counts as broken down.
pub const BREAKDOWN_CURVATURE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcConfig {
    pub cg_iters: usize,
    pub tikhonov_lambda: f64,
}

impl Default for DcConfig {
    fn default() -> Self {
        DcConfig {
            cg_iters: 5,
            tikhonov_lambda: 0.0,
        }
    }
}

impl DcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tikhonov_lambda.is_finite() && self.tikhonov_lambda >= 0.0) {
            return Err(Error::InvalidArgument(
                "tikhonov_lambda must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `|A x - y|^2`.
pub fn residual(x: &Image, y: &Sinogram, g: &Geometry) -> Result<f64> {
    g.check_sinogram(y)?;
    let ax = forward_project(x, g)?;
    Ok(ax
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub image: Image,
    pub iterations: usize,
    /// Set when a search direction had curvature `<= BREAKDOWN_CURVATURE`;
    /// `image` then holds the last good iterate.
    pub breakdown: bool,
}

fn apply_normal(z: &Image, g: &Geometry, lambda: f64) -> Result<Image> {
    let mut out = back_project(&forward_project(z, g)?, g)?;
    if lambda != 0.0 {
        for (o, v) in out.values_mut().iter_mut().zip(z.values()) {
            *o += lambda * v;
        }
    }
    Ok(out)
}

/// Runs `cfg.cg_iters` CG iterations on `(A^T A + lambda I) z = A^T y + lambda x_init`
/// starting from `z = x_init`. Stops early once the residual is exactly zero.
pub fn cg_refine(x_init: &Image, y: &Sinogram, g: &Geometry, cfg: &DcConfig) -> Result<CgOutcome> {
    g.check_image(x_init)?;
    g.check_sinogram(y)?;
    cfg.validate()?;
    let mut z = x_init.clone();
    if cfg.cg_iters == 0 {
        return Ok(CgOutcome {
            image: z,
            iterations: 0,
            breakdown: false,
        });
    }

    // with z = x_init the Tikhonov terms cancel in the initial residual
    let ax = forward_project(&z, g)?;
    let misfit = Sinogram::from_vec(
        g.n_angles(),
        g.n_detectors(),
        y.values()
            .iter()
            .zip(ax.values())
            .map(|(b, a)| b - a)
            .collect(),
    )?;
    let mut r = back_project(&misfit, g)?.into_values();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let n = g.image_size();

    let mut iterations = 0;
    let mut breakdown = false;
    while iterations < cfg.cg_iters {
        if rr == 0.0 {
            break;
        }
        let mp = apply_normal(&Image::from_vec(n, n, p.clone())?, g, cfg.tikhonov_lambda)?;
        let curvature = dot(&p, mp.values());
        if curvature <= BREAKDOWN_CURVATURE {
            breakdown = true;
            break;
        }
        let alpha = rr / curvature;
        for (zi, pi) in z.values_mut().iter_mut().zip(&p) {
            *zi += alpha * pi;
        }
        for (ri, mi) in r.iter_mut().zip(mp.values()) {
            *ri -= alpha * mi;
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
        iterations += 1;
    }
    if breakdown {
        log::warn!("CG breakdown after {iterations} iterations");
    }
    Ok(CgOutcome {
        image: z,
        iterations,
        breakdown,
    })
}

/// Correction direction `cg_refine(x0_hat) - x0_hat`.
pub fn dc_correction(x0_hat: &Image, y: &Sinogram, g: &Geometry, cfg: &DcConfig) -> Result<Image> {
    let refined = cg_refine(x0_hat, y, g, cfg)?.image;
    let values = refined
        .values()
        .iter()
        .zip(x0_hat.values())
        .map(|(a, b)| a - b)
        .collect();
    Image::from_vec(x0_hat.width(), x0_hat.height(), values)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Largest observed `|DC(x) - DC(x')| / |x - x'|` over `probes` seeded pairs
/// with `|x - x'| = scale` around random phantoms, where
/// `DC(x) = x + dc_correction(x)`.
pub fn estimate_expansiveness(
    y: &Sinogram,
    g: &Geometry,
    cfg: &DcConfig,
    probes: usize,
    scale: f64,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::InvalidArgument("probes must be >= 1".into()));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let n = g.image_size();
    let mut kappa: f64 = 0.0;
    let mut used = 0;
    for k in 0..probes as u64 {
        let base = if n >= MIN_PHANTOM_SIZE {
            random_ellipse_phantom(&PhantomSpec {
                size: n,
                kind: PhantomKind::RandomEllipses,
                n_ellipses: 5,
                seed: rng::derive_seed(seed, k),
            })?
        } else {
            Image::zeros(n, n)
        };
        let mut r = rng::stream(rng::derive_seed(seed, k), rng::streams::EXPANSIVENESS);
        let dir = rng::standard_normal_vec(&mut r, n * n);
        let len = norm(&dir);
        if len == 0.0 {
            continue;
        }
        let shifted: Vec<f64> = base
            .values()
            .iter()
            .zip(&dir)
            .map(|(b, d)| b + scale * d / len)
            .collect();
        let shifted = Image::from_vec(n, n, shifted)?;
        let gap = distance(base.values(), shifted.values());
        if gap == 0.0 {
            continue;
        }
        let a = cg_refine(&base, y, g, cfg)?.image;
        let b = cg_refine(&shifted, y, g, cfg)?.image;
        kappa = kappa.max(distance(a.values(), b.values()) / gap);
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "all probe pairs were degenerate".into(),
        ));
    }
    Ok(kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_geometry;
    use crate::phantom::shepp_logan;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, 77);
        Image::from_vec(n, n, rng::standard_normal_vec(&mut r, n * n)).unwrap()
    }

    #[test]
    fn residual_identities() {
        let g = make_geometry(10, 24, 16).unwrap();
        let x = shepp_logan(16).unwrap();
        let y = forward_project(&x, &g).unwrap();
        assert_eq!(residual(&x, &y, &g).unwrap(), 0.0);
        let yy: f64 = y.values().iter().map(|v| v * v).sum();
        assert_eq!(residual(&Image::zeros(16, 16), &y, &g).unwrap(), yy);
        let doubled =
            Image::from_vec(16, 16, x.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        let r = residual(&doubled, &y, &g).unwrap();
        assert!((r - yy).abs() <= 1e-12 * yy);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let g = make_geometry(5, 24, 16).unwrap();
        let x = random_image(16, 1);
        let y = forward_project(&random_image(16, 2), &g).unwrap();
        let cfg = DcConfig {
            cg_iters: 0,
            tikhonov_lambda: 0.0,
        };
        let out = cg_refine(&x, &y, &g, &cfg).unwrap();
        assert_eq!(out.image, x);
        let v = dc_correction(&x, &y, &g, &cfg).unwrap();
        assert!(v.values().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn cg_does_not_increase_data_misfit() {
        let g = make_geometry(6, 24, 16).unwrap();
        for seed in 0..5 {
            let x = random_image(16, seed);
            let y = forward_project(&random_image(16, seed + 100), &g).unwrap();
            let before = residual(&x, &y, &g).unwrap();
            let mut last = before;
            for iters in 1..=6 {
                let cfg = DcConfig {
                    cg_iters: iters,
                    tikhonov_lambda: 0.0,
                };
                let z = cg_refine(&x, &y, &g, &cfg).unwrap().image;
                let r = residual(&z, &y, &g).unwrap();
                assert!(r <= last * (1.0 + 1e-12), "seed {seed} iter {iters}");
                last = r;
            }
            let v = dc_correction(&x, &y, &g, &DcConfig::default()).unwrap();
            let moved = Image::from_vec(
                16,
                16,
                x.values()
                    .iter()
                    .zip(v.values())
                    .map(|(a, b)| a + b)
                    .collect(),
            )
            .unwrap();
            assert!(residual(&moved, &y, &g).unwrap() <= before);
        }
    }

    #[test]
    fn consistent_point_is_a_fixed_point() {
        let g = make_geometry(20, 24, 16).unwrap();
        let x = shepp_logan(16).unwrap();
        let y = forward_project(&x, &g).unwrap();
        let v = dc_correction(&x, &y, &g, &DcConfig::default()).unwrap();
        assert!(norm(v.values()) < 1e-12);
    }

    #[test]
    fn zero_system_stops_without_breakdown() {
        let g = make_geometry(3, 8, 8).unwrap();
        let out = cg_refine(
            &Image::zeros(8, 8),
            &Sinogram::zeros(3, 8),
            &g,
            &DcConfig::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert!(!out.breakdown);
    }

    #[test]
    fn expansiveness_identity_and_errors() {
        let g = make_geometry(20, 48, 32).unwrap();
        let y = forward_project(&shepp_logan(32).unwrap(), &g).unwrap();
        let off = DcConfig {
            cg_iters: 0,
            tikhonov_lambda: 0.0,
        };
        assert_eq!(
            estimate_expansiveness(&y, &g, &off, 3, 0.5, 1).unwrap(),
            1.0
        );
        assert!(estimate_expansiveness(&y, &g, &off, 0, 0.5, 1).is_err());
        assert!(estimate_expansiveness(&y, &g, &off, 2, 0.0, 1).is_err());
    }

    #[test]
    fn invalid_lambda() {
        let cfg = DcConfig {
            cg_iters: 1,
            tikhonov_lambda: -1.0,
        };
        assert!(cfg.validate().is_err());
    }
}
