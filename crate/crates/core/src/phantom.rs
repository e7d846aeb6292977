//! Procedural test and training images.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::rng;

pub const MIN_PHANTOM_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub kind: PhantomKind,
    pub n_ellipses: usize,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_PHANTOM_SIZE {
            return Err(Error::InvalidArgument(format!(
                "phantom size {} below minimum {MIN_PHANTOM_SIZE}",
                self.size
            )));
        }
        if self.n_ellipses == 0 {
            return Err(Error::InvalidArgument("n_ellipses must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ellipse in normalized coordinates (image spans [-1, 1] on both axes).
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.sin_cos();
        let dx = x - self.x0;
        let dy = y - self.y0;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

// Modified (high-contrast) Shepp-Logan table.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

fn rasterize(size: usize, ellipses: &[Ellipse]) -> Image {
    let mut img = Image::zeros(size, size);
    let n = size as f64;
    let values = img.values_mut();
    for r in 0..size {
        let y = 1.0 - 2.0 * (r as f64 + 0.5) / n;
        for c in 0..size {
            let x = 2.0 * (c as f64 + 0.5) / n - 1.0;
            let v: f64 = ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            values[r * size + c] = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// The 10-ellipse Shepp-Logan head phantom, clamped to `[0, 1]`.
pub fn shepp_logan(size: usize) -> Result<Image> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::InvalidArgument(format!(
            "phantom size {size} below minimum {MIN_PHANTOM_SIZE}"
        )));
    }
    let ellipses: Vec<Ellipse> = SHEPP_LOGAN
        .iter()
        .map(|&(intensity, a, b, x0, y0, deg)| Ellipse {
            intensity,
            a,
            b,
            x0,
            y0,
            phi: deg.to_radians(),
        })
        .collect();
    Ok(rasterize(size, &ellipses))
}

/// Sum of random ellipses drawn from `spec.seed`, clamped to `[0, 1]`.
///
/// Centers are uniform in the disk of radius 0.7, semi-axes uniform in
/// [0.05, 0.4], rotation uniform and intensities uniform in [0.2, 0.6].
/// Draws whose ellipse would leave the unit disk are rejected and redrawn.
pub fn random_ellipse_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::streams::PHANTOM);
    let mut ellipses = Vec::with_capacity(spec.n_ellipses);
    while ellipses.len() < spec.n_ellipses {
        let radius = 0.7 * r.random::<f64>().sqrt();
        let angle = 2.0 * PI * r.random::<f64>();
        let a: f64 = r.random_range(0.05..0.4);
        let b = r.random_range(0.05..0.4);
        let phi = r.random_range(0.0..PI);
        let intensity = r.random_range(0.2..0.6);
        if radius + a.max(b) > 1.0 {
            continue;
        }
        ellipses.push(Ellipse {
            intensity,
            a,
            b,
            x0: radius * angle.cos(),
            y0: radius * angle.sin(),
            phi,
        });
    }
    Ok(rasterize(spec.size, &ellipses))
}

pub fn generate(spec: &PhantomSpec) -> Result<Image> {
    match spec.kind {
        PhantomKind::SheppLogan => shepp_logan(spec.size),
        PhantomKind::RandomEllipses => random_ellipse_phantom(spec),
    }
}

/// `count` random-ellipse phantoms with seeds `seed, seed + 1, ...`.
pub fn ellipse_dataset(
    size: usize,
    count: usize,
    n_ellipses: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    (0..count as u64)
        .map(|k| {
            random_ellipse_phantom(&PhantomSpec {
                size,
                kind: PhantomKind::RandomEllipses,
                n_ellipses,
                seed: seed.wrapping_add(k),
            })
        })
        .collect()
}
