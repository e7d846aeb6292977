//! Parallel-beam acquisition geometry, the matched projector pair and FBP.
//!
//! The projector is ray driven with linear (Joseph) interpolation: each ray
//! is stepped one pixel at a time along its dominant axis and the image is
//! linearly interpolated across the other axis. [`back_project`] scatters the
//! exact same weights, so the pair is an exact transpose.
//!
//! Coordinates are in pixel units with the origin at the image center, `x`
//! pointing right along columns and `y` pointing up against rows. A ray at
//! angle `theta` and signed detector offset `s` is the line
//! `s * (cos, sin) + u * (-sin, cos)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Square attenuation grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dims(
                format!("{} values for {width}x{height}", width * height),
                values.len(),
            ));
        }
        Ok(Image {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Projection data indexed by (angle, detector bin), angle-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_detectors: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_angles: usize, n_detectors: usize) -> Self {
        Sinogram {
            n_angles,
            n_detectors,
            values: vec![0.0; n_angles * n_detectors],
        }
    }

    pub fn from_vec(n_angles: usize, n_detectors: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_angles * n_detectors {
            return Err(Error::dims(
                format!(
                    "{} values for {n_angles}x{n_detectors}",
                    n_angles * n_detectors
                ),
                values.len(),
            ));
        }
        Ok(Sinogram {
            n_angles,
            n_detectors,
            values,
        })
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, angle: usize) -> &[f64] {
        &self.values[angle * self.n_detectors..(angle + 1) * self.n_detectors]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    angles: Vec<f64>,
    n_detectors: usize,
    detector_spacing: f64,
    image_size: usize,
}

/// Detector count covering 1.5x the image side, the default used by the CLI.
pub fn default_detector_count(image_size: usize) -> usize {
    (3 * image_size).div_ceil(2)
}

/// Uniformly spaced angles over `[0, pi)` with unit detector spacing.
pub fn make_geometry(n_angles: usize, n_detectors: usize, image_size: usize) -> Result<Geometry> {
    if n_angles == 0 {
        return Err(Error::InvalidArgument("n_angles must be >= 1".into()));
    }
    let angles = (0..n_angles)
        .map(|k| PI * k as f64 / n_angles as f64)
        .collect();
    Geometry::with_angles(angles, n_detectors, 1.0, image_size)
}

impl Geometry {
    pub fn with_angles(
        angles: Vec<f64>,
        n_detectors: usize,
        detector_spacing: f64,
        image_size: usize,
    ) -> Result<Self> {
        if angles.is_empty() || n_detectors == 0 || image_size == 0 {
            return Err(Error::InvalidArgument(
                "n_angles, n_detectors and image_size must be >= 1".into(),
            ));
        }
        if n_detectors < image_size {
            return Err(Error::InvalidArgument(format!(
                "n_detectors ({n_detectors}) must be >= image_size ({image_size})"
            )));
        }
        if !(detector_spacing.is_finite() && detector_spacing > 0.0) {
            return Err(Error::InvalidArgument(
                "detector_spacing must be positive".into(),
            ));
        }
        if angles.iter().any(|a| !(0.0..PI).contains(a)) {
            return Err(Error::InvalidArgument("angles must lie in [0, pi)".into()));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "angles must be strictly increasing".into(),
            ));
        }
        Ok(Geometry {
            angles,
            n_detectors,
            detector_spacing,
            image_size,
        })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn n_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn n_measurements(&self) -> usize {
        self.angles.len() * self.n_detectors
    }

    /// Signed offset of detector bin `j` from the rotation center.
    pub fn detector_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    pub(crate) fn check_image(&self, x: &Image) -> Result<()> {
        if x.width != self.image_size || x.height != self.image_size {
            return Err(Error::dims(
                format!("{0}x{0} image", self.image_size),
                format!("{}x{}", x.width, x.height),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_sinogram(&self, y: &Sinogram) -> Result<()> {
        if y.n_angles != self.n_angles() || y.n_detectors != self.n_detectors {
            return Err(Error::dims(
                format!("{}x{} sinogram", self.n_angles(), self.n_detectors),
                format!("{}x{}", y.n_angles, y.n_detectors),
            ));
        }
        Ok(())
    }

    /// Visits every `(pixel index, weight)` of one ray.
    fn trace_ray(&self, angle: usize, bin: usize, mut visit: impl FnMut(usize, f64)) {
        let n = self.image_size;
        let half = (n as f64 - 1.0) / 2.0;
        let (sin, cos) = self.angles[angle].sin_cos();
        let s = self.detector_offset(bin);

        let mut splat = |major: usize, minor_coord: f64, step: f64, row_major: bool| {
            let lo = minor_coord.floor();
            if lo < -1.0 || lo > n as f64 - 1.0 {
                return;
            }
            let frac = minor_coord - lo;
            let lo = lo as isize;
            for (idx, w) in [(lo, 1.0 - frac), (lo + 1, frac)] {
                if idx < 0 || idx >= n as isize || w == 0.0 {
                    continue;
                }
                let idx = idx as usize;
                let pixel = if row_major {
                    major * n + idx
                } else {
                    idx * n + major
                };
                visit(pixel, w * step);
            }
        };

        if cos.abs() >= sin.abs() {
            // mostly vertical: one sample per row, interpolate across columns
            let step = 1.0 / cos.abs();
            for row in 0..n {
                let y = half - row as f64;
                let u = (y - s * sin) / cos;
                let x = s * cos - u * sin;
                splat(row, x + half, step, true);
            }
        } else {
            let step = 1.0 / sin.abs();
            for col in 0..n {
                let x = col as f64 - half;
                let u = (s * cos - x) / sin;
                let y = s * sin + u * cos;
                splat(col, half - y, step, false);
            }
        }
    }
}

/// Computes `A x`.
pub fn forward_project(x: &Image, g: &Geometry) -> Result<Sinogram> {
    g.check_image(x)?;
    let mut out = Sinogram::zeros(g.n_angles(), g.n_detectors);
    for a in 0..g.n_angles() {
        for b in 0..g.n_detectors {
            let mut acc = 0.0;
            g.trace_ray(a, b, |p, w| acc += w * x.values[p]);
            out.values[a * g.n_detectors + b] = acc;
        }
    }
    Ok(out)
}

/// Computes `A^T y`, the exact transpose of [`forward_project`].
pub fn back_project(y: &Sinogram, g: &Geometry) -> Result<Image> {
    g.check_sinogram(y)?;
    let n = g.image_size;
    let mut out = Image::zeros(n, n);
    for a in 0..g.n_angles() {
        for b in 0..g.n_detectors {
            let v = y.values[a * g.n_detectors + b];
            if v == 0.0 {
                continue;
            }
            g.trace_ray(a, b, |p, w| out.values[p] += w * v);
        }
    }
    Ok(out)
}

/// Frequency response of the band-limited ramp filter (spatial Ram-Lak kernel
/// sampled at the detector spacing), for a zero-padded length `len`.
fn ramp_response(len: usize, spacing: f64, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut kernel = vec![Complex64::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * spacing * spacing);
    for k in (1..len / 2).step_by(2) {
        let v = -1.0 / ((k * k) as f64 * PI * PI * spacing * spacing);
        kernel[k].re = v;
        kernel[len - k].re = v;
    }
    planner.plan_fft_forward(len).process(&mut kernel);
    kernel
}

/// Filtered backprojection with a Ram-Lak filter and linear interpolation.
pub fn fbp(y: &Sinogram, g: &Geometry) -> Result<Image> {
    g.check_sinogram(y)?;
    let n_det = g.n_detectors;
    let spacing = g.detector_spacing;
    let len = (2 * n_det).next_power_of_two().max(64);

    let mut planner = FftPlanner::new();
    let response = ramp_response(len, spacing, &mut planner);
    let forward = planner.plan_fft_forward(len);
    let inverse = planner.plan_fft_inverse(len);

    let mut filtered = vec![0.0; g.n_angles() * n_det];
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for a in 0..g.n_angles() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (c, &v) in buf.iter_mut().zip(y.row(a)) {
            c.re = v;
        }
        forward.process(&mut buf);
        for (c, h) in buf.iter_mut().zip(&response) {
            *c *= h;
        }
        inverse.process(&mut buf);
        let scale = spacing / len as f64;
        for (dst, c) in filtered[a * n_det..(a + 1) * n_det].iter_mut().zip(&buf) {
            *dst = c.re * scale;
        }
    }

    let n = g.image_size;
    let half = (n as f64 - 1.0) / 2.0;
    let det_center = (n_det as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(n, n);
    for (a, &theta) in g.angles.iter().enumerate() {
        let (sin, cos) = theta.sin_cos();
        let row = &filtered[a * n_det..(a + 1) * n_det];
        for r in 0..n {
            let y_pos = half - r as f64;
            for c in 0..n {
                let x_pos = c as f64 - half;
                let pos = (x_pos * cos + y_pos * sin) / spacing + det_center;
                let lo = pos.floor();
                if lo < 0.0 || lo + 1.0 > (n_det - 1) as f64 {
                    continue;
                }
                let frac = pos - lo;
                let lo = lo as usize;
                out.values[r * n + c] += (1.0 - frac) * row[lo] + frac * row[lo + 1];
            }
        }
    }
    let scale = PI / g.n_angles() as f64;
    out.values.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
