use crate::consistency::{estimate_expansiveness, DcConfig};
use crate::error::{Error, Result};
use crate::geometry::{norm, Geometry, Sinogram};
use crate::rng;
use crate::sampler::euler_step;
use crate::velocity::VelocityField;
use rand::Rng as _;

/// Errors below this are treated as roundoff and left out of slope fits.
pub const NOISE_FLOOR: f64 = 1e-12;

/// State-to-state map, used for correction operators and exact solutions.
pub type StateMap<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorScalingReport {
    /// Strictly decreasing.
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub fitted_slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Why no slope could be fitted.
    pub degenerate: Option<String>,
}

impl ErrorScalingReport {
    fn from_measurements(dts: Vec<f64>, errors: Vec<f64>) -> Self {
        let fit = fit_loglog(&dts, &errors);
        let degenerate = match fit {
            Some(_) => None,
            None if errors.iter().all(|&e| e < NOISE_FLOOR) => Some("zero error".to_string()),
            None => Some("fewer than 2 errors above the noise floor".to_string()),
        };
        ErrorScalingReport {
            dts,
            errors,
            fitted_slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            degenerate,
        }
    }
}

/// Least-squares `(slope, intercept)` of `ln y` against `ln x`, skipping
/// points with `y < NOISE_FLOOR`. `None` with fewer than two distinct usable points.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(&x, &y)| x > 0.0 && y >= NOISE_FLOOR && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// One-step reuse error: after a fresh Euler step of size `dt` from
/// `(x_start, t_start)`, the distance between the next step taken with the
/// stale velocity and with a fresh one.
pub fn local_reuse_error<F: VelocityField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t_start: f64,
    dts: &[f64],
) -> Result<ErrorScalingReport> {
    let mut dts = dts.to_vec();
    if dts.len() < 4 {
        return Err(Error::InvalidArgument("need at least 4 step sizes".into()));
    }
    if dts.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::InvalidArgument("step sizes must be positive".into()));
    }
    dts.sort_by(|a, b| b.total_cmp(a));
    if dts.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate step sizes".into()));
    }
    if dts[0] / dts[dts.len() - 1] < 100.0 {
        return Err(Error::InvalidArgument(
            "step sizes must span at least 2 decades".into(),
        ));
    }
    if !(t_start.is_finite() && 2.0 * dts[0] <= t_start) {
        return Err(Error::InvalidArgument(format!(
            "two steps of {} overrun t_start = {t_start}",
            dts[0]
        )));
    }
    let v0 = field.eval(x_start, t_start)?;
    let mut errors = Vec::with_capacity(dts.len());
    for &dt in &dts {
        let x1 = euler_step(x_start, &v0, dt)?;
        let stale = euler_step(&x1, &v0, dt)?;
        let v1 = field.eval(&x1, t_start - dt)?;
        let fresh = euler_step(&x1, &v1, dt)?;
        errors.push(distance(&stale, &fresh));
    }
    Ok(ErrorScalingReport::from_measurements(dts, errors))
}

/// Integrates from `t_start` over `n` steps of `dt`, evaluating the field once
/// and reusing it for the next `max_reuse` steps, then repeating.
fn integrate_blocks<F: VelocityField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t_start: f64,
    dt: f64,
    n: usize,
    max_reuse: usize,
    dc: Option<&StateMap>,
) -> Result<Vec<f64>> {
    let mut x = x_start.to_vec();
    let mut cached: Option<Vec<f64>> = None;
    let mut reused = 0;
    for k in 0..n {
        let t = t_start - k as f64 * dt;
        let v = match cached.take() {
            Some(v) if reused < max_reuse => {
                reused += 1;
                v
            }
            _ => {
                reused = 0;
                field.eval(&x, t)?
            }
        };
        x = euler_step(&x, &v, dt)?;
        if let Some(map) = dc {
            x = map(&x)?;
        }
        cached = Some(v);
    }
    Ok(x)
}

/// Ground truth for [`global_reuse_error`].
pub enum Reference<'a> {
    /// Exact map from the state at t = 1 to the state at t = 0.
    Exact(&'a StateMap<'a>),
    /// Plain Euler with `n_ref` steps, at least 64 times the finest tested count.
    Fine { n_ref: usize },
}

/// Terminal error at t = 0 of unconditional reuse blocks (one evaluation
/// followed by `max_reuse` reuses) for each step count in `ns`.
pub fn global_reuse_error<F: VelocityField + ?Sized>(
    field: &F,
    x1: &[f64],
    ns: &[usize],
    max_reuse: usize,
    dc: Option<&StateMap>,
    reference: Reference<'_>,
) -> Result<ErrorScalingReport> {
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 4 || ns[0] == 0 {
        return Err(Error::InvalidArgument(
            "need at least 4 distinct positive step counts".into(),
        ));
    }
    let finest = *ns.last().unwrap();
    let target = match reference {
        Reference::Exact(map) => map(x1)?,
        Reference::Fine { n_ref } => {
            if n_ref < 64 * finest {
                return Err(Error::InvalidArgument(format!(
                    "reference needs at least {} steps, got {n_ref}",
                    64 * finest
                )));
            }
            integrate_blocks(field, x1, 1.0, 1.0 / n_ref as f64, n_ref, 0, dc)?
        }
    };
    let mut dts = Vec::with_capacity(ns.len());
    let mut errors = Vec::with_capacity(ns.len());
    for &n in &ns {
        let dt = 1.0 / n as f64;
        let x0 = integrate_blocks(field, x1, 1.0, dt, n, max_reuse, dc)?;
        dts.push(dt);
        errors.push(distance(&x0, &target));
    }
    Ok(ErrorScalingReport::from_measurements(dts, errors))
}

/// Distance after one block of `reuse_steps + 1` steps between the
/// trajectory that reuses the first velocity and plain Euler.
pub fn block_reuse_deviation<F: VelocityField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t_start: f64,
    dt: f64,
    reuse_steps: usize,
    dc: Option<&StateMap>,
) -> Result<f64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let steps = reuse_steps + 1;
    if t_start - steps as f64 * dt < -1e-12 {
        return Err(Error::InvalidArgument(format!(
            "{steps} steps of {dt} overrun t_start = {t_start}"
        )));
    }
    let stale = integrate_blocks(field, x_start, t_start, dt, steps, reuse_steps, dc)?;
    let fresh = integrate_blocks(field, x_start, t_start, dt, steps, 0, dc)?;
    Ok(distance(&stale, &fresh))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockScalingReport {
    pub dt: f64,
    pub reuse_counts: Vec<usize>,
    pub deviations: Vec<f64>,
    /// Log-log slope of deviation against reuse count.
    pub fitted_slope: Option<f64>,
    pub intercept: Option<f64>,
}

pub fn block_reuse_scaling<F: VelocityField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t_start: f64,
    dt: f64,
    reuse_counts: &[usize],
    dc: Option<&StateMap>,
) -> Result<BlockScalingReport> {
    if reuse_counts.len() < 2 || reuse_counts.contains(&0) {
        return Err(Error::InvalidArgument(
            "need at least 2 positive reuse counts".into(),
        ));
    }
    let deviations = reuse_counts
        .iter()
        .map(|&m| block_reuse_deviation(field, x_start, t_start, dt, m, dc))
        .collect::<Result<Vec<_>>>()?;
    let ms: Vec<f64> = reuse_counts.iter().map(|&m| m as f64).collect();
    let fit = fit_loglog(&ms, &deviations);
    Ok(BlockScalingReport {
        dt,
        reuse_counts: reuse_counts.to_vec(),
        deviations,
        fitted_slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
    })
}

/// Ball of states and interval of times sampled by [`lipschitz_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub center: Vec<f64>,
    pub radius: f64,
    pub t_range: (f64, f64),
}

/// Correction operator whose expansiveness fills [`LipschitzBudget::kappa`].
pub struct ExpansivenessProbe<'a> {
    pub y: &'a Sinogram,
    pub geometry: &'a Geometry,
    pub dc: &'a DcConfig,
    pub probes: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzBudget {
    pub l_x: f64,
    pub l_t: f64,
    pub v_max: f64,
    pub kappa: f64,
    /// Time horizon.
    pub horizon: f64,
    /// Number of reuse blocks.
    pub blocks: usize,
}

impl LipschitzBudget {
    /// `kappa/2 * L * (L - 1) * dt^2 * (L_t + L_x V_max)` for a block of `block_len`
    /// steps sharing one velocity.
    pub fn block_bound(&self, block_len: usize, dt: f64) -> f64 {
        let l = block_len as f64;
        0.5 * self.kappa * l * (l - 1.0) * dt * dt * (self.l_t + self.l_x * self.v_max)
    }

    /// Sets `blocks` for `n_steps` steps split into blocks of `block_len`.
    pub fn with_schedule(mut self, n_steps: usize, block_len: usize) -> Self {
        self.blocks = n_steps.div_ceil(block_len.max(1));
        self
    }
}

fn sample_ball(r: &mut rng::Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let d = center.len();
    let dir = rng::standard_normal_vec(r, d);
    let len = norm(&dir);
    let u: f64 = r.random();
    let scale = if len > 0.0 {
        radius * u.powf(1.0 / d as f64) / len
    } else {
        0.0
    };
    center
        .iter()
        .zip(&dir)
        .map(|(c, e)| c + scale * e)
        .collect()
}

/// Empirical Lipschitz constants and velocity bound over seeded samples of
/// `region`. Each estimate is a lower bound of the true constant.
pub fn lipschitz_probe<F: VelocityField + ?Sized>(
    field: &F,
    region: &ProbeRegion,
    samples: usize,
    seed: u64,
    expansiveness: Option<&ExpansivenessProbe>,
) -> Result<LipschitzBudget> {
    if samples < 2 {
        return Err(Error::InvalidArgument("samples must be >= 2".into()));
    }
    let (t_lo, t_hi) = region.t_range;
    if !(t_lo.is_finite() && t_hi.is_finite() && t_lo <= t_hi) {
        return Err(Error::InvalidArgument("invalid time range".into()));
    }
    if !(region.radius.is_finite() && region.radius >= 0.0) || region.center.is_empty() {
        return Err(Error::InvalidArgument("invalid probe region".into()));
    }
    let mut r = rng::stream(seed, rng::streams::LIPSCHITZ);
    let (mut l_x, mut l_t, mut v_max) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let t = t_lo + (t_hi - t_lo) * r.random::<f64>();
        let t2 = t_lo + (t_hi - t_lo) * r.random::<f64>();
        let x = sample_ball(&mut r, &region.center, region.radius);
        let x2 = sample_ball(&mut r, &region.center, region.radius);
        let v = field.eval(&x, t)?;
        let vx = field.eval(&x2, t)?;
        let vt = field.eval(&x, t2)?;
        let gap = distance(&x, &x2);
        if gap > 0.0 {
            l_x = l_x.max(distance(&v, &vx) / gap);
        }
        if t != t2 {
            l_t = l_t.max(distance(&v, &vt) / (t - t2).abs());
        }
        v_max = v_max.max(norm(&v)).max(norm(&vx)).max(norm(&vt));
    }
    let kappa = match expansiveness {
        Some(p) => estimate_expansiveness(p.y, p.geometry, p.dc, p.probes, p.scale, seed)?,
        None => 1.0,
    };
    Ok(LipschitzBudget {
        l_x,
        l_t,
        v_max,
        kappa,
        horizon: 1.0,
        blocks: 0,
    })
}
