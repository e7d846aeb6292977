//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report reaches stdout. The
//! process exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use flowct::analysis::{
    block_reuse_scaling, cosine_series, global_reuse_error, lipschitz_probe, local_reuse_error,
    psnr, ProbeRegion, Reference, StateMap,
};
use flowct::consistency::{cg_refine, estimate_expansiveness, DcConfig};
use flowct::geometry::{
    back_project, dot, fbp, forward_project, make_geometry, norm, Geometry, Image, Sinogram,
};
use flowct::phantom::{ellipse_dataset, shepp_logan};
use flowct::rng;
use flowct::sampler::{
    efmct_reconstruct, fmct_reconstruct, prior_sample, ReconResult, SamplerConfig,
};
use flowct::velocity::{
    cfm_grad, cfm_loss, train, ConstantField, NeuralVelocity, PointTargetField, RotationField,
    TrainConfig, VelocityField,
};

// Pinned from the first run of the 64x64 suite; asserted as regression floors.
const PIN_FBP: f64 = 25.829;
const PIN_FMCT: f64 = 26.433;
const PIN_EFMCT: f64 = 26.979;
const PIN_COSINE: f64 = 0.9992;
const PIN_SLACK: f64 = 0.05;

type Outcome = std::result::Result<String, String>;

/// Contract violations found in any EFMCT run, and the number of runs seen.
static EFMCT_AUDIT: Mutex<(usize, Vec<String>)> = Mutex::new((0, Vec::new()));

fn audited_efmct<F: VelocityField + ?Sized>(
    y: &Sinogram,
    g: &Geometry,
    field: &F,
    cfg: &SamplerConfig,
) -> ReconResult {
    let res = efmct_reconstruct(y, g, field, cfg).unwrap();
    let bad = common::efmct_violations(&res, cfg);
    let mut audit = EFMCT_AUDIT.lock().unwrap();
    audit.0 += 1;
    audit.1.extend(bad);
    res
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> std::result::Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let dts = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4];
    let rep = local_reuse_error(&RotationField::new(1.0), &[1.0, 0.0], 1.0, &dts)
        .map_err(|e| e.to_string())?;
    within(start.elapsed(), 1.0)?;
    let slope = rep.fitted_slope.ok_or("degenerate fit")?;
    ensure((slope - 2.0).abs() <= 0.2, format!("slope {slope:.4}"))?;
    Ok(format!("slope {slope:.4}"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let field = RotationField::new(1.0);
    let exact = |x: &[f64]| field.exact_flow(x, 1.0, 0.0);
    let exact: &StateMap = &exact;
    let ns = [32, 64, 128, 256, 512];
    let x1 = [1.0, 0.0];
    let reuse = global_reuse_error(&field, &x1, &ns, 4, None, Reference::Exact(exact))
        .map_err(|e| e.to_string())?;
    let euler = global_reuse_error(&field, &x1, &ns, 0, None, Reference::Exact(exact))
        .map_err(|e| e.to_string())?;
    within(start.elapsed(), 5.0)?;
    let slope = reuse.fitted_slope.ok_or("degenerate fit")?;
    ensure((slope - 1.0).abs() <= 0.3, format!("slope {slope:.4}"))?;
    for ((n, r), e) in ns.iter().zip(&reuse.errors).zip(&euler.errors) {
        ensure(e < r, format!("N = {n}: Euler {e:e} not below reuse {r:e}"))?;
    }
    Ok(format!(
        "slope {slope:.4}, Euler below reuse at all {} N",
        ns.len()
    ))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let field = RotationField::new(1.0);
    let x = [1.0, 0.0];
    let dt = 1.0 / 256.0;
    let counts = [1, 2, 4, 8];
    let rep = block_reuse_scaling(&field, &x, 1.0, dt, &counts, None).map_err(|e| e.to_string())?;
    let region = ProbeRegion {
        center: x.to_vec(),
        radius: 0.1,
        t_range: (1.0 - 9.0 * dt, 1.0),
    };
    // no correction operator here, so the probe reports kappa = 1
    let budget = lipschitz_probe(&field, &region, 256, 11, None).map_err(|e| e.to_string())?;
    within(start.elapsed(), 5.0)?;
    let slope = rep.fitted_slope.ok_or("degenerate fit")?;
    ensure((slope - 2.0).abs() <= 0.3, format!("slope {slope:.4}"))?;
    let mut worst: f64 = 0.0;
    for (&m, &dev) in counts.iter().zip(&rep.deviations) {
        let bound = 2.0 * budget.block_bound(m + 1, dt);
        ensure(
            dev <= bound,
            format!("M = {m}: deviation {dev:e} > bound {bound:e}"),
        )?;
        worst = worst.max(dev / bound);
    }
    Ok(format!(
        "slope {slope:.4}, max deviation/bound {worst:.3} (L_x {:.3}, L_t {:.3}, V_max {:.3}, kappa {})",
        budget.l_x, budget.l_t, budget.v_max, budget.kappa
    ))
}

fn criterion_4() -> Outcome {
    let g = make_geometry(6, 12, 8).unwrap();
    let y = forward_project(&shepp_logan(8).unwrap(), &g).unwrap();
    let same = |a: &ReconResult, b: &ReconResult| {
        a.image == b.image && a.trace.records == b.trace.records && a.trace.nfe == b.trace.nfe
    };
    let mut runs = 0;
    for net_seed in 0..4 {
        let net = NeuralVelocity::new(64, &[16], 8, net_seed).unwrap();
        for n in [1, 5, 20, 50] {
            let base = SamplerConfig {
                n_steps: n,
                seed: net_seed + 100,
                ..Default::default()
            };
            let fm = fmct_reconstruct(&y, &g, &net, &base).unwrap();
            let no_reuse = SamplerConfig {
                max_reuse: 0,
                ..base.clone()
            };
            ensure(
                same(&fm, &audited_efmct(&y, &g, &net, &no_reuse)),
                format!("M = 0 differs from FMCT (net {net_seed}, N = {n})"),
            )?;
            for late in [n, n + 3] {
                let cfg = SamplerConfig {
                    reuse_start: late,
                    ..base.clone()
                };
                ensure(
                    same(&fm, &audited_efmct(&y, &g, &net, &cfg)),
                    format!("reuse_start = {late} differs from FMCT (N = {n})"),
                )?;
            }
            runs += 3;
        }
    }
    let constant = ConstantField::new(vec![0.0; 64]);
    for n in [1, 7, 50, 64] {
        for m in [0, 1, 3, 10] {
            let cfg = SamplerConfig {
                n_steps: n,
                max_reuse: m,
                ..Default::default()
            };
            let res = audited_efmct(&y, &g, &constant, &cfg);
            ensure(
                res.trace.nfe == n.div_ceil(m + 1),
                format!("constant field N = {n}, M = {m}: NFE {}", res.trace.nfe),
            )?;
            runs += 1;
        }
    }
    Ok(format!("{runs} comparisons"))
}

fn criterion_5() -> Outcome {
    let audit = EFMCT_AUDIT.lock().unwrap();
    ensure(audit.0 > 0, "no EFMCT runs recorded")?;
    if let Some(first) = audit.1.first() {
        return Err(format!("{} violations, first: {first}", audit.1.len()));
    }
    Ok(format!("{} EFMCT runs audited", audit.0))
}

fn criterion_6() -> Outcome {
    let mut r = rng::stream(606, 0);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let n = [8, 16, 32][k % 3];
        let g = make_geometry(3 + k % 17, n + n / 2, n).unwrap();
        let x = Image::from_vec(n, n, rng::standard_normal_vec(&mut r, n * n)).unwrap();
        let y = Sinogram::from_vec(
            g.n_angles(),
            g.n_detectors(),
            rng::standard_normal_vec(&mut r, g.n_measurements()),
        )
        .unwrap();
        let ax = forward_project(&x, &g).unwrap();
        let lhs = dot(ax.values(), y.values());
        let rhs = dot(x.values(), back_project(&y, &g).unwrap().values());
        worst = worst.max((lhs - rhs).abs() / (norm(ax.values()) * norm(y.values())));
    }
    ensure(worst <= 1e-10, format!("adjoint mismatch {worst:e}"))?;

    let n = 8;
    let g = make_geometry(24, 12, n).unwrap();
    let a = common::dense_matrix(&g);
    let mut gap_worst: f64 = 0.0;
    for seed in 0..3 {
        let truth = Image::from_vec(n, n, rng::standard_normal_vec(&mut r, n * n)).unwrap();
        let y = forward_project(&truth, &g).unwrap();
        let direct = common::normal_equation_solve(&a, y.values());
        let cfg = DcConfig {
            cg_iters: n * n,
            tikhonov_lambda: 0.0,
        };
        let cg = cg_refine(&Image::zeros(n, n), &y, &g, &cfg).unwrap();
        let diff: Vec<f64> = cg
            .image
            .values()
            .iter()
            .zip(&direct)
            .map(|(p, q)| p - q)
            .collect();
        let gap = norm(&diff) / norm(&direct);
        ensure(gap <= 1e-8, format!("seed {seed}: CG vs direct {gap:e}"))?;
        gap_worst = gap_worst.max(gap);
    }
    Ok(format!("adjoint {worst:.1e}, CG vs direct {gap_worst:.1e}"))
}

fn criterion_7() -> Outcome {
    let batch = vec![vec![0.2, 0.9], vec![0.7, 0.1], vec![0.5, 0.5]];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let model = NeuralVelocity::new(2, &[4], 4, seed).unwrap();
        let analytic = cfm_grad(&model, &batch, seed).unwrap().1.to_flat();
        let base = model.params().to_flat();
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..base.len() {
            let mut probe = model.clone();
            let mut p = base.clone();
            p[i] += h;
            probe.params_mut().assign_flat(&p).unwrap();
            let up = cfm_loss(&probe, &batch, seed).unwrap().0;
            p[i] -= 2.0 * h;
            probe.params_mut().assign_flat(&p).unwrap();
            let down = cfm_loss(&probe, &batch, seed).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-3 * scale);
            ensure(
                err <= 1e-4,
                format!("seed {seed} param {i}: relative error {err:e}"),
            )?;
            worst = worst.max(err);
        }
    }
    Ok(format!("max relative error {worst:.1e}"))
}

fn criterion_8() -> Outcome {
    let n = 16;
    let g = make_geometry(20, 24, n).unwrap();
    let c = shepp_logan(n).unwrap();
    let y = forward_project(&c, &g).unwrap();
    let field = PointTargetField::new(c.values().to_vec());
    let mut worst: f64 = 0.0;
    for steps in [1, 2, 3, 10, 50, 999, 1500] {
        for seed in 0..4 {
            let cfg = SamplerConfig {
                n_steps: steps,
                seed,
                ..Default::default()
            };
            let res = fmct_reconstruct(&y, &g, &field, &cfg).unwrap();
            let mut r = rng::stream(seed, rng::streams::SAMPLER_INIT);
            let x1 = rng::standard_normal_vec(&mut r, n * n);
            let start: Vec<f64> = x1.iter().zip(c.values()).map(|(a, b)| a - b).collect();
            let end: Vec<f64> = res
                .image
                .values()
                .iter()
                .zip(c.values())
                .map(|(a, b)| a - b)
                .collect();
            let tol = field.t_min() * norm(&start) + 1e-8;
            ensure(
                norm(&end) <= tol,
                format!("N = {steps}, seed {seed}: error {:e} > {tol:e}", norm(&end)),
            )?;
            worst = worst.max(norm(&end));
        }
    }
    Ok(format!("max terminal error {worst:.1e}"))
}

struct Suite {
    fbp: f64,
    fmct: f64,
    efmct: f64,
    nfe: Vec<usize>,
    cosine: f64,
    prior_in_range: f64,
    elapsed: Duration,
}

const SIZE: usize = 64;
const N_STEPS: usize = 50;

fn desk_suite() -> Suite {
    let start = Instant::now();
    let data = ellipse_dataset(SIZE, 2000, 5, 0).unwrap();
    let cfg = TrainConfig {
        image_size: SIZE,
        n_steps: 1500,
        batch_size: 64,
        ..Default::default()
    };
    let model = train(&data, &cfg).unwrap().model;
    let g = make_geometry(20, 96, SIZE).unwrap();
    let test = ellipse_dataset(SIZE, 10, 5, 1_000_000).unwrap();
    let (mut fbp_sum, mut fmct_sum, mut efmct_sum, mut cos_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut nfe = Vec::new();
    for (k, x) in test.iter().enumerate() {
        let y = forward_project(x, &g).unwrap();
        let sc = SamplerConfig {
            n_steps: N_STEPS,
            max_reuse: 10,
            eta: 1.05,
            seed: k as u64,
            record_velocities: true,
            ..Default::default()
        };
        let fm = fmct_reconstruct(&y, &g, &model, &sc).unwrap();
        let ef = audited_efmct(&y, &g, &model, &sc);
        fbp_sum += psnr(x, &fbp(&y, &g).unwrap(), 1.0).unwrap();
        fmct_sum += psnr(x, &fm.image, 1.0).unwrap();
        efmct_sum += psnr(x, &ef.image, 1.0).unwrap();
        cos_sum += cosine_series(&fm.trace).unwrap().mean;
        nfe.push(ef.trace.nfe);
    }
    let elapsed = start.elapsed();

    let prior = prior_sample(&model, SIZE, N_STEPS, 0).unwrap();
    let inside = prior
        .values()
        .iter()
        .filter(|v| (-0.2..=1.2).contains(*v))
        .count();
    let m = test.len() as f64;
    Suite {
        fbp: fbp_sum / m,
        fmct: fmct_sum / m,
        efmct: efmct_sum / m,
        nfe,
        cosine: cos_sum / m,
        prior_in_range: inside as f64 / prior.values().len() as f64,
        elapsed,
    }
}

fn criterion_9(s: &Suite) -> Outcome {
    within(s.elapsed, 600.0)?;
    ensure(
        s.fmct > s.fbp,
        format!("FMCT {:.3} dB not above FBP {:.3} dB", s.fmct, s.fbp),
    )?;
    ensure(
        s.fbp >= PIN_FBP - PIN_SLACK,
        format!("FBP regressed to {:.3}", s.fbp),
    )?;
    ensure(
        s.fmct >= PIN_FMCT - PIN_SLACK,
        format!("FMCT regressed to {:.3}", s.fmct),
    )?;
    Ok(format!(
        "FMCT {:.3} dB > FBP {:.3} dB ({:.0}s with training)",
        s.fmct,
        s.fbp,
        s.elapsed.as_secs_f64()
    ))
}

fn criterion_10(s: &Suite) -> Outcome {
    let worst = *s.nfe.iter().max().ok_or("no runs")?;
    ensure(
        2 * worst <= N_STEPS,
        format!("NFE {worst} above half of {N_STEPS}"),
    )?;
    ensure(
        (s.efmct - s.fmct).abs() <= 1.0,
        format!("EFMCT {:.3} dB vs FMCT {:.3} dB", s.efmct, s.fmct),
    )?;
    ensure(
        s.efmct >= PIN_EFMCT - PIN_SLACK,
        format!("EFMCT regressed to {:.3}", s.efmct),
    )?;
    Ok(format!(
        "max NFE {worst}/{N_STEPS}, EFMCT {:.3} dB vs FMCT {:.3} dB",
        s.efmct, s.fmct
    ))
}

fn criterion_11(s: &Suite) -> Outcome {
    let n = 16;
    let g = make_geometry(8, 24, n).unwrap();
    let y = forward_project(&shepp_logan(n).unwrap(), &g).unwrap();
    let mut r = rng::stream(1111, 0);
    let field = ConstantField::new(rng::standard_normal_vec(&mut r, n * n));
    let cfg = SamplerConfig {
        n_steps: 20,
        record_velocities: true,
        ..Default::default()
    };
    let series = cosine_series(&fmct_reconstruct(&y, &g, &field, &cfg).unwrap().trace)
        .map_err(|e| e.to_string())?;
    ensure(
        series.values.iter().all(|&v| v == 1.0),
        format!("constant field similarities {:?}", series.values),
    )?;
    ensure(
        s.cosine >= 0.9,
        format!("trained mean similarity {:.4}", s.cosine),
    )?;
    ensure(
        s.cosine >= PIN_COSINE - 1e-3,
        format!("trained mean similarity regressed to {:.4}", s.cosine),
    )?;
    Ok(format!(
        "constant field 1.0 exactly, trained mean {:.4}",
        s.cosine
    ))
}

fn run(id: usize, f: impl FnOnce() -> Outcome) -> (usize, Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    eprintln!("criterion {id} done");
    (id, outcome)
}

fn main() {
    let mut results = vec![
        run(1, criterion_1),
        run(2, criterion_2),
        run(3, criterion_3),
        run(4, criterion_4),
        run(6, criterion_6),
        run(7, criterion_7),
        run(8, criterion_8),
    ];
    match catch_unwind(desk_suite) {
        Ok(suite) => {
            results.push(run(9, || criterion_9(&suite)));
            results.push(run(10, || criterion_10(&suite)));
            results.push(run(11, || criterion_11(&suite)));
            println!(
                "info: prior sample (N = {N_STEPS}) has {:.1}% of pixels in [-0.2, 1.2]",
                100.0 * suite.prior_in_range
            );
        }
        Err(_) => {
            for id in 9..=11 {
                results.push((id, Err("desk-scale suite panicked".into())));
            }
        }
    }
    results.push(run(5, criterion_5));

    let g = make_geometry(20, 48, 32).unwrap();
    let y = forward_project(&ellipse_dataset(32, 1, 5, 3).unwrap()[0], &g).unwrap();
    if let Ok(kappa) = estimate_expansiveness(&y, &g, &DcConfig::default(), 8, 0.1, 0) {
        println!("info: kappa_hat (20 views, 32x32, 5 CG iterations) = {kappa:.6}");
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {id:>2}: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2}: FAIL  {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
