use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use flowct::analysis::{
    self, global_reuse_error, local_reuse_error, BenchTask, ErrorScalingReport, Method, Reference,
    StateMap,
};
use flowct::geometry::{default_detector_count, fbp, forward_project, make_geometry};
use flowct::io;
use flowct::phantom::{self, PhantomSpec};
use flowct::velocity::{self, PointTargetField, RotationField};
use flowct::{
    efmct_reconstruct, fmct_reconstruct, residual, Geometry, Image, SamplerConfig, SamplerTrace,
    VelocityField,
};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AblateAxis, FieldChoice, GeometrySection, RunConfig};
use crate::{
    usage, AblateArgs, BenchmarkArgs, CmdResult, Failure, FieldArgs, GeometryArgs, PhantomArgs,
    ProjectArgs, ReconstructArgs, SamplerArgs, TrainArgs, VerifyArgs,
};

/// Reconstructions live in `[0, 1]`.
const DATA_RANGE: f64 = 1.0;
const LOCAL_SLOPE: (f64, f64) = (1.8, 2.2);
const GLOBAL_SLOPE: (f64, f64) = (0.7, 1.3);

fn invalid(e: flowct::Error) -> Failure {
    match e {
        flowct::Error::InvalidArgument(_) => Failure::Usage(anyhow::anyhow!("{e}")),
        other => other.into(),
    }
}

fn square_size(img: &Image, path: &Path) -> Result<usize, Failure> {
    if img.width() != img.height() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{}: image is {}x{}, expected square",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    Ok(img.width())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().with_context(|| path.display().to_string())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn phantom(cfg: RunConfig, a: PhantomArgs) -> CmdResult {
    let p = &cfg.phantom;
    let spec = PhantomSpec {
        size: a.size.unwrap_or(p.size),
        kind: a.kind.unwrap_or(p.kind).into(),
        n_ellipses: a.n_ellipses.unwrap_or(p.n_ellipses),
        seed: a.seed.unwrap_or(p.seed),
    };
    spec.validate().map_err(invalid)?;
    match a.count.or(p.count) {
        None => {
            let img = phantom::generate(&spec)?;
            let out = cfg.output(&a.out)?;
            io::save_image(&out, &img)?;
            if let Some(pgm) = &a.pgm {
                io::export_pgm(&img, cfg.output(pgm)?, (0.0, 1.0))?;
            }
            println!(
                "wrote {}x{} phantom to {}",
                spec.size,
                spec.size,
                out.display()
            );
        }
        Some(0) => return Err(usage("--count must be at least 1")),
        Some(count) => {
            if spec.kind != flowct::PhantomKind::RandomEllipses {
                return Err(usage("--count needs --kind random"));
            }
            if a.pgm.is_some() {
                return Err(usage("--pgm applies to a single phantom only"));
            }
            let dir = cfg.output(&a.out)?;
            std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            let images = phantom::ellipse_dataset(spec.size, count, spec.n_ellipses, spec.seed)?;
            for (k, img) in images.iter().enumerate() {
                io::save_image(dir.join(format!("phantom_{k:05}.fct")), img)?;
            }
            println!("wrote {count} phantoms to {}", dir.display());
        }
    }
    Ok(())
}

fn geometry(sec: &GeometrySection, a: &GeometryArgs, size: usize) -> Result<Geometry, Failure> {
    let views = a.views.unwrap_or(sec.views);
    let detectors = a
        .detectors
        .or(sec.detectors)
        .unwrap_or_else(|| default_detector_count(size));
    make_geometry(views, detectors, size).map_err(invalid)
}

pub fn project(cfg: RunConfig, a: ProjectArgs) -> CmdResult {
    let img = io::load_image(&a.image)?;
    let size = square_size(&img, &a.image)?;
    let g = geometry(&cfg.geometry, &a.geometry, size)?;
    let y = forward_project(&img, &g)?;
    let out = cfg.output(&a.out)?;
    io::save_sinogram(&out, &y)?;
    println!(
        "wrote {}x{} sinogram to {}",
        y.n_angles(),
        y.n_detectors(),
        out.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Image>, Failure> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading dataset directory {}", dir.display()))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.with_context(|| dir.display().to_string())?.path();
        if path.extension().is_some_and(|e| e == "fct") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "no training images in {}",
            dir.display()
        )));
    }
    let images = paths
        .iter()
        .map(io::load_image)
        .collect::<flowct::Result<Vec<_>>>()?;
    let size = square_size(&images[0], &paths[0])?;
    if let Some((p, _)) = paths
        .iter()
        .zip(&images)
        .find(|(_, im)| im.width() != size || im.height() != size)
    {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{}: size differs from {}x{size}",
            p.display(),
            size
        )));
    }
    Ok(images)
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    loss: f64,
}

pub fn train(cfg: RunConfig, a: TrainArgs) -> CmdResult {
    let mut tc = cfg.train.clone();
    if let Some(v) = a.steps {
        tc.n_steps = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.hidden {
        tc.hidden = v;
    }
    if let Some(v) = a.embed_dim {
        tc.embed_dim = v;
    }
    tc.validate().map_err(invalid)?;

    let images = load_dataset(&a.data)?;
    tc.image_size = images[0].width();
    let out = cfg.output(&a.out)?;
    let state = io::state_path(&out);
    let log_path = match &a.loss_log {
        Some(p) => cfg.output(p)?,
        None => with_suffix(&out, ".loss.csv"),
    };

    let outcome = if a.resume {
        let mut model = io::load_model(&out)?;
        let opt = io::load_train_state(&state, &mut model)?;
        info!("resuming at step {}", opt.step);
        velocity::train_resume(model, opt, &images, &tc)?
    } else {
        velocity::train(&images, &tc)?
    };

    io::save_model(&out, &outcome.model)?;
    io::save_train_state(&state, &outcome.model, &outcome.optimizer)?;

    let first_step = outcome.optimizer.step - outcome.losses.len() as u64 + 1;
    let append = a.resume && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| log_path.display().to_string())?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(!append)
        .from_writer(file);
    for (k, &loss) in outcome.losses.iter().enumerate() {
        w.serialize(LossRow {
            step: first_step + k as u64,
            loss,
        })
        .context("writing loss log")?;
    }
    w.flush().with_context(|| log_path.display().to_string())?;

    match (outcome.losses.first(), outcome.losses.last()) {
        (Some(f), Some(l)) => println!(
            "trained {} steps on {} images (step {}), loss {f:.4} -> {l:.4}; model {}",
            outcome.losses.len(),
            images.len(),
            outcome.optimizer.step,
            out.display()
        ),
        _ => println!("no steps taken; model {}", out.display()),
    }
    Ok(())
}

fn sampler_config(base: &SamplerConfig, a: &SamplerArgs) -> Result<SamplerConfig, Failure> {
    let mut s = base.clone();
    if let Some(v) = a.steps {
        s.n_steps = v;
    }
    if let Some(v) = a.max_reuse {
        s.max_reuse = v;
    }
    if let Some(v) = a.eta {
        s.eta = v;
    }
    if let Some(v) = a.reuse_start {
        s.reuse_start = v;
    }
    if let Some(v) = a.cg_iters {
        s.dc.cg_iters = v;
    }
    if let Some(v) = a.lambda {
        s.dc.tikhonov_lambda = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.residual_mode {
        s.residual_mode = v.into();
    }
    s.validate().map_err(invalid)?;
    if !(s.eta.is_finite() && s.eta > 1.0) {
        return Err(usage(format!("eta must be > 1, got {}", s.eta)));
    }
    Ok(s)
}

/// A loaded velocity field with the image size it implies.
struct LoadedField {
    field: Box<dyn VelocityField>,
    size: usize,
}

fn side_of(pixels: usize, what: &str) -> Result<usize, Failure> {
    let n = (pixels as f64).sqrt().round() as usize;
    if n * n != pixels {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{what} has {pixels} pixels, not a square image"
        )));
    }
    Ok(n)
}

fn load_field(a: &FieldArgs) -> Result<Option<LoadedField>, Failure> {
    if let Some(p) = &a.model {
        let model = io::load_model(p)?;
        let size = side_of(model.image_pixels(), &p.display().to_string())?;
        return Ok(Some(LoadedField {
            field: Box::new(model),
            size,
        }));
    }
    if let Some(p) = &a.target {
        let img = io::load_image(p)?;
        let size = square_size(&img, p)?;
        return Ok(Some(LoadedField {
            field: Box::new(PointTargetField::new(img.into_values())),
            size,
        }));
    }
    Ok(None)
}

fn require_field(a: &FieldArgs) -> Result<LoadedField, Failure> {
    load_field(a)?.ok_or_else(|| usage("this method needs --model or --target"))
}

#[derive(Serialize)]
struct TraceRow {
    iter: usize,
    t: f64,
    was_reuse: bool,
    nfe: usize,
    residual_pre_dc: f64,
    residual_post_dc: f64,
    reuse_counter: usize,
}

fn trace_rows(trace: &SamplerTrace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .map(|r| TraceRow {
            iter: r.iter,
            t: r.t,
            was_reuse: r.was_reuse,
            nfe: r.nfe_increment,
            residual_pre_dc: r.residual_pre_dc,
            residual_post_dc: r.residual_post_dc,
            reuse_counter: r.reuse_counter,
        })
        .collect()
}

pub fn reconstruct(cfg: RunConfig, a: ReconstructArgs) -> CmdResult {
    let method: Method = a.method.into();
    let sampler = sampler_config(&cfg.sampler, &a.sampler)?;
    let y = io::load_sinogram(&a.sino)?;
    let field = match method {
        Method::Fbp => load_field(&a.field)?,
        _ => Some(require_field(&a.field)?),
    };
    // ceil(1.5 n) detectors invert to floor(d / 1.5)
    let size = a
        .size
        .or(field.as_ref().map(|f| f.size))
        .unwrap_or(2 * y.n_detectors() / 3);
    let g = make_geometry(y.n_angles(), y.n_detectors(), size).map_err(invalid)?;

    let (image, trace) = match (method, &field) {
        (Method::Fbp, _) => (fbp(&y, &g)?, None),
        (Method::Fmct, Some(f)) => {
            let r = fmct_reconstruct(&y, &g, f.field.as_ref(), &sampler)?;
            (r.image, Some(r.trace))
        }
        (Method::Efmct, Some(f)) => {
            let r = efmct_reconstruct(&y, &g, f.field.as_ref(), &sampler)?;
            (r.image, Some(r.trace))
        }
        _ => unreachable!("sampling methods require a field"),
    };

    let out = cfg.output(&a.out)?;
    io::save_image(&out, &image)?;
    if let Some(pgm) = &a.pgm {
        io::export_pgm(&image, cfg.output(pgm)?, (0.0, 1.0))?;
    }
    let mut summary = format!("{method}: residual {:.6e}", residual(&image, &y, &g)?);
    if let Some(trace) = &trace {
        let path = match &a.trace {
            Some(p) => cfg.output(p)?,
            None => with_suffix(&out, ".trace.csv"),
        };
        write_csv(&path, &trace_rows(trace))?;
        summary += &format!(
            ", NFE {}, {} reuse steps, {:.3} s",
            trace.nfe,
            trace.reuse_steps(),
            trace.wall_time.as_secs_f64()
        );
    }
    if let Some(tp) = &a.truth {
        let truth = io::load_image(tp)?;
        summary += &format!(
            ", PSNR {:.3} dB, SSIM {:.4}",
            analysis::psnr(&image, &truth, DATA_RANGE)?,
            analysis::ssim(&image, &truth, DATA_RANGE)?
        );
    }
    println!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct ScalingRow {
    dt: f64,
    error: f64,
}

fn verdict(rep: &ErrorScalingReport, range: (f64, f64), exact: bool) -> (bool, String) {
    match (rep.fitted_slope, &rep.degenerate) {
        (Some(s), _) if exact => (
            false,
            format!("slope {s:.4} fitted where the flow should be exact"),
        ),
        (Some(s), _) => (
            (range.0..=range.1).contains(&s),
            format!("slope {s:.4}, expected [{}, {}]", range.0, range.1),
        ),
        (None, Some(why)) if exact => (why == "zero error", format!("degenerate: {why}")),
        (None, why) => (
            false,
            format!("no slope: {}", why.as_deref().unwrap_or("fit failed")),
        ),
    }
}

pub fn verify_bounds(cfg: RunConfig, a: VerifyArgs) -> CmdResult {
    let b = &cfg.bounds;
    let kind = a.field.unwrap_or(b.field);
    let omega = a.omega.unwrap_or(b.omega);
    let global = a.global || b.global;
    let max_reuse = a.max_reuse.unwrap_or(b.max_reuse);
    if !omega.is_finite() || omega == 0.0 {
        return Err(usage("omega must be finite and nonzero"));
    }

    let x1 = [1.0, 0.0];
    let rotation = RotationField::new(omega);
    let target = PointTargetField::new(vec![0.25, -0.5]);
    let field: &dyn VelocityField = match kind {
        FieldChoice::Rotation => &rotation,
        FieldChoice::PointTarget => &target,
    };
    let exact_rotation = |x: &[f64]| rotation.exact_flow(x, 1.0, 0.0);
    let exact_target = |_: &[f64]| -> flowct::Result<Vec<f64>> { Ok(target.target().to_vec()) };
    let exact: &StateMap = match kind {
        FieldChoice::Rotation => &exact_rotation,
        FieldChoice::PointTarget => &exact_target,
    };

    let (rep, range, label) = if global {
        let rep = global_reuse_error(field, &x1, &b.ns, max_reuse, None, Reference::Exact(exact))
            .map_err(invalid)?;
        (rep, GLOBAL_SLOPE, format!("global (M = {max_reuse})"))
    } else {
        let rep = local_reuse_error(field, &x1, 1.0, &b.dts).map_err(invalid)?;
        (rep, LOCAL_SLOPE, "local".to_string())
    };

    if let Some(p) = &a.out {
        let rows: Vec<ScalingRow> = rep
            .dts
            .iter()
            .zip(&rep.errors)
            .map(|(&dt, &error)| ScalingRow { dt, error })
            .collect();
        write_csv(&cfg.output(p)?, &rows)?;
    }
    let (pass, detail) = verdict(&rep, range, kind == FieldChoice::PointTarget);
    println!("{label}: {detail}: {}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!(
            "{label} error order check failed"
        )))
    }
}

struct Case {
    truth: Image,
    y: flowct::Sinogram,
    g: Geometry,
}

fn load_cases(
    paths: &[PathBuf],
    cfg: &RunConfig,
    ga: &GeometryArgs,
    size: usize,
) -> Result<Vec<Case>, Failure> {
    paths
        .iter()
        .map(|p| {
            let truth = io::load_image(p)?;
            if square_size(&truth, p)? != size {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "{}: size does not match the {size}x{size} field",
                    p.display()
                )));
            }
            let g = geometry(&cfg.geometry, ga, size)?;
            let y = forward_project(&truth, &g)?;
            Ok(Case { truth, y, g })
        })
        .collect()
}

#[derive(Serialize)]
struct AblateRow {
    value: usize,
    psnr: f64,
    ssim: f64,
    nfe: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

pub fn ablate(cfg: RunConfig, a: AblateArgs) -> CmdResult {
    let axis = a
        .axis
        .or(cfg.ablate.axis)
        .ok_or_else(|| usage("--axis is required"))?;
    let values = a
        .values
        .clone()
        .unwrap_or_else(|| cfg.ablate.values.clone());
    if values.is_empty() {
        return Err(usage("--values must list at least one value"));
    }
    let base = sampler_config(&cfg.sampler, &a.sampler)?;
    let lf = require_field(&a.field)?;
    let cases = load_cases(&a.truth, &cfg, &a.geometry, lf.size)?;

    let jobs: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|i| (0..cases.len()).map(move |j| (i, j)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut s = base.clone();
            match axis {
                AblateAxis::ReuseStart => s.reuse_start = values[i],
                AblateAxis::MaxReuse => s.max_reuse = values[i],
            }
            let c = &cases[j];
            let r = efmct_reconstruct(&c.y, &c.g, lf.field.as_ref(), &s)?;
            Ok((
                analysis::psnr(&r.image, &c.truth, DATA_RANGE)?,
                analysis::ssim(&r.image, &c.truth, DATA_RANGE)?,
                r.trace.nfe as f64,
            ))
        })
        .collect::<flowct::Result<Vec<_>>>()?;

    let rows: Vec<AblateRow> = values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let block = &results[i * cases.len()..(i + 1) * cases.len()];
            AblateRow {
                value,
                psnr: mean(block.iter().map(|r| r.0)),
                ssim: mean(block.iter().map(|r| r.1)),
                nfe: mean(block.iter().map(|r| r.2)),
            }
        })
        .collect();
    let out = cfg.output(&a.out)?;
    write_csv(&out, &rows)?;
    for r in &rows {
        println!(
            "{} = {}: PSNR {:.3} dB, SSIM {:.4}, NFE {}",
            match axis {
                AblateAxis::ReuseStart => "reuse_start",
                AblateAxis::MaxReuse => "max_reuse",
            },
            r.value,
            r.psnr,
            r.ssim,
            r.nfe
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchCsvRow {
    method: String,
    psnr: f64,
    ssim: f64,
    data_fit: f64,
    nfe: f64,
    time_s: f64,
    time_std: Option<f64>,
}

pub fn benchmark(cfg: RunConfig, a: BenchmarkArgs) -> CmdResult {
    let methods: Vec<Method> = match &a.methods {
        Some(m) => m.iter().map(|&m| m.into()).collect(),
        None => cfg.benchmark.methods.clone(),
    };
    if methods.is_empty() {
        return Err(usage("--methods must list at least one method"));
    }
    let repetitions = a.repetitions.unwrap_or(cfg.benchmark.repetitions);
    if repetitions == 0 {
        return Err(usage("--repetitions must be at least 1"));
    }
    let sampler = sampler_config(&cfg.sampler, &a.sampler)?;
    let needs_field = methods.iter().any(|&m| m != Method::Fbp);
    let lf = match load_field(&a.field)? {
        Some(f) => f,
        None if needs_field => return Err(usage("sampling methods need --model or --target")),
        None => {
            // FBP only: any field will do, the size comes from the first truth
            let truth = io::load_image(&a.truth[0])?;
            let size = square_size(&truth, &a.truth[0])?;
            LoadedField {
                field: Box::new(PointTargetField::new(vec![0.0; size * size])),
                size,
            }
        }
    };
    let cases = load_cases(&a.truth, &cfg, &a.geometry, lf.size)?;
    let tasks: Vec<BenchTask> = methods
        .iter()
        .map(|&method| BenchTask {
            method,
            sampler: sampler.clone(),
        })
        .collect();

    // sequential on purpose: wall times are part of the output
    let per_case = cases
        .iter()
        .map(|c| {
            analysis::benchmark(
                &c.truth,
                &c.y,
                &c.g,
                lf.field.as_ref(),
                &tasks,
                repetitions,
                DATA_RANGE,
            )
        })
        .collect::<flowct::Result<Vec<_>>>()?;

    let rows: Vec<BenchCsvRow> = (0..tasks.len())
        .map(|k| {
            let col = || per_case.iter().map(move |rows| &rows[k]);
            let stds: Option<Vec<f64>> = col().map(|r| r.wall_time_std).collect();
            BenchCsvRow {
                method: tasks[k].method.to_string(),
                psnr: mean(col().map(|r| r.psnr)),
                ssim: mean(col().map(|r| r.ssim)),
                data_fit: mean(col().map(|r| r.residual)),
                nfe: mean(col().map(|r| r.nfe as f64)),
                time_s: mean(col().map(|r| r.wall_time_mean)),
                time_std: stds.map(|s| mean(s.into_iter())),
            }
        })
        .collect();
    let out = cfg.output(&a.out)?;
    write_csv(&out, &rows)?;
    for r in &rows {
        println!(
            "{:>5}: PSNR {:.3} dB, SSIM {:.4}, data fit {:.4e}, NFE {}, {:.3} s",
            r.method, r.psnr, r.ssim, r.data_fit, r.nfe, r.time_s
        );
    }
    Ok(())
}
