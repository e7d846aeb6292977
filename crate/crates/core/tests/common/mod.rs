#![allow(dead_code)]

use flowct::geometry::{forward_project, Geometry, Image};
use flowct::sampler::{ReconResult, SamplerConfig};

/// Dense system matrix probed column by column through the projector.
pub fn dense_matrix(g: &Geometry) -> Vec<Vec<f64>> {
    let n = g.image_size();
    let px = g.n_pixels();
    let mut a = vec![vec![0.0; px]; g.n_measurements()];
    for p in 0..px {
        let mut e = vec![0.0; px];
        e[p] = 1.0;
        let col = forward_project(&Image::from_vec(n, n, e).unwrap(), g).unwrap();
        for (row, v) in a.iter_mut().zip(col.values()) {
            row[p] = *v;
        }
    }
    a
}

/// Solves `A^T A z = A^T y` by Gaussian elimination with partial pivoting.
pub fn normal_equation_solve(a: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let px = a[0].len();
    let mut m = vec![vec![0.0; px]; px];
    let mut b = vec![0.0; px];
    for (row, &yi) in a.iter().zip(y) {
        for i in 0..px {
            if row[i] == 0.0 {
                continue;
            }
            b[i] += row[i] * yi;
            for j in 0..px {
                m[i][j] += row[i] * row[j];
            }
        }
    }
    for k in 0..px {
        let piv = (k..px)
            .max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))
            .unwrap();
        m.swap(k, piv);
        b.swap(k, piv);
        assert!(m[k][k].abs() > 1e-12, "singular system");
        let (upper, lower) = m.split_at_mut(k + 1);
        let pivot_row = &upper[k];
        for (off, row) in lower.iter_mut().enumerate() {
            let f = row[k] / pivot_row[k];
            for (r, p) in row[k..].iter_mut().zip(&pivot_row[k..]) {
                *r -= f * p;
            }
            b[k + 1 + off] -= f * b[k];
        }
    }
    let mut x = vec![0.0; px];
    for k in (0..px).rev() {
        let s: f64 = (k + 1..px).map(|j| m[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / m[k][k];
    }
    x
}

/// Every way an EFMCT result breaks the sampler contract.
pub fn efmct_violations(res: &ReconResult, cfg: &SamplerConfig) -> Vec<String> {
    let mut bad = Vec::new();
    let n = cfg.n_steps;
    let trace = &res.trace;
    if trace.records.len() != n {
        bad.push(format!("{} records for {n} steps", trace.records.len()));
    }
    let floor = n.div_ceil(cfg.max_reuse + 1);
    if trace.nfe < floor || trace.nfe > n {
        bad.push(format!("nfe {} outside [{floor}, {n}]", trace.nfe));
    }
    let counted: usize = trace.records.iter().map(|r| r.nfe_increment).sum();
    if counted != trace.nfe {
        bad.push(format!("nfe {} but {counted} fresh records", trace.nfe));
    }
    for (i, rec) in trace.records.iter().enumerate() {
        let t = 1.0 - i as f64 / n as f64;
        if rec.iter != i + 1 || (rec.t - t).abs() > 1e-12 {
            bad.push(format!("record {i} at iter {} t {}", rec.iter, rec.t));
        }
        if rec.was_reuse {
            if i == 0 {
                bad.push("reuse on the first iteration".into());
                continue;
            }
            let prev = trace.records[i - 1].stored_residual;
            if rec.residual_pre_dc.is_nan() || rec.residual_pre_dc > cfg.eta * prev {
                bad.push(format!(
                    "iter {}: accepted {} > eta * {prev}",
                    rec.iter, rec.residual_pre_dc
                ));
            }
            if rec.reuse_counter == 0 || rec.reuse_counter > cfg.max_reuse {
                bad.push(format!(
                    "iter {}: reuse counter {}",
                    rec.iter, rec.reuse_counter
                ));
            }
            if rec.iter - 1 < cfg.reuse_start {
                bad.push(format!("iter {}: reuse before reuse_start", rec.iter));
            }
        }
    }
    if let Some(last) = trace.records.last() {
        if (last.t - 1.0 / n as f64).abs() > 1e-12 {
            bad.push(format!("final step starts at {}", last.t));
        }
    }
    if !res.image.is_finite() {
        bad.push("non-finite image".into());
    }
    bad
}
