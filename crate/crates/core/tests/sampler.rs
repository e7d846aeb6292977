mod common;

use flowct::consistency::DcConfig;
use flowct::geometry::{forward_project, make_geometry, norm, Geometry, Image, Sinogram};
use flowct::phantom::shepp_logan;
use flowct::rng;
use flowct::sampler::{
    efmct_reconstruct, fmct_reconstruct, prior_sample, ReconResult, ResidualMode, SamplerConfig,
};
use flowct::velocity::{ConstantField, NeuralVelocity, PointTargetField, VelocityField};
use proptest::prelude::*;

const N: usize = 8;

fn setup() -> (Geometry, Image, Sinogram) {
    let g = make_geometry(6, 12, N).unwrap();
    let truth = shepp_logan(N).unwrap();
    let y = forward_project(&truth, &g).unwrap();
    (g, truth, y)
}

fn same_run(a: &ReconResult, b: &ReconResult) -> bool {
    a.image == b.image && a.trace.records == b.trace.records && a.trace.nfe == b.trace.nfe
}

fn check_efmct(res: &ReconResult, cfg: &SamplerConfig) {
    let bad = common::efmct_violations(res, cfg);
    assert!(bad.is_empty(), "{bad:?}");
}

fn cfg(n_steps: usize, max_reuse: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_steps,
        max_reuse,
        seed,
        ..Default::default()
    }
}

#[test]
fn fmct_uses_every_step() {
    let (g, _, y) = setup();
    let net = NeuralVelocity::new(N * N, &[16], 8, 1).unwrap();
    let res = fmct_reconstruct(&y, &g, &net, &cfg(12, 10, 0)).unwrap();
    assert_eq!(res.trace.nfe, 12);
    assert!(res
        .trace
        .records
        .iter()
        .all(|r| !r.was_reuse && r.nfe_increment == 1));
}

#[test]
fn constant_field_accepts_every_reuse() {
    let (g, _, y) = setup();
    let field = ConstantField::new(vec![0.0; N * N]);
    for n in [1, 7, 20, 50] {
        for m in [0, 1, 3, 10] {
            let c = cfg(n, m, 3);
            let res = efmct_reconstruct(&y, &g, &field, &c).unwrap();
            assert_eq!(res.trace.nfe, n.div_ceil(m + 1), "n {n} m {m}");
            check_efmct(&res, &c);
        }
    }
}

#[test]
fn point_target_on_exact_path_accepts_every_reuse() {
    let (g, truth, y) = setup();
    let field = PointTargetField::new(truth.values().to_vec());
    let c = cfg(30, 4, 8);
    let res = efmct_reconstruct(&y, &g, &field, &c).unwrap();
    assert_eq!(res.trace.nfe, 6);
    check_efmct(&res, &c);
}

#[test]
fn dc_disabled_point_target_is_prior_sampling() {
    let (g, truth, y) = setup();
    let field = PointTargetField::new(truth.values().to_vec());
    let mut c = cfg(25, 0, 4);
    c.dc = DcConfig {
        cg_iters: 0,
        tikhonov_lambda: 0.0,
    };
    let res = fmct_reconstruct(&y, &g, &field, &c).unwrap();
    assert_eq!(res.image, prior_sample(&field, N, 25, 4).unwrap());
}

#[test]
fn single_step_prior_sample() {
    let field = NeuralVelocity::new(N * N, &[8], 4, 2).unwrap();
    let mut r = rng::stream(6, rng::streams::SAMPLER_INIT);
    let x1 = rng::standard_normal_vec(&mut r, N * N);
    let v = field.eval(&x1, 1.0).unwrap();
    let expected: Vec<f64> = x1.iter().zip(&v).map(|(a, b)| a - b).collect();
    assert_eq!(
        prior_sample(&field, N, 1, 6).unwrap().values(),
        expected.as_slice()
    );
}

#[test]
fn point_target_clamp_regime() {
    // N > 1/t_min, so the last steps hit the clamp
    let (g, truth, y) = setup();
    let c_vec = truth.values().to_vec();
    let field = PointTargetField::new(c_vec.clone());
    let res = fmct_reconstruct(&y, &g, &field, &cfg(1500, 0, 2)).unwrap();
    let mut r = rng::stream(2, rng::streams::SAMPLER_INIT);
    let x1 = rng::standard_normal_vec(&mut r, N * N);
    let start_gap: Vec<f64> = x1.iter().zip(&c_vec).map(|(a, b)| a - b).collect();
    let gap: Vec<f64> = res
        .image
        .values()
        .iter()
        .zip(&c_vec)
        .map(|(a, b)| a - b)
        .collect();
    assert!(norm(&gap) <= field.t_min() * norm(&start_gap) + 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn no_reuse_equals_fmct(seed in any::<u64>(), net_seed in 0u64..1000, n in 1usize..30) {
        let (g, _, y) = setup();
        let net = NeuralVelocity::new(N * N, &[16], 8, net_seed).unwrap();
        let fm = fmct_reconstruct(&y, &g, &net, &cfg(n, 0, seed)).unwrap();
        let ef = efmct_reconstruct(&y, &g, &net, &cfg(n, 0, seed)).unwrap();
        prop_assert!(same_run(&fm, &ef));
        let mut late = cfg(n, 10, seed);
        late.reuse_start = n + (seed % 3) as usize;
        let ef = efmct_reconstruct(&y, &g, &net, &late).unwrap();
        prop_assert!(same_run(&fm, &ef));
    }

    #[test]
    fn efmct_trace_invariants(
        seed in any::<u64>(),
        net_seed in 0u64..1000,
        n in 1usize..40,
        m in 0usize..12,
        eta in 1.0001f64..3.0,
        reuse_start in 0usize..5,
        pre_dc in any::<bool>(),
    ) {
        let (g, _, y) = setup();
        let net = NeuralVelocity::new(N * N, &[16], 8, net_seed).unwrap();
        let c = SamplerConfig {
            n_steps: n,
            max_reuse: m,
            eta,
            reuse_start,
            seed,
            residual_mode: if pre_dc { ResidualMode::PreDcOnly } else { ResidualMode::Algorithm1 },
            ..Default::default()
        };
        let res = efmct_reconstruct(&y, &g, &net, &c).unwrap();
        check_efmct(&res, &c);
        let again = efmct_reconstruct(&y, &g, &net, &c).unwrap();
        prop_assert!(same_run(&res, &again));
    }

    #[test]
    fn point_target_is_recovered(seed in any::<u64>(), n in 1usize..120) {
        let (g, truth, y) = setup();
        let c_vec = truth.values().to_vec();
        let field = PointTargetField::new(c_vec.clone());
        let res = fmct_reconstruct(&y, &g, &field, &cfg(n, 0, seed)).unwrap();
        let mut r = rng::stream(seed, rng::streams::SAMPLER_INIT);
        let x1 = rng::standard_normal_vec(&mut r, N * N);
        let start_gap: Vec<f64> = x1.iter().zip(&c_vec).map(|(a, b)| a - b).collect();
        let gap: Vec<f64> = res.image.values().iter().zip(&c_vec).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&gap) <= field.t_min() * norm(&start_gap) + 1e-8);
    }
}
