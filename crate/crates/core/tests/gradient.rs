use flowct::velocity::{cfm_grad, cfm_loss, NeuralVelocity};

fn check(model: &NeuralVelocity, batch: &[Vec<f64>], seed: u64) {
    let (_, grad) = cfm_grad(model, batch, seed).unwrap();
    let analytic = grad.to_flat();
    let base = model.params().to_flat();
    let h = 1e-5;
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..base.len() {
        let mut probe = model.clone();
        let mut p = base.clone();
        p[i] += h;
        probe.params_mut().assign_flat(&p).unwrap();
        let up = cfm_loss(&probe, batch, seed).unwrap().0;
        p[i] -= 2.0 * h;
        probe.params_mut().assign_flat(&p).unwrap();
        let down = cfm_loss(&probe, batch, seed).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-3 * scale);
        assert!(err < 1e-4, "param {i}: fd {fd} vs {}", analytic[i]);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let batch = vec![vec![0.2, 0.9], vec![0.7, 0.1], vec![0.5, 0.5]];
    for seed in 0..4 {
        let model = NeuralVelocity::new(2, &[4], 4, seed).unwrap();
        check(&model, &batch, seed + 10);
    }
}

#[test]
fn gradient_matches_with_two_hidden_layers() {
    let model = NeuralVelocity::new(3, &[5, 4], 6, 7).unwrap();
    let batch = vec![vec![0.1, 0.4, 0.8], vec![0.9, 0.3, 0.0]];
    check(&model, &batch, 3);
}
