use ba_grad::analysis::{fd_gradient, median, rel_error, toy_bias_experiment, toy_weight_grad, toy_wls_solve, ToyBiasConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closed form written out independently: d|f* - f_gt| / d s_i with
/// f* = sum(s f) / sum(s).
fn closed_form(fhat: &[f64], s: &[f64], f_gt: f64) -> Vec<f64> {
    let sum: f64 = s.iter().sum();
    let fs: f64 = fhat.iter().zip(s).map(|(f, w)| f * w).sum::<f64>() / sum;
    fhat.iter().map(|f| (fs - f_gt).signum() * (f - fs) / sum).collect()
}

#[test]
fn weight_grad_matches_closed_form_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(2..12);
        let fhat: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let f_gt = rng.random_range(-1.0..1.0);
        let g = toy_weight_grad(&fhat, &s, f_gt).unwrap();
        assert!(rel_error(&g, &closed_form(&fhat, &s, f_gt), 1e-15) < 1e-12);
        let fd = fd_gradient(|x| (toy_wls_solve(&fhat, x).unwrap() - f_gt).abs(), &s, 1e-6).unwrap();
        let err = rel_error(&g, &fd, 1e-12);
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn planted_high_weight_outlier_gets_a_positive_gradient() {
    let fhat = [0.1, -0.2, 0.05, 0.15, 25.0];
    let s = [0.5, 0.5, 0.5, 0.5, 0.9];
    let g = toy_weight_grad(&fhat, &s, 0.0).unwrap();
    assert!(g[4] > 0.0);
    // A gradient step lowers its weight and moves the estimate toward f_gt.
    let mut s2 = s;
    s2[4] -= 0.1 * g[4];
    assert!(toy_wls_solve(&fhat, &s2).unwrap().abs() < toy_wls_solve(&fhat, &s).unwrap().abs());
}

#[test]
fn unclipped_weights_shrink_more_than_clipped_ones() {
    let cfg = ToyBiasConfig::default();
    let runs = toy_bias_experiment(&cfg, &(0..10).collect::<Vec<_>>()).unwrap();
    let un: Vec<f64> = runs.iter().map(|r| r.unclipped.final_mean()).collect();
    let cl: Vec<f64> = runs.iter().map(|r| r.clipped.final_mean()).collect();
    let (mu, mc) = (median(&un).unwrap(), median(&cl).unwrap());
    assert!(mu < mc, "unclipped {mu}, clipped {mc}");
    assert!(mu < runs[0].unclipped.mean_weight[0]);
}

#[test]
fn outlier_free_draws_barely_move_clipped_weights() {
    let cfg = ToyBiasConfig {
        outlier_frac: 0.0,
        ..Default::default()
    };
    let runs = toy_bias_experiment(&cfg, &[0, 1, 2]).unwrap();
    for r in &runs {
        let start = r.clipped.mean_weight[0];
        assert!((r.clipped.final_mean() - start).abs() < 0.05);
    }
}
