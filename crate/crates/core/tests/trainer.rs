use ba_grad::analysis::{fd_gradient, norm, rel_error};
use ba_grad::ba::BAConfig;
use ba_grad::scene::PatchGraph;
use ba_grad::synth::{generate_scene, init_estimates, SynthConfig};
use ba_grad::trainer::{
    correct_target_grad, inner_loop, predictor_backward, predictor_forward, tape_backward, train, Features, InnerOptions, Policy,
    Predictor, Strategy, TrainConfig, N_FEATURES,
};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_feats(n: usize, seed: u64) -> Vec<Features> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut f = [1.0; N_FEATURES];
            for x in f.iter_mut().take(6) {
                *x = rng.sample(StandardNormal);
            }
            f
        })
        .collect()
}

fn random_vecs(n: usize, seed: u64) -> Vec<Vector2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect()
}

#[test]
fn predictor_backward_matches_finite_differences() {
    for seed in 0..5 {
        let p = Predictor::random(6, 3.0, 1.0, seed);
        let f = random_feats(7, seed + 10);
        let (gd, gs) = (random_vecs(7, seed + 20), random_vecs(7, seed + 30));
        let analytic = predictor_backward(&p, &f, &gd, &gs);
        let fd = fd_gradient(
            |th| {
                let q = Predictor { theta: th.to_vec(), ..p.clone() };
                let (d, s) = predictor_forward(&q, &f);
                (0..7).map(|n| gd[n].dot(&d[n]) + gs[n].dot(&s[n])).sum()
            },
            &p.theta,
            1e-6,
        )
        .unwrap();
        let err = rel_error(&analytic, &fd, 1e-12);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn saturated_weights_pass_no_gradient_to_their_head() {
    let mut p = Predictor::random(4, 1.0, 1.0, 1);
    let bias = p.sigma_head().end - 2;
    p.theta[bias] = 60.0;
    p.theta[bias + 1] = -60.0;
    let f = random_feats(3, 2);
    let z = vec![Vector2::zeros(); 3];
    let g = predictor_backward(&p, &f, &z, &vec![Vector2::new(1.0, 1.0); 3]);
    assert!(norm(&g[p.sigma_head()]) < 1e-20);
}

#[test]
fn predictor_outputs_are_lipschitz_in_the_parameters() {
    let p = Predictor::random(16, 10.0, 1.0, 4);
    let f = random_feats(20, 5);
    let flat = |q: &Predictor| -> Vec<f64> {
        let (d, s) = predictor_forward(q, &f);
        d.iter().chain(&s).flat_map(|v| [v.x, v.y]).collect()
    };
    let base = flat(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dir: Vec<f64> = (0..p.theta.len()).map(|_| rng.sample(StandardNormal)).collect();
        for eps in [1e-1, 1e-3, 1e-5] {
            let q = Predictor {
                theta: p.theta.iter().zip(&dir).map(|(t, d)| t + eps * d).collect(),
                ..p.clone()
            };
            let change: f64 = flat(&q).iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(change / (eps * norm(&dir)));
        }
    }
    // a crude bound: scale * sqrt(edges) * (1 + max feature norm)
    assert!(worst < 10.0 * (20f64).sqrt() * 5.0, "{worst}");
}

/// Noiseless scene with ground-truth poses and random depths.
fn tiny_scene(n_frames: usize, seed: u64) -> PatchGraph {
    scene_with(n_frames, 3, seed)
}

fn scene_with(n_frames: usize, patches_per_frame: usize, seed: u64) -> PatchGraph {
    let cfg = SynthConfig {
        n_frames,
        patches_per_frame,
        radius: 2,
        sigma_in: 0.0,
        seed,
        ..Default::default()
    };
    let (gt, _) = generate_scene(&cfg).unwrap();
    let mut g = init_estimates(&gt, (2.0, 8.0), seed);
    for (f, t) in g.frames.iter_mut().zip(&gt.frames) {
        f.pose = t.gt_pose;
    }
    g
}

fn two_frames_three_patches(seed: u64) -> PatchGraph {
    let mut g = scene_with(2, 2, seed);
    let last = g.patches.len() - 1;
    g.patches.pop();
    g.edges.retain(|e| e.k != last);
    g.validate().unwrap();
    g
}

fn oracle_opts(n_iters: usize, strategy: Strategy) -> InnerOptions {
    let cfg = TrainConfig {
        strategy,
        inner_iters: n_iters,
        ba: BAConfig {
            n_fixed_poses: 2,
            lambda: 1e-9,
            ..BAConfig::converged()
        },
        k_skip: 1,
        ..Default::default()
    };
    InnerOptions::from_config(&cfg, 0.0)
}

fn end_to_end_error(scene: &PatchGraph, predictor: &Predictor, opts: &InnerOptions, cf: f64, cp: f64) -> f64 {
    let tape = inner_loop(scene, Policy::Net(predictor), opts).unwrap();
    let analytic = tape_backward(&tape, predictor, opts, cf, cp).unwrap();
    let fd = fd_gradient(
        |th| {
            let q = Predictor { theta: th.to_vec(), ..predictor.clone() };
            let l = inner_loop(scene, Policy::Net(&q), opts).unwrap().loss();
            cf * l.flow + cp * l.pose
        },
        &predictor.theta,
        1e-6,
    )
    .unwrap();
    assert!(norm(&fd) > 0.0);
    let err = rel_error(&analytic, &fd, 1e-12);
    eprintln!("end-to-end relative error {err:.2e}");
    err
}

#[test]
fn end_to_end_gradient_matches_finite_differences_two_frames() {
    for seed in 0..3 {
        let scene = two_frames_three_patches(seed);
        let p = Predictor::random(4, 1.0, 2e-3, 100 + seed);
        let opts = oracle_opts(3, Strategy::Unweighted);
        let err = end_to_end_error(&scene, &p, &opts, 1.0, 0.0);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences_with_a_free_pose() {
    for strategy in [Strategy::Unweighted, Strategy::Weighted] {
        let scene = tiny_scene(3, 7);
        let p = Predictor::random(4, 1.0, 5e-4, 8);
        let opts = oracle_opts(3, strategy);
        let err = end_to_end_error(&scene, &p, &opts, 1.0, 0.5);
        assert!(err < 1e-3, "{strategy:?}: {err}");
    }
}

#[test]
fn zero_parameters_feed_raw_targets_at_half_weight() {
    let scene = tiny_scene(4, 3);
    let p = Predictor::zeros(16, 10.0);
    let tape = inner_loop(&scene, Policy::Net(&p), &oracle_opts(3, Strategy::Unweighted)).unwrap();
    for st in &tape.steps {
        assert!(st.delta.iter().all(|d| *d == Vector2::zeros()));
        assert!(st.sigma.iter().all(|s| *s == Vector2::new(0.5, 0.5)));
        for (q, e) in st.targets.iter().zip(&scene.edges) {
            assert_eq!(*q, e.target);
        }
    }
}

#[test]
fn oracle_revisions_make_the_first_solve_exact() {
    for seed in 0..5 {
        let cfg = SynthConfig {
            n_frames: 5,
            patches_per_frame: 5,
            sigma_in: 1.0,
            outlier_frac: 0.2,
            seed,
            ..Default::default()
        };
        let (g, _) = generate_scene(&cfg).unwrap();
        let mut opts = oracle_opts(1, Strategy::Unweighted);
        opts.ba = BAConfig::default();
        let tape = inner_loop(&g, Policy::Oracle, &opts).unwrap();
        let worst = tape.steps[0].sol.residuals.iter().map(|r| r.norm()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "seed {seed}: {worst}");
    }
}

#[test]
fn loss_side_weights_carry_no_gradient() {
    let scene = tiny_scene(3, 11);
    let p = Predictor::random(4, 1.0, 0.1, 12);
    let mut opts = oracle_opts(1, Strategy::Weighted);
    opts.gamma_min = 0.0;
    opts.gamma_max = 0.0;
    let tape = inner_loop(&scene, Policy::Net(&p), &opts).unwrap();
    let g = tape_backward(&tape, &p, &opts, 1.0, 0.0).unwrap();
    assert!(g[p.sigma_head()].iter().all(|x| *x == 0.0));
    assert!(norm(&g[p.delta_head()]) > 0.0);
    // the weights do change the loss value, so a loss-side path would show up
    let mut q = p.clone();
    let b = q.sigma_head().end - 2;
    q.theta[b] += 1.0;
    let l0 = tape.loss().flow;
    let l1 = inner_loop(&scene, Policy::Net(&q), &opts).unwrap().loss().flow;
    assert!(l0 != l1);
}

#[test]
fn oracle_fit_gives_zero_gradient() {
    let cfg = SynthConfig {
        n_frames: 4,
        patches_per_frame: 4,
        sigma_in: 0.0,
        seed: 5,
        ..Default::default()
    };
    let (g, _) = generate_scene(&cfg).unwrap();
    let p = Predictor::zeros(8, 10.0);
    let mut opts = oracle_opts(2, Strategy::Unweighted);
    opts.ba = BAConfig::default();
    let tape = inner_loop(&g, Policy::Net(&p), &opts).unwrap();
    assert!(tape.loss().flow < 1e-9);
    let grad = tape_backward(&tape, &p, &opts, 10.0, 0.1).unwrap();
    assert!(norm(&grad) < 1e-6, "{}", norm(&grad));
}

#[test]
fn interpolation_at_zero_is_the_baseline() {
    let scene = tiny_scene(3, 13);
    let p = Predictor::random(4, 1.0, 0.05, 14);
    let base = oracle_opts(2, Strategy::Unweighted);
    let interp = oracle_opts(2, Strategy::GtInterp);
    let a = inner_loop(&scene, Policy::Net(&p), &base).unwrap();
    let b = inner_loop(&scene, Policy::Net(&p), &interp).unwrap();
    assert_eq!(a.loss(), b.loss());
    assert_eq!(
        tape_backward(&a, &p, &base, 1.0, 1.0).unwrap(),
        tape_backward(&b, &p, &interp, 1.0, 1.0).unwrap()
    );
}

#[test]
fn full_interpolation_blocks_the_target_path() {
    let scene = tiny_scene(3, 15);
    let p = Predictor::random(4, 1.0, 0.05, 16);
    let mut opts = oracle_opts(1, Strategy::GtInterp);
    opts.alpha = 1.0;
    let tape = inner_loop(&scene, Policy::Net(&p), &opts).unwrap();
    let g = tape_backward(&tape, &p, &opts, 1.0, 0.0).unwrap();
    assert!(g[p.delta_head()].iter().all(|x| *x == 0.0));
}

#[test]
fn grad_correct_keeps_aligned_gradients() {
    let gt = Vector2::new(10.0, 20.0);
    let q = Vector2::new(12.0, 17.0);
    // aligned with (q - gt) componentwise
    let aligned = Vector2::new(0.3, -0.7);
    assert_eq!(correct_target_grad(&aligned, &q, &gt), aligned);
    assert_eq!(correct_target_grad(&Vector2::new(-0.3, -0.7), &q, &gt), Vector2::new(0.0, -0.7));
    assert_eq!(correct_target_grad(&Vector2::new(-0.3, 0.7), &q, &gt), Vector2::zeros());
}

#[test]
fn zero_iterations_record_only_the_initial_validation() {
    let cfg = TrainConfig {
        iterations: 0,
        val_scenes: 2,
        ..Default::default()
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.curve.records.len(), 1);
    assert!(out.curve.records[0].val_flow_error.is_some());
}

fn quick(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        iterations: 3,
        batch_size: 2,
        val_every: 3,
        val_scenes: 2,
        beta_period: 2,
        scene: SynthConfig {
            n_frames: 5,
            patches_per_frame: 4,
            outlier_frac: 0.2,
            ..Default::default()
        },
        inner_iters: 3,
        ..Default::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    for s in Strategy::ALL {
        let a = train(&quick(s)).unwrap();
        let b = train(&quick(s)).unwrap();
        assert_eq!(a.predictor.theta, b.predictor.theta, "{s:?}");
        assert_eq!(a.curve, b.curve);
    }
}

#[test]
fn balance_refresh_equalizes_the_two_gradients() {
    use ba_grad::losses::balance_beta;
    use ba_grad::trainer::{make_scene, outer_step};
    let cfg = quick(Strategy::Weighted);
    let scenes: Vec<_> = (0..2).map(|s| make_scene(&cfg, s).unwrap()).collect();
    let p = Predictor::random(16, 10.0, 0.1, 3);
    let opts = InnerOptions::from_config(&cfg, 0.0);
    let st = outer_step(&scenes, &p, &opts, (1.0, 1.0), true).unwrap();
    let (gf, gp) = (st.grad_flow.unwrap(), st.grad_pose.unwrap());
    let beta = balance_beta(&gp, &gf).unwrap();
    let scaled: Vec<f64> = gf.iter().map(|x| beta * x).collect();
    assert!((norm(&scaled) / norm(&gp) - 1.0).abs() < 1e-10);
}

#[test]
fn streaming_schedule_grows_the_window() {
    let cfg = TrainConfig {
        streaming: true,
        inner_iters: 4,
        stream_init_frames: 8,
        per_frame_iters: 2,
        scene: SynthConfig {
            n_frames: 11,
            ..Default::default()
        },
        ..Default::default()
    };
    let s = cfg.schedule();
    assert_eq!(s, vec![8, 8, 8, 8, 9, 9, 10, 10, 11, 11]);
    let scene = ba_grad::trainer::make_scene(&cfg, 1).unwrap();
    let p = Predictor::random(16, 10.0, 0.1, 1);
    let opts = InnerOptions::from_config(&cfg, 0.0);
    let tape = inner_loop(&scene, Policy::Net(&p), &opts).unwrap();
    assert_eq!(tape.last().sol.poses.len(), 11);
    let g = tape_backward(&tape, &p, &opts, 1.0, 1.0).unwrap();
    assert!(g.iter().all(|x| x.is_finite()) && norm(&g) > 0.0);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = quick(Strategy::Heuristic);
    let s = toml::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_toml(&s).unwrap(), cfg);
    assert!(TrainConfig::from_toml("bogus = 1").is_err());
    assert!(TrainConfig::from_toml("beta_period = 0").is_err());
}
