use super::*;
use crate::efficacy::{AdherenceProfile, EfficacyInputs, Ic50Trajectory};
use crate::ode::observed_log10_vl;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TRUE: [f64; 6] = [0.767, -0.977, -4.086, 0.433, 1.040, -2.615];

fn full_inputs(w: CovariatePair, rate: f64) -> EfficacyInputs {
    let knots = vec![0.0, 14.0, 28.0, 56.0, 84.0, 112.0];
    let rates = vec![rate, 0.6 * rate, rate, 0.4 * rate, rate];
    let profile = AdherenceProfile::new(knots, rates).unwrap();
    let ic50 = Ic50Trajectory { s0: 8.0e5, sf: 3.2e6, tf: Some(70.0) };
    EfficacyInputs::new(profile.clone(), profile, ic50, ic50, w).unwrap()
}

fn synthetic_subject(id: &str, theta: [f64; 6], w: CovariatePair, noise_sd: f64, seed: u64) -> Subject {
    let times = vec![0.0, 7.0, 14.0, 28.0, 42.0, 56.0, 84.0, 112.0];
    let mut s = Subject { id: id.into(), times, log10_vl: Vec::new(), efficacy: EfficacyModel::Full(full_inputs(w, 0.9)) };
    let f = predict_subject(&SubjectParams::from_array(theta), &s, &IntegratorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd.max(1e-300)).unwrap();
    s.log10_vl = f.iter().map(|v| v + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 }).collect();
    s
}

fn cohort(n: usize, seed: u64) -> ObservationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 0.2).unwrap();
    let subjects = (0..n)
        .map(|i| {
            let w = CovariatePair { w1: z.sample(&mut rng) * 5.0, w2: z.sample(&mut rng) * 5.0 };
            let theta: [f64; 6] = std::array::from_fn(|k| TRUE[k] + z.sample(&mut rng));
            synthetic_subject(&format!("s{i}"), theta, w, 0.3, seed + i as u64)
        })
        .collect();
    ObservationSet { subjects }
}

fn mc_check(samples: &[f64], expected_mean: f64, label: &str) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!((mean - expected_mean).abs() < 3.0 * se, "{label}: mean {mean} vs {expected_mean} (se {se})");
}

#[test]
fn individual_mean_examples() {
    let mu = Vec8::from([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    assert_eq!(individual_mean(&mu, CovariatePair::default()), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let eta = Hyperpriors::default().eta;
    let m = individual_mean(&eta, CovariatePair { w1: 1.0, w2: 0.0 });
    assert!((m[5] - 1.5).abs() < 1e-15);
    let mut no_cov = mu;
    no_cov[6] = 0.0;
    no_cov[7] = 0.0;
    for w in [CovariatePair { w1: 3.0, w2: -2.0 }, CovariatePair { w1: -0.1, w2: 9.0 }] {
        assert_eq!(individual_mean(&no_cov, w)[5], 6.0);
        let direct = design_matrix(w) * mu;
        let m = individual_mean(&mu, w);
        for k in 0..6 {
            assert!((direct[k] - m[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn likelihood_examples() {
    let theta = SubjectParams::from_array(TRUE);
    let mut s = synthetic_subject("a", TRUE, CovariatePair::default(), 0.0, 1);
    s.times.truncate(4);
    s.log10_vl.truncate(4);
    let ll = log_likelihood_subject(&theta, &s, 1.0, &IntegratorConfig::default()).unwrap();
    assert!((ll - 4.0 * (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-9);
    assert!((ll + 3.6758).abs() < 1e-4);

    let one = Subject {
        id: "b".into(),
        times: vec![0.0],
        log10_vl: vec![observed_log10_vl(&theta, theta.r0() - 1.0).unwrap() + 1.0],
        efficacy: EfficacyModel::Control,
    };
    let ll = log_likelihood_subject(&theta, &one, 1.0, &IntegratorConfig::default()).unwrap();
    assert!((ll - (-0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5)).abs() < 1e-12);
}

#[test]
fn likelihood_matches_high_accuracy_solve() {
    let s = synthetic_subject("a", TRUE, CovariatePair { w1: 0.5, w2: -1.0 }, 0.4, 3);
    let theta = SubjectParams::from_array([0.9, -1.1, -3.9, 0.5, 1.1, -2.4]);
    let default = log_likelihood_subject(&theta, &s, 2.0, &IntegratorConfig::default()).unwrap();
    let reference = log_likelihood_subject(&theta, &s, 2.0, &IntegratorConfig::with_tolerances(1e-11, 1e-14)).unwrap();
    assert!((default - reference).abs() < 1e-4, "{default} vs {reference}");
}

#[test]
fn failed_integration_is_reported_not_panicked() {
    let s = synthetic_subject("a", TRUE, CovariatePair::default(), 0.0, 1);
    let mut bad = TRUE;
    bad[4] = -0.5; // R < 1
    assert!(log_likelihood_subject(&SubjectParams::from_array(bad), &s, 1.0, &IntegratorConfig::default()).is_err());
}

#[test]
fn sigma_conditional_examples() {
    let h = Hyperpriors::default();
    assert_eq!(sigma_conditional(0.0, 0, &h), (4.5, 9.0));
    assert_eq!(sigma_conditional(0.0, 10, &h), (9.5, 9.0));
    assert_eq!(sigma_conditional(3.0, 10, &h), (9.5, 10.5));
}

#[test]
fn sigma_conditional_matches_grid_posterior() {
    // prior Ga(4.5, 9) times N(0, 1/τ) likelihood of 10 zero residuals
    let h = Hyperpriors::default();
    let (shape, rate) = sigma_conditional(0.0, 10, &h);
    let dx = 1e-4;
    let (mut z, mut m1) = (0.0, 0.0);
    for i in 1..200_000 {
        let tau = i as f64 * dx;
        let dens = ((h.a - 1.0) * tau.ln() - h.b * tau + 5.0 * tau.ln()).exp();
        z += dens;
        m1 += tau * dens;
    }
    assert!((m1 / z - shape / rate).abs() < 1e-6);
    assert!((shape / rate - 9.5 / 9.0).abs() < 1e-15);
}

#[test]
fn gibbs_sigma_moments() {
    let h = Hyperpriors::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let prior: Vec<f64> = (0..100_000).map(|_| gibbs_sigma(0.0, 0, &h, &mut rng)).collect();
    mc_check(&prior, 0.5, "prior");
    let post: Vec<f64> = (0..100_000).map(|_| gibbs_sigma(0.0, 10, &h, &mut rng)).collect();
    mc_check(&post, 9.5 / 9.0, "posterior");
}

#[test]
fn gibbs_mu_without_subjects_is_the_prior() {
    let h = Hyperpriors::default();
    let c = mu_conditional(&[], &[], &Mat6::identity(), &h).unwrap();
    assert!((c.mean - h.eta).norm() < 1e-12);
    assert!((c.covariance() - h.lambda).norm() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<Vec8> = (0..100_000).map(|_| c.sample(&mut rng)).collect();
    for k in 0..8 {
        let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        mc_check(&xs, h.eta[k], "prior mu");
    }
}

#[test]
fn gibbs_mu_vague_limit() {
    let mut h = Hyperpriors::default();
    h.lambda = Mat8::from_diagonal_element(1e12);
    let theta = [0.3, -0.7, -4.0, 0.2, 1.3, -2.0];
    let sigma_inv = Mat6::from_diagonal_element(25.0);
    let c = mu_conditional(&[theta], &[CovariatePair::default()], &sigma_inv, &h).unwrap();
    for k in 0..6 {
        assert!((c.mean[k] - theta[k]).abs() < 1e-6);
    }
    assert!((c.mean[6] - h.eta[6]).abs() < 1e-6 && (c.mean[7] - h.eta[7]).abs() < 1e-6);
}

#[test]
fn gibbs_mu_matches_linear_gaussian_algebra() {
    // two subjects; compare against the stacked-regression posterior computed
    // from scratch with dense linear algebra
    let h = Hyperpriors::default();
    let thetas = [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.7, -0.1, 0.0, 0.2, 1.0, -1.0]];
    let covs = [CovariatePair { w1: 0.5, w2: -1.0 }, CovariatePair { w1: -0.5, w2: 1.0 }];
    let sigma = Mat6::from_fn(|r, c| if r == c { 0.05 } else { 0.01 });
    let sigma_inv = sigma.try_inverse().unwrap();
    let c = mu_conditional(&thetas, &covs, &sigma_inv, &h).unwrap();

    let mut x = nalgebra::DMatrix::<f64>::zeros(20, 8);
    let mut y = nalgebra::DVector::<f64>::zeros(20);
    let mut noise = nalgebra::DMatrix::<f64>::zeros(20, 20);
    for (i, (t, w)) in thetas.iter().zip(&covs).enumerate() {
        let d = design_matrix(*w);
        for r in 0..6 {
            y[6 * i + r] = t[r];
            for k in 0..8 {
                x[(6 * i + r, k)] = d[(r, k)];
            }
            for s in 0..6 {
                noise[(6 * i + r, 6 * i + s)] = sigma[(r, s)];
            }
        }
    }
    for k in 0..8 {
        x[(12 + k, k)] = 1.0;
        y[12 + k] = h.eta[k];
        noise[(12 + k, 12 + k)] = h.lambda[(k, k)];
    }
    let ni = noise.try_inverse().unwrap();
    let post_cov = (x.transpose() * &ni * &x).try_inverse().unwrap();
    let post_mean = &post_cov * x.transpose() * &ni * y;
    for k in 0..8 {
        assert!((post_mean[k] - c.mean[k]).abs() < 1e-9);
        for l in 0..8 {
            assert!((post_cov[(k, l)] - c.covariance()[(k, l)]).abs() < 1e-9);
        }
    }
}

#[test]
fn gibbs_mu_concentrates_near_generating_value() {
    let h = Hyperpriors::default();
    let mu_true = Vec8::from([0.767, -0.977, -4.086, 0.433, 1.040, -2.615, -0.670, 0.719]);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = Normal::new(0.0, 1.0).unwrap();
    let sd = 0.2;
    let covs: Vec<CovariatePair> =
        (0..50).map(|_| CovariatePair { w1: z.sample(&mut rng), w2: z.sample(&mut rng) }).collect();
    let thetas: Vec<[f64; 6]> = covs
        .iter()
        .map(|&w| {
            let m = individual_mean(&mu_true, w);
            std::array::from_fn(|k| m[k] + sd * z.sample(&mut rng))
        })
        .collect();
    let sigma_inv = Mat6::from_diagonal_element(1.0 / (sd * sd));
    let c = mu_conditional(&thetas, &covs, &sigma_inv, &h).unwrap();
    let cov = c.covariance();
    for k in 0..8 {
        assert!((c.mean[k] - mu_true[k]).abs() < 3.0 * cov[(k, k)].sqrt(), "coordinate {k}");
    }
}

#[test]
fn big_sigma_conditional_examples() {
    let h = Hyperpriors::default();
    let (df, scale) = big_sigma_conditional(&[], &[], &h.eta, &h).unwrap();
    assert_eq!(df, 10.0);
    assert!((df * scale - 10.0 * h.omega).norm() < 1e-12);

    let thetas: Vec<[f64; 6]> = (0..31).map(|_| individual_mean(&h.eta, CovariatePair::default())).collect();
    let covs = vec![CovariatePair::default(); 31];
    let (df, scale) = big_sigma_conditional(&thetas, &covs, &h.eta, &h).unwrap();
    assert_eq!(df, 41.0);
    assert!((scale - h.omega).norm() < 1e-12);
}

#[test]
fn wishart_moments() {
    let h = Hyperpriors::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let draws: Vec<Mat6> = (0..n).map(|_| sample_wishart(41.0, &h.omega, &mut rng).unwrap()).collect();
    let expected = 41.0 * h.omega;
    for (r, c) in [(0, 0), (3, 3), (5, 5), (0, 1), (2, 4)] {
        let xs: Vec<f64> = draws.iter().map(|d| d[(r, c)]).collect();
        mc_check(&xs, expected[(r, c)], "wishart");
    }
    // 1×1 Wishart is a scaled χ²: variance 2·df·s²
    let s = nalgebra::Matrix1::new(0.7);
    let xs: Vec<f64> = (0..n).map(|_| sample_wishart(5.0, &s, &mut rng).unwrap()[(0, 0)]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    assert!((mean - 3.5).abs() < 3.0 * (2.0 * 5.0 * 0.49 / n as f64).sqrt());
    assert!((var / (2.0 * 5.0 * 0.49) - 1.0).abs() < 0.03);
}

#[test]
fn big_sigma_draws_are_positive_definite() {
    let h = Hyperpriors::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let thetas = [[3.0, -2.0, 0.0, 1.0, 4.0, -5.0], [0.1, 0.1, 0.1, 0.1, 0.1, 0.1]];
    let covs = [CovariatePair { w1: 1.0, w2: 2.0 }, CovariatePair::default()];
    for _ in 0..2000 {
        let (sigma, prec) = gibbs_big_sigma(&thetas, &covs, &h.eta, &h, &mut rng).unwrap();
        assert!(sigma.cholesky().is_some() && prec.cholesky().is_some());
        assert_eq!(sigma, sigma.transpose());
        assert!((sigma * prec - Mat6::identity()).norm() < 1e-8);
    }
}

#[test]
fn zero_scale_walk_is_constant() {
    let s = synthetic_subject("a", TRUE, CovariatePair::default(), 0.2, 2);
    let cfg = IntegratorConfig::default();
    let mut state = SubjectState::new(SubjectParams::from_array(TRUE), &s, &cfg).unwrap();
    let start = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sigma_inv = Mat6::from_diagonal_element(25.0);
    for _ in 0..50 {
        assert!(mh_update_subject(&mut state, &s, &TRUE, &sigma_inv, 4.0, &Mat6::zeros(), &cfg, &mut rng));
    }
    assert_eq!(state, start);
}

#[test]
fn mh_rejects_proposals_that_fail_to_integrate() {
    let s = synthetic_subject("a", TRUE, CovariatePair::default(), 0.2, 2);
    let cfg = IntegratorConfig::default();
    let mut theta = TRUE;
    theta[4] = 0.01; // R barely above 1: most proposals land below
    let mut state = SubjectState::new(SubjectParams::from_array(theta), &s, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scale = Mat6::from_diagonal(&Vec6::from([0.0, 0.0, 0.0, 0.0, 5.0, 0.0]));
    for _ in 0..200 {
        mh_update_subject(&mut state, &s, &theta, &Mat6::identity(), 1.0, &scale, &cfg, &mut rng);
        assert!(state.theta.r0() > 1.0 && state.ssr.is_finite());
    }
}

#[test]
fn mh_slice_matches_grid_target() {
    // cheap surrogate: two observations over three days, walk only in log c
    let base = [0.767, -0.977, -4.086, 0.433, 1.040, 0.0];
    let mut s = Subject { id: "x".into(), times: vec![0.0, 1.0, 3.0], log10_vl: vec![], efficacy: EfficacyModel::Control };
    let cfg = IntegratorConfig::default();
    s.log10_vl = predict_subject(&SubjectParams::from_array(base), &s, &cfg).unwrap();
    s.log10_vl[2] += 0.15;
    let prior_mean = base;
    let sigma_inv = Mat6::from_diagonal_element(4.0);
    let tau = 40.0;

    let log_target = |x: f64| {
        let mut th = base;
        th[0] = x;
        let p = SubjectParams::from_array(th);
        log_likelihood_subject(&p, &s, tau, &cfg).unwrap() - 0.5 * mh::prior_quad(&th, &prior_mean, &sigma_inv)
    };
    let (lo, hi, bins) = (base[0] - 3.0, base[0] + 3.0, 40);
    let width = (hi - lo) / bins as f64;
    let fine = 20;
    let mut grid = vec![0.0; bins];
    let peak = log_target(base[0]);
    for (b, g) in grid.iter_mut().enumerate() {
        for j in 0..fine {
            let x = lo + width * (b as f64 + (j as f64 + 0.5) / fine as f64);
            *g += (log_target(x) - peak).exp();
        }
    }
    let total: f64 = grid.iter().sum();
    grid.iter_mut().for_each(|g| *g /= total);

    let mut state = SubjectState::new(SubjectParams::from_array(base), &s, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let scale = Mat6::from_diagonal(&Vec6::from([0.3, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let mut hist = vec![0.0; bins];
    let n = 100_000;
    let mut inside = 0.0;
    for _ in 0..n {
        mh_update_subject(&mut state, &s, &prior_mean, &sigma_inv, tau, &scale, &cfg, &mut rng);
        let x = state.theta.log_c;
        if x >= lo && x < hi {
            hist[((x - lo) / width) as usize] += 1.0;
            inside += 1.0;
        }
    }
    assert!(inside / n as f64 > 0.999);
    let tv: f64 = 0.5 * hist.iter().zip(&grid).map(|(h, g)| (h / inside - g).abs()).sum::<f64>();
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn adapter_learns_correlated_gaussian() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut adapter = ScaleAdapter::<2>::new(0.01);
    // sd 1 and 10 with correlation 0.9
    let cov = nalgebra::Matrix2::new(1.0, 9.0, 9.0, 100.0);
    let prec = cov.try_inverse().unwrap();
    let logp = |x: &nalgebra::Vector2<f64>| -0.5 * (x.transpose() * prec * x)[(0, 0)];
    let mut x = nalgebra::Vector2::zeros();
    let step = |adapter: &ScaleAdapter<2>, x: &mut nalgebra::Vector2<f64>, rng: &mut ChaCha8Rng| {
        let y = *x + adapter.draw(rng);
        let u: f64 = rng.random();
        let acc = u.ln() < logp(&y) - logp(x);
        if acc {
            *x = y;
        }
        acc
    };
    for i in 0..40_000 {
        let acc = step(&adapter, &mut x, &mut rng);
        adapter.record(&[x[0], x[1]], acc);
        if (i + 1) % 100 == 0 {
            adapter.end_window();
        }
    }
    let frozen = adapter.clone();
    let mut acc = 0;
    for _ in 0..20_000 {
        acc += usize::from(step(&adapter, &mut x, &mut rng));
    }
    assert_eq!(frozen, adapter);
    let rate = acc as f64 / 20_000.0;
    assert!((0.15..0.45).contains(&rate), "acceptance {rate}");
    let f = adapter.factor();
    let learned = f * f.transpose();
    let corr = learned[(0, 1)] / (learned[(0, 0)] * learned[(1, 1)]).sqrt();
    assert!((corr - 0.9).abs() < 0.1, "correlation {corr}");
    let s = adapter.scale();
    assert!(s[1] / s[0] > 6.0 && s[1] / s[0] < 15.0, "shape should follow the target: {s:?}");
}

fn tiny_config(seed: u64) -> McmcConfig {
    McmcConfig { burn_in: 60, keep_every: 2, n_kept: 25, seed, adapt_window: 10, ..McmcConfig::default() }
}

#[test]
fn chain_is_deterministic_and_thread_independent() {
    let obs = cohort(4, 1);
    let h = Hyperpriors::default();
    let cfg = tiny_config(42);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_chain(&obs, &h, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), 25);
    assert_eq!(a.deviance_trace.len(), 25);
    let c = run_chain(&obs, &h, &tiny_config(43)).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn chain_output_invariants() {
    let obs = cohort(3, 2);
    let out = run_chain(&obs, &Hyperpriors::default(), &tiny_config(7)).unwrap();
    assert!(out.acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(out.recentre_acceptance.is_some_and(|a| (0.0..=1.0).contains(&a)));
    for s in &out.samples {
        assert!(s.sigma_inv_sq > 0.0);
        assert!(Mat6::from_fn(|r, c| s.big_sigma[r][c]).cholesky().is_some());
        assert_eq!(s.thetas.len(), 3);
    }
    // the stored deviance equals a fresh recomputation
    let fresh = crate::dic::recompute_trace(&out, &obs).unwrap();
    for (a, b) in out.deviance_trace.iter().zip(&fresh) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
}

#[test]
fn chain_rejects_bad_inputs() {
    let obs = cohort(2, 3);
    let mut h = Hyperpriors::default();
    h.nu = 4.0;
    assert!(matches!(run_chain(&obs, &h, &tiny_config(1)), Err(SamplerError::Hyper(_))));
    let cfg = McmcConfig { keep_every: 0, ..tiny_config(1) };
    assert!(matches!(run_chain(&obs, &Hyperpriors::default(), &cfg), Err(SamplerError::Config(_))));
    let mut bad = obs.clone();
    bad.subjects[0].times[1] = 1e4;
    assert!(matches!(run_chain(&bad, &Hyperpriors::default(), &tiny_config(1)), Err(SamplerError::Data(_))));
}
