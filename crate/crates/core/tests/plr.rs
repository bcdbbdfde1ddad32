use approx::assert_relative_eq;
use plrtest::plr::{adaptive_lambda_spectrum, tail_p, two_sided_p, Spectrum};
use plrtest::simulate::trial_seed;
use plrtest::*;

fn cfg() -> KernelConfig {
    KernelConfig::default()
}

fn closed_form_lambda(g: f64, n: f64) -> f64 {
    let s = n.sqrt();
    let a = n.powf(1.5);
    (-g * s + (g * g * n + 4.0 * g * a).sqrt()) / (2.0 * a)
}

fn mapped(spec: &SettingSpec, seed: u64) -> Dataset {
    let (x, z) = generate(spec, seed).unwrap();
    Dataset::new(map_domain(&x, MapMode::Rank).unwrap(), z).unwrap()
}

#[test]
fn constant_spectrum_sums() {
    let (g, n, lambda) = (0.7, 40usize, 3e-3);
    let s = Spectrum::from_values(vec![g; n], 1e-10);
    let p = s.null_params(lambda, n, RhoMode::Inverse).unwrap();
    let t = g / (g + n as f64 * lambda);
    assert_relative_eq!(p.theta_hat, n as f64 * t, max_relative = 1e-13);
    assert_relative_eq!(p.sigma_hat * p.sigma_hat, n as f64 * t * t, max_relative = 1e-13);
}

#[test]
fn theta_limits() {
    let s = Spectrum::from_values(vec![3.0, 1.0, 0.2, 1e-12, 0.0], 1e-10);
    assert!(s.null_params(1e12, 5, RhoMode::Inverse).unwrap().theta_hat < 1e-6);
    let tiny = s.null_params(1e-16, 5, RhoMode::Inverse).unwrap().theta_hat;
    assert!((tiny - 3.0).abs() < 1e-9);
}

#[test]
fn zero_spectrum_is_degenerate() {
    let s = Spectrum::from_values(vec![0.0; 6], 1e-10);
    assert!(matches!(
        s.null_params(1e-3, 6, RhoMode::Inverse),
        Err(PlrError::DegenerateCalibration(_))
    ));
    assert!(matches!(
        adaptive_lambda_spectrum(&s, 6, RhoMode::Inverse),
        Err(PlrError::Bracket { .. })
    ));
}

#[test]
fn adaptive_matches_quadratic_root() {
    for (g, n) in [(0.5, 50usize), (2.0, 400), (1e-3, 1000)] {
        let s = Spectrum::from_values(vec![g; n], 1e-10);
        let l = adaptive_lambda_spectrum(&s, n, RhoMode::Inverse).unwrap();
        assert_relative_eq!(l, closed_form_lambda(g, n as f64), max_relative = 1e-6);
        let sigma = s.null_params(l, n, RhoMode::Inverse).unwrap().sigma_hat;
        assert!(l < sigma / n as f64 + 1e-8);
    }
}

#[test]
fn adaptive_grows_with_spectrum_scale() {
    let base = [5.0, 2.0, 1.0, 0.4, 0.1, 0.02];
    let mut prev = 0.0;
    for scale in [0.1, 1.0, 10.0, 100.0] {
        let s = Spectrum::from_values(base.iter().map(|v| v * scale).collect(), 1e-10);
        let l = adaptive_lambda_spectrum(&s, 60, RhoMode::Inverse).unwrap();
        assert!(l > prev);
        prev = l;
    }
}

#[test]
fn centre_of_null_law() {
    assert_eq!(two_sided_p(0.0), 1.0);
    assert_relative_eq!(two_sided_p(1.959963984540054), 0.05, max_relative = 1e-9);
}

#[test]
fn permutation_tail_formula() {
    assert_eq!(tail_p(199, 199), 1.0);
    assert_relative_eq!(tail_p(0, 199), 1.0 / 200.0);
}

#[test]
fn separation_rate_examples() {
    assert_relative_eq!(separation_rate(1024, 2, 1), (-(4.0 / 9.0) * 1024f64.ln()).exp(), max_relative = 1e-12);
    assert_eq!(separation_rate(1, 3, 2), 1.0);
    assert!(separation_rate(2000, 2, 1) < separation_rate(1000, 2, 1));
}

#[test]
fn null_plr_is_small_and_nonnegative() {
    let spec = SettingSpec { id: 1, delta: 0.0, n_per_group: 50 };
    let c = cfg();
    let grid = joint_grid(c.resolution).unwrap();
    for k in 0..5 {
        let data = mapped(&spec, 100 + k);
        let lambda = plrtest::plr::adaptive_lambda(&build_grams(&data, &c).unwrap().q_interaction, data.len(), &c).unwrap();
        let fits = plr_statistic(&data, lambda, &c, &grid).unwrap();
        let theta = null_params(&build_grams(&data, &c).unwrap().q_interaction, lambda, data.len(), RhoMode::Inverse, &c)
            .unwrap()
            .theta_hat;
        assert!(fits.plr >= -1e-8);
        assert!(fits.plr <= 10.0 * theta / data.len() as f64, "plr {} theta {theta}", fits.plr);
    }
}

#[test]
fn duplicated_sample_gives_same_fit() {
    let spec = SettingSpec { id: 1, delta: 0.3, n_per_group: 20 };
    let data = mapped(&spec, 9);
    let twice = Dataset::new(
        data.x().iter().chain(data.x()).copied().collect(),
        data.z().iter().chain(data.z()).copied().collect(),
    )
    .unwrap();
    let c = cfg();
    let grid = joint_grid(c.resolution).unwrap();
    let a = plr_statistic(&data, 1e-3, &c, &grid).unwrap();
    let b = plr_statistic(&twice, 1e-3, &c, &grid).unwrap();
    assert!(b.plr >= -1e-8);
    assert!((a.plr - b.plr).abs() < 1e-7, "{} vs {}", a.plr, b.plr);
    for x in [0.1, 0.37, 0.5, 0.82] {
        for z in [0, 1] {
            let da = eval_density(&a.full, x, z).unwrap();
            let db = eval_density(&b.full, x, z).unwrap();
            assert!((da - db).abs() < 1e-6 * da, "{da} vs {db}");
        }
    }
}

#[test]
fn test_is_deterministic_and_consistent() {
    let spec = SettingSpec { id: 1, delta: 0.0, n_per_group: 40 };
    let data = mapped(&spec, 3);
    let opts = TestOptions::default();
    let a = test(&data, &opts, &cfg()).unwrap();
    let b = test(&data, &opts, &cfg()).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.p_value));
    assert_eq!(a.reject, a.p_value <= a.alpha);
    assert_eq!(a.n_permutations, 0);
    let expect = (2.0 * a.n as f64 * a.plr - a.theta_hat) / (2f64.sqrt() * a.sigma_hat);
    assert_relative_eq!(a.z_score, expect, max_relative = 1e-12);
}

#[test]
fn permutation_mode_reports_replicates() {
    let spec = SettingSpec { id: 1, delta: 0.0, n_per_group: 30 };
    let data = mapped(&spec, 5);
    let opts = TestOptions {
        calibration: Calibration::Permutation,
        permutations: 39,
        seed: 11,
        ..Default::default()
    };
    let r = test(&data, &opts, &cfg()).unwrap();
    assert_eq!(r.n_permutations, 39);
    assert!(r.p_value >= 1.0 / 40.0 && r.p_value <= 1.0);
    let p = permutation_calibrate(&data, r.lambda, 39, 11, &cfg()).unwrap();
    assert_eq!(p, r.p_value);
    assert!(permutation_calibrate(&data, r.lambda, 10, 11, &cfg()).is_err());
}

#[test]
fn permutation_calibration_in_both_centerings() {
    let spec = SettingSpec { id: 2, delta: 1.0, n_per_group: 25 };
    let data = mapped(&spec, 21);
    let emp = KernelConfig { centering: Centering::Empirical, ..cfg() };
    let p_ref = permutation_calibrate(&data, 1e-3, 49, 4, &cfg()).unwrap();
    let p_emp = permutation_calibrate(&data, 1e-3, 49, 4, &emp).unwrap();
    assert!((0.0..=1.0).contains(&p_ref) && (0.0..=1.0).contains(&p_emp));
}

#[test]
fn split_test_is_seeded() {
    let spec = SettingSpec { id: 1, delta: 0.0, n_per_group: 40 };
    let (x, z) = generate(&spec, 77).unwrap();
    let opts = TestOptions { seed: 5, ..Default::default() };
    let a = split_test(&x, &z, &opts, MapMode::Rank, &cfg()).unwrap();
    let b = split_test(&x, &z, &opts, MapMode::Rank, &cfg()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.split_seed, Some(5));
    assert_eq!(a.n, 40);
    assert!(split_test(&x[..6], &z[..6], &opts, MapMode::Rank, &cfg()).is_err());
}

#[test]
fn split_permutation_p_values_roughly_uniform_under_null() {
    let spec = SettingSpec { id: 1, delta: 0.0, n_per_group: 60 };
    let mut ps: Vec<f64> = (0..200)
        .map(|k| {
            let (x, z) = generate(&spec, trial_seed(1, &spec, k)).unwrap();
            let opts = TestOptions {
                seed: k as u64,
                calibration: Calibration::Permutation,
                permutations: 99,
                ..Default::default()
            };
            split_test(&x, &z, &opts, MapMode::Rank, &cfg()).unwrap().p_value
        })
        .collect();
    ps.sort_by(f64::total_cmp);
    let n = ps.len() as f64;
    let d = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| ((i + 1) as f64 / n - p).max(p - i as f64 / n))
        .fold(0.0, f64::max);
    assert!(d < 0.1, "Kolmogorov distance {d}");
}

#[test]
fn single_group_is_rejected() {
    let data = Dataset::new(vec![0.1, 0.4, 0.6, 0.9], vec![0; 4]).unwrap();
    let err = test(&data, &TestOptions::default(), &cfg()).unwrap_err();
    assert_eq!(err.to_string(), "single group");
}
