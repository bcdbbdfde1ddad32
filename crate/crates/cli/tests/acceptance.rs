//! Acceptance criteria 1-11, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so criteria execute in order, one at a
//! time, with wall-clock budgets measured on an otherwise idle process.

use plrtest::baselines::{mmd_biased, score_statistic};
use plrtest::estimator::{gradient, hessian, objective};
use plrtest::plr::{adaptive_lambda_spectrum, Spectrum};
use plrtest::simulate::{run_cell, Method, TrialOutcome};
use plrtest::*;
use rand::Rng;
use std::process::Command;
use std::time::{Duration, Instant};

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn uniform_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = plrtest::rng::stream(seed, 0);
    loop {
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let z: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        let d = Dataset::new(x, z).unwrap();
        if d.require_two_groups().is_ok() {
            return d;
        }
    }
}

fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>, c: &Mat<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            worst = worst.max((a[(i, j)] + b[(i, j)] - c[(i, j)]).abs());
        }
    }
    worst
}

fn c1_kernel_algebra() -> Outcome {
    let cfg = KernelConfig::default();
    let mut rng = plrtest::rng::stream(SEED, 1);
    let (mut worst_sum, mut worst_eig) = (0.0f64, f64::INFINITY);
    for k in 0..100 {
        let n = rng.random_range(5..=200);
        let d = uniform_dataset(n, SEED ^ (k << 8));
        let g = build_grams(&d, &cfg).unwrap();
        worst_sum = worst_sum
            .max(max_abs_diff(&g.q0_x, &g.q1_x, &g.q_x))
            .max(max_abs_diff(&g.q0_z, &g.q1_z, &g.q_z))
            .max(max_abs_diff(&g.q_reduced, &g.q_interaction, &g.q_full));
        for v in g.min_eigenvalues().unwrap() {
            worst_eig = worst_eig.min(v);
        }
    }
    outcome(
        worst_sum <= 1e-12 && worst_eig >= -1e-8,
        format!("max identity residual {worst_sum:.2e}, min eigenvalue {worst_eig:.2e}"),
    )
}

fn c2_calculus() -> Outcome {
    let cfg = KernelConfig::default();
    let grid = joint_grid(cfg.resolution).unwrap();
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for n in [5usize, 10, 25] {
        let d = uniform_dataset(n, SEED + n as u64);
        let g = build_grams(&d, &cfg).unwrap();
        let mut rng = plrtest::rng::stream(SEED, 200 + n as u64);
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let lam = 0.05;
        let step = 1e-5;
        for model in [ModelKind::Full, ModelKind::Reduced] {
            let gr = gradient(&c, &d, &g, model, lam, &grid).unwrap();
            let h = hessian(&c, &d, &g, model, lam, &grid).unwrap();
            let gnorm = gr.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut hnorm = 0.0f64;
            for j in 0..n {
                for i in 0..n {
                    hnorm = hnorm.max(h[(i, j)].abs());
                }
            }
            let (mut eg, mut eh) = (0.0f64, 0.0f64);
            for k in 0..n {
                let mut cp = c.clone();
                let mut cm = c.clone();
                cp[k] += step;
                cm[k] -= step;
                let fd = (objective(&cp, &d, &g, model, lam, &grid).unwrap()
                    - objective(&cm, &d, &g, model, lam, &grid).unwrap())
                    / (2.0 * step);
                eg = eg.max((fd - gr[k]).abs());
                let gp = gradient(&cp, &d, &g, model, lam, &grid).unwrap();
                let gm = gradient(&cm, &d, &g, model, lam, &grid).unwrap();
                for i in 0..n {
                    eh = eh.max(((gp[i] - gm[i]) / (2.0 * step) - h[(i, k)]).abs());
                }
            }
            worst_g = worst_g.max(eg / gnorm);
            worst_h = worst_h.max(eh / hnorm);
        }
    }
    outcome(
        worst_g <= 1e-5 && worst_h <= 1e-4,
        format!("gradient rel. error {worst_g:.2e}, hessian rel. error {worst_h:.2e}"),
    )
}

fn c3_fit() -> Outcome {
    let cfg = KernelConfig::default();
    let grid = joint_grid(cfg.resolution).unwrap();
    let d = uniform_dataset(100, SEED + 3);
    let g = build_grams(&d, &cfg).unwrap();
    let lam = adaptive_lambda(&g.q_interaction, d.len(), &cfg).unwrap();
    let (mut sup, mut mass_err) = (0.0f64, 0.0f64);
    for model in [ModelKind::Full, ModelKind::Reduced] {
        let f = fit(&d, &g, model, lam, &grid, &cfg).unwrap();
        mass_err = mass_err.max((f.mass - 1.0).abs());
        for i in 0..=200 {
            for z in [0, 1] {
                sup = sup.max((eval_density(&f, i as f64 / 200.0, z).unwrap() - 0.5).abs());
            }
        }
    }
    let mut worst_nest = f64::NEG_INFINITY;
    for k in 0..20 {
        let d = uniform_dataset(20 + 4 * k as usize, SEED + 300 + k);
        for lam in [1e-4, 1e-3, 1e-2, 1e-1] {
            let fits = plr_statistic(&d, lam, &cfg, &grid).unwrap();
            worst_nest = worst_nest.max(fits.full.objective - fits.reduced.objective);
        }
    }
    outcome(
        sup < 0.15 && mass_err <= 1e-3 && worst_nest <= 1e-8,
        format!(
            "sup density error {sup:.4} at lambda {lam:.3e}, mass error {mass_err:.2e}, worst full-minus-reduced objective {worst_nest:.2e}"
        ),
    )
}

fn c4_mmd_score() -> Outcome {
    let cfg = KernelConfig::default();
    let mut rng = plrtest::rng::stream(SEED, 4);
    let (mut worst_bal, mut worst_unbal) = (0.0f64, 0.0f64);
    let (mut ratio_bal, mut ratio_unbal) = (0.0, 0.0);
    for k in 0..100 {
        let balanced = k % 2 == 0;
        let n0 = rng.random_range(5..=60);
        let n1 = if balanced { n0 } else { loop { let v = rng.random_range(5..=60); if v != n0 { break v; } } };
        let x: Vec<f64> = (0..n0 + n1).map(|_| rng.random::<f64>()).collect();
        let z: Vec<u8> = (0..n0 + n1).map(|i| (i >= n0) as u8).collect();
        let d = Dataset::new(x, z).unwrap();
        let s2 = score_statistic(&d, &cfg).unwrap();
        let mmd = mmd_biased(&d, &cfg).unwrap();
        let (a, b) = (n0 as f64, n1 as f64);
        if balanced {
            worst_bal = worst_bal.max((s2 - mmd).abs());
            ratio_bal = mmd / s2;
        } else {
            let scaled = 4.0 * a * b / ((a + b) * (a + b)) * s2;
            worst_unbal = worst_unbal.max((scaled - mmd).abs());
            ratio_unbal = mmd / scaled;
        }
    }
    outcome(
        worst_bal <= 1e-10 && worst_unbal <= 1e-10,
        format!(
            "balanced |S2 - MMD2| up to {worst_bal:.2e} (last MMD2/S2 = {ratio_bal:.6}), unbalanced residual up to {worst_unbal:.2e} (last ratio {ratio_unbal:.6})"
        ),
    )
}

fn rate(outcomes: &[TrialOutcome]) -> (f64, usize) {
    let done: Vec<bool> = outcomes.iter().filter_map(|o| o.reject).collect();
    let rej = done.iter().filter(|&&r| r).count();
    (rej as f64 / done.len().max(1) as f64, outcomes.len() - done.len())
}

fn experiment(methods: Vec<Method>, trials: usize) -> ExperimentConfig {
    ExperimentConfig {
        methods,
        trials,
        master_seed: SEED,
        permutations: 199,
        ..Default::default()
    }
}

fn c5_size() -> Outcome {
    let spec = SettingSpec { id: 1, delta: 0.0, n_per_group: 200 };
    let cfg = experiment(vec![Method::PlrPermutation, Method::PlrAsymptotic], 500);
    let cells = run_cell(&spec, &cfg).unwrap();
    let (perm, fp) = rate(&cells[0]);
    let (asym, fa) = rate(&cells[1]);
    outcome(
        (0.03..=0.07).contains(&perm) && (0.02..=0.09).contains(&asym),
        format!("permutation (B=199) size {perm:.3}, asymptotic size {asym:.3}, failed trials {fp}/{fa}"),
    )
}

fn c6_power_trend() -> Outcome {
    let cfg = experiment(vec![Method::PlrAsymptotic], 200);
    let rates: Vec<f64> = [125, 500, 1000]
        .iter()
        .map(|&n| {
            let spec = SettingSpec { id: 1, delta: 0.3, n_per_group: n };
            rate(&run_cell(&spec, &cfg).unwrap()[0]).0
        })
        .collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0] - 0.05);
    outcome(
        rates[2] >= 0.9 && monotone,
        format!("power at n = 125, 500, 1000: {:.3}, {:.3}, {:.3}", rates[0], rates[1], rates[2]),
    )
}

fn c7_shape() -> Outcome {
    let spec = SettingSpec { id: 6, delta: 0.45, n_per_group: 500 };
    let cfg = experiment(vec![Method::PlrAsymptotic, Method::MmdPerm], 200);
    let cells = run_cell(&spec, &cfg).unwrap();
    let (plr, _) = rate(&cells[0]);
    let (mmd, _) = rate(&cells[1]);
    outcome(
        plr - mmd >= 0.3,
        format!("PLR power {plr:.3}, MMD power {mmd:.3}, difference {:.3}", plr - mmd),
    )
}

fn c8_wilks() -> Outcome {
    let spec = SettingSpec { id: 1, delta: 0.0, n_per_group: 500 };
    let cfg = experiment(vec![Method::PlrAsymptotic], 500);
    let zs: Vec<f64> = run_cell(&spec, &cfg).unwrap()[0].iter().filter_map(|o| o.z_score).collect();
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let sd = (zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    outcome(
        (-0.3..=0.3).contains(&mean) && (0.7..=1.3).contains(&sd),
        format!("z-score mean {mean:.3}, sd {sd:.3} over {} trials", zs.len()),
    )
}

fn c9_adaptive() -> Outcome {
    let (mut worst_rel, mut worst_root) = (0.0f64, 0.0f64);
    for (g, n) in [(0.05, 100usize), (0.5, 400), (3.0, 1000), (20.0, 2000)] {
        let s = Spectrum::from_values(vec![g; n], 1e-10);
        let l = adaptive_lambda_spectrum(&s, n, RhoMode::Inverse).unwrap();
        let nf = n as f64;
        let exact = (-g * nf.sqrt() + (g * g * nf + 4.0 * g * nf.powf(1.5)).sqrt()) / (2.0 * nf.powf(1.5));
        worst_rel = worst_rel.max((l - exact).abs() / exact);
        let sigma = s.null_params(l, n, RhoMode::Inverse).unwrap().sigma_hat;
        worst_root = worst_root.max((l - sigma / nf).abs());
    }
    outcome(
        worst_rel <= 1e-6 && worst_root <= 1e-8,
        format!("rel. error vs closed form {worst_rel:.2e}, root residual {worst_root:.2e}"),
    )
}

fn c10_rate() -> Outcome {
    let got = separation_rate(1024, 2, 1);
    let want = (-(4.0 / 9.0) * (1024f64).ln()).exp();
    outcome((got - want).abs() <= 1e-12, format!("{got:.15} vs {want:.15}"))
}

fn c11_determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("plrtest-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let run = |name: &str| -> Vec<u8> {
        let out = dir.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_plrtest"))
            .args([
                "simulate", "--settings", "1,2", "--deltas", "0,0.5", "--sizes", "50,100", "--methods",
                "plr_asymptotic,mmd_perm,ks", "--trials", "20", "--seed", "1", "--out",
            ])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(&out).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    std::fs::remove_dir_all(&dir).ok();
    outcome(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 11] = [
        (1, "kernel algebra", Duration::from_secs(10), c1_kernel_algebra),
        (2, "calculus checks", Duration::from_secs(30), c2_calculus),
        (3, "fit correctness", Duration::from_secs(60), c3_fit),
        (4, "MMD/score equivalence", Duration::from_secs(10), c4_mmd_score),
        (5, "size", Duration::from_secs(30 * 60), c5_size),
        (6, "power trend", Duration::from_secs(20 * 60), c6_power_trend),
        (7, "shape adaptivity", Duration::from_secs(30 * 60), c7_shape),
        (8, "Wilks sanity", Duration::from_secs(30 * 60), c8_wilks),
        (9, "adaptive rule", Duration::from_secs(1), c9_adaptive),
        (10, "rate formula", Duration::from_secs(1), c10_rate),
        (11, "determinism", Duration::from_secs(120), c11_determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, budget, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let pass = out.pass && took <= budget;
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
