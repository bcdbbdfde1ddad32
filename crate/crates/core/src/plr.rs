//! The penalized likelihood ratio statistic and its calibration.

use crate::data::{map_domain, Dataset, MapMode};
use crate::error::{PlrError, Result};
use crate::estimator::{self, FittedDensity, ModelKind};
use crate::kernels::{Centering, KernelBasis, KernelConfig, KernelPart, XKernel};
use crate::linalg;
use crate::quadrature::{joint_grid, QuadGrid};
use crate::rng;
use faer::Mat;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const LAMBDA_LO: f64 = 1e-12;
const LAMBDA_HI: f64 = 1e3;
const LAMBDA_RTOL: f64 = 1e-10;
const SPLIT_RETRIES: usize = 20;
const MAX_FAILED_FRACTION: f64 = 0.05;

/// How sample eigenvalues enter the null moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoMode {
    /// Effective-dimension traces `Σ γ/(γ + nλ)`.
    #[default]
    Inverse,
    /// Eigenvalues plugged in directly: `Σ 1/(1 + λγ)`.
    Literal,
}

impl std::str::FromStr for RhoMode {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(Self::Inverse),
            "literal" => Ok(Self::Literal),
            other => Err(PlrError::Config(format!("unknown rho mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for RhoMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Inverse => "inverse",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    #[default]
    Asymptotic,
    Permutation,
}

impl std::fmt::Display for Calibration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Asymptotic => "asymptotic",
            Self::Permutation => "permutation",
        })
    }
}

impl std::str::FromStr for Calibration {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asymptotic" => Ok(Self::Asymptotic),
            "permutation" => Ok(Self::Permutation),
            other => Err(PlrError::Config(format!("unknown calibration '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaChoice {
    /// Root of `σ̂_λ / n = λ`.
    #[default]
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for LambdaChoice {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Self::Fixed(v)),
            _ => Err(PlrError::Config(format!("lambda must be 'auto' or a positive number, got '{s}'"))),
        }
    }
}

/// Eigenvalues of the interaction gram, nonincreasing and clipped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eig_floor: f64,
}

impl Spectrum {
    pub fn from_values(mut values: Vec<f64>, eig_floor: f64) -> Self {
        for v in &mut values {
            *v = v.max(0.0);
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Self {
            eigenvalues: values,
            eig_floor,
        }
    }

    pub fn from_matrix(q_interaction: &Mat<f64>, eig_floor: f64) -> Result<Self> {
        Ok(Self::from_values(linalg::sym_eigenvalues(q_interaction)?, eig_floor))
    }

    /// Number of eigenvalues above the floor.
    pub fn rank(&self) -> usize {
        self.eigenvalues.iter().filter(|&&g| g > self.eig_floor).count()
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// `(θ̂_λ, σ̂_λ)` without the degeneracy check.
    pub fn moments(&self, lambda: f64, n: usize, mode: RhoMode) -> (f64, f64) {
        let nl = n as f64 * lambda;
        let (mut theta, mut s2) = (0.0, 0.0);
        match mode {
            RhoMode::Inverse => {
                for &g in self.eigenvalues.iter().filter(|&&g| g > self.eig_floor) {
                    let t = g / (g + nl);
                    theta += t;
                    s2 += t * t;
                }
            }
            RhoMode::Literal => {
                for &g in self.eigenvalues.iter().take(n) {
                    let t = 1.0 / (1.0 + lambda * g);
                    theta += t;
                    s2 += t * t;
                }
            }
        }
        (theta, s2.sqrt())
    }

    pub fn null_params(&self, lambda: f64, n: usize, mode: RhoMode) -> Result<NullParams> {
        if self.rank() == 0 {
            return Err(PlrError::DegenerateCalibration(
                "interaction spectrum is zero; use permutation calibration".into(),
            ));
        }
        let (theta_hat, sigma_hat) = self.moments(lambda, n, mode);
        Ok(NullParams {
            theta_hat,
            sigma_hat,
            rho_mode: mode,
            spectrum: self.eigenvalues.clone(),
        })
    }
}

/// Plug-in centre and scale of the null law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullParams {
    pub theta_hat: f64,
    pub sigma_hat: f64,
    pub rho_mode: RhoMode,
    pub spectrum: Vec<f64>,
}

pub fn null_params(
    q_interaction: &Mat<f64>,
    lambda: f64,
    n: usize,
    mode: RhoMode,
    cfg: &KernelConfig,
) -> Result<NullParams> {
    Spectrum::from_matrix(q_interaction, cfg.eig_floor)?.null_params(lambda, n, mode)
}

/// Root of `σ̂_λ/n − λ` on `[1e-12, 1e3]` by geometric bisection.
pub fn adaptive_lambda_spectrum(spectrum: &Spectrum, n: usize, mode: RhoMode) -> Result<f64> {
    let f = |l: f64| spectrum.moments(l, n, mode).1 / n as f64 - l;
    let (f_lo, f_hi) = (f(LAMBDA_LO), f(LAMBDA_HI));
    if spectrum.rank() == 0 || f_lo < 0.0 || f_hi > 0.0 {
        return Err(PlrError::Bracket {
            f_lo,
            f_hi,
            max_eig: spectrum.max(),
            rank: spectrum.rank(),
        });
    }
    let (mut lo, mut hi) = (LAMBDA_LO, LAMBDA_HI);
    while hi - lo > LAMBDA_RTOL * lo {
        let mid = (lo * hi).sqrt();
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn adaptive_lambda(q_interaction: &Mat<f64>, n: usize, cfg: &KernelConfig) -> Result<f64> {
    adaptive_lambda_spectrum(&Spectrum::from_matrix(q_interaction, cfg.eig_floor)?, n, RhoMode::Inverse)
}

/// `n^(−2m/(4m+d))`.
pub fn separation_rate(n: u64, m: u32, d: u32) -> f64 {
    (n as f64).powf(-2.0 * m as f64 / (4.0 * m as f64 + d as f64))
}

/// Outcome of one test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlrResult {
    pub plr: f64,
    pub lambda: f64,
    pub theta_hat: f64,
    pub sigma_hat: f64,
    pub z_score: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub calibration: Calibration,
    pub n_permutations: usize,
    pub rho_mode: RhoMode,
    pub n: usize,
    pub n0: usize,
    pub n1: usize,
    /// Set when asymptotic calibration was requested but the spectrum was degenerate.
    pub warning: Option<String>,
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub alpha: f64,
    pub lambda: LambdaChoice,
    pub calibration: Calibration,
    pub permutations: usize,
    pub seed: u64,
    pub rho_mode: RhoMode,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            lambda: LambdaChoice::Auto,
            calibration: Calibration::Asymptotic,
            permutations: 199,
            seed: 0,
            rho_mode: RhoMode::Inverse,
        }
    }
}

/// Statistic together with both fits.
#[derive(Debug, Clone)]
pub struct PlrFits {
    pub plr: f64,
    pub full: FittedDensity,
    pub reduced: FittedDensity,
}

/// `ℓ(η̂⁰) − ℓ(η̂)` at a common `λ`, grid and gram set.
pub fn plr_statistic(data: &Dataset, lambda: f64, cfg: &KernelConfig, grid: &QuadGrid) -> Result<PlrFits> {
    data.require_two_groups()?;
    cfg.validate()?;
    let basis = Arc::new(KernelBasis::new(data, cfg)?);
    let full = estimator::solve_model(&basis, ModelKind::Full, grid, lambda)?;
    let reduced = estimator::solve_model(&basis, ModelKind::Reduced, grid, lambda)?;
    let plr = reduced.objective - full.objective;
    let qf = Arc::new(basis.gram(KernelPart::Full));
    let qr = Arc::new(basis.gram(KernelPart::Reduced));
    Ok(PlrFits {
        plr,
        full: estimator::assemble(full, basis.clone(), qf, ModelKind::Full, data, grid, lambda),
        reduced: estimator::assemble(reduced, basis, qr, ModelKind::Reduced, data, grid, lambda),
    })
}

/// Interaction spectrum of a labelled sample.
pub(crate) fn interaction_spectrum(basis: &KernelBasis, cfg: &KernelConfig) -> Result<Spectrum> {
    match cfg.centering {
        Centering::Reference => reference_spectrum(&basis.xk, cfg),
        Centering::Empirical => Spectrum::from_matrix(&basis.gram(KernelPart::Interaction), cfg.eig_floor),
    }
}

/// Under reference centering `K1Z = ½ s sᵀ` with `s = ±1`, so the interaction
/// gram is `D (½ K1X) D` and shares the spectrum of `½ K1X`.
pub(crate) fn reference_spectrum(xk: &XKernel, cfg: &KernelConfig) -> Result<Spectrum> {
    let n = xk.len();
    let half = Mat::from_fn(n, n, |i, j| 0.5 * (xk.qx[(i, j)] - 1.0));
    Spectrum::from_matrix(&half, cfg.eig_floor)
}

/// Label-free work shared by every test on the same mapped `x`.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub xk: Arc<XKernel>,
    pub spectrum: Option<Arc<Spectrum>>,
}

impl Prepared {
    pub fn new(x: &[f64], cfg: &KernelConfig) -> Result<Self> {
        let xk = Arc::new(XKernel::new(x, cfg));
        let spectrum = match cfg.centering {
            Centering::Reference => Some(Arc::new(reference_spectrum(&xk, cfg)?)),
            Centering::Empirical => None,
        };
        Ok(Self { xk, spectrum })
    }
}

/// Asymptotic or permutation test at a fixed or adaptive `λ`.
pub fn test(data: &Dataset, opts: &TestOptions, cfg: &KernelConfig) -> Result<PlrResult> {
    data.require_two_groups()?;
    cfg.validate()?;
    let prepared = Prepared::new(data.x(), cfg)?;
    test_prepared(&prepared, data, opts, cfg)
}

pub(crate) fn test_prepared(prep: &Prepared, data: &Dataset, opts: &TestOptions, cfg: &KernelConfig) -> Result<PlrResult> {
    data.require_two_groups()?;
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(PlrError::Config(format!("alpha = {} not in (0, 1)", opts.alpha)));
    }
    let n = data.len();
    let basis = KernelBasis::with_x(prep.xk.clone(), data.z().to_vec(), data.omega_hat())?;
    let spectrum = match &prep.spectrum {
        Some(s) => s.clone(),
        None => Arc::new(interaction_spectrum(&basis, cfg)?),
    };
    let lambda = match opts.lambda {
        LambdaChoice::Fixed(l) => l,
        LambdaChoice::Auto => adaptive_lambda_spectrum(&spectrum, n, opts.rho_mode)?,
    };
    let grid = joint_grid(cfg.resolution)?;
    let full = estimator::solve_full(&basis.xk, &basis.z, &grid, lambda)?;
    let reduced = estimator::solve_reduced(&basis, &grid, lambda)?;
    let plr = reduced.objective - full.objective;

    let null = spectrum.null_params(lambda, n, opts.rho_mode);
    let mut warning = None;
    let mut calibration = opts.calibration;
    if let (Err(e), Calibration::Asymptotic) = (&null, calibration) {
        warning = Some(format!("{e}; fell back to permutation calibration"));
        calibration = Calibration::Permutation;
    }
    let (theta_hat, sigma_hat) = null.as_ref().map(|p| (p.theta_hat, p.sigma_hat)).unwrap_or((0.0, 0.0));
    let z_score = if sigma_hat > 0.0 {
        (2.0 * n as f64 * plr - theta_hat) / (std::f64::consts::SQRT_2 * sigma_hat)
    } else {
        0.0
    };
    let (p_value, n_permutations) = match calibration {
        Calibration::Asymptotic => (two_sided_p(z_score), 0),
        Calibration::Permutation => {
            let reuse = (cfg.centering == Centering::Reference).then_some(reduced.objective);
            let out = permutation_core(&basis, &grid, lambda, opts.permutations, opts.seed, plr, reuse)?;
            (out.p_value, out.used)
        }
    };
    let [n0, n1] = data.counts();
    Ok(PlrResult {
        plr,
        lambda,
        theta_hat,
        sigma_hat,
        z_score,
        p_value,
        reject: p_value <= opts.alpha,
        alpha: opts.alpha,
        calibration,
        n_permutations,
        rho_mode: opts.rho_mode,
        n,
        n0,
        n1,
        warning,
        split_seed: None,
    })
}

/// `2(1 − Φ(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub(crate) struct PermutationOutcome {
    pub p_value: f64,
    pub used: usize,
}

fn permutation_core(
    basis: &KernelBasis,
    grid: &QuadGrid,
    lambda: f64,
    b: usize,
    seed: u64,
    plr_obs: f64,
    reduced_obj: Option<f64>,
) -> Result<PermutationOutcome> {
    if b < 19 {
        return Err(PlrError::Config(format!("need at least 19 permutations, got {b}")));
    }
    let stats: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut z = basis.z.clone();
            z.shuffle(&mut rng::stream(seed, i as u64));
            let full = estimator::solve_full(&basis.xk, &z, grid, lambda).ok()?;
            let red = match reduced_obj {
                Some(v) => v,
                None => {
                    let pb = KernelBasis::with_x(basis.xk.clone(), z, basis_omega_hat(basis)).ok()?;
                    estimator::solve_reduced(&pb, grid, lambda).ok()?.objective
                }
            };
            Some(red - full.objective)
        })
        .collect();
    let failed = stats.iter().filter(|s| s.is_none()).count();
    if failed as f64 > MAX_FAILED_FRACTION * b as f64 {
        return Err(PlrError::CalibrationUnreliable { failed, total: b });
    }
    let used = b - failed;
    let exceed = stats.iter().flatten().filter(|&&s| s >= plr_obs).count();
    Ok(PermutationOutcome {
        p_value: tail_p(exceed, used),
        used,
    })
}

/// `(1 + exceedances) / (B + 1)`.
pub fn tail_p(exceed: usize, b: usize) -> f64 {
    (1 + exceed) as f64 / (b + 1) as f64
}

fn basis_omega_hat(basis: &KernelBasis) -> [f64; 2] {
    let n1 = basis.z.iter().filter(|&&v| v == 1).count();
    let n = basis.z.len() as f64;
    [(basis.z.len() - n1) as f64 / n, n1 as f64 / n]
}

/// Permutation p-value of the statistic at fixed `λ`.
pub fn permutation_calibrate(data: &Dataset, lambda: f64, b: usize, seed: u64, cfg: &KernelConfig) -> Result<f64> {
    data.require_two_groups()?;
    cfg.validate()?;
    let basis = KernelBasis::new(data, cfg)?;
    let grid = joint_grid(cfg.resolution)?;
    let full = estimator::solve_full(&basis.xk, &basis.z, &grid, lambda)?;
    let reduced = estimator::solve_reduced(&basis, &grid, lambda)?;
    let plr = reduced.objective - full.objective;
    let reuse = (cfg.centering == Centering::Reference).then_some(reduced.objective);
    Ok(permutation_core(&basis, &grid, lambda, b, seed, plr, reuse)?.p_value)
}

/// Tunes `λ` on one half of a seeded split and tests on the other.
pub fn split_test(
    raw_x: &[f64],
    raw_z: &[u8],
    opts: &TestOptions,
    map: MapMode,
    cfg: &KernelConfig,
) -> Result<PlrResult> {
    let n = raw_x.len();
    if n != raw_z.len() {
        return Err(PlrError::Shape {
            expected: format!("{n} labels"),
            got: format!("{}", raw_z.len()),
        });
    }
    if n < 8 {
        return Err(PlrError::Domain(format!("split test needs n >= 8, got {n}")));
    }
    let h = n.div_ceil(2);
    for attempt in 0..SPLIT_RETRIES {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(opts.seed, attempt as u64));
        let (tune, rest) = idx.split_at(h);
        let two_groups = |s: &[usize]| s.iter().any(|&i| raw_z[i] == 0) && s.iter().any(|&i| raw_z[i] == 1);
        if !two_groups(tune) || !two_groups(rest) {
            continue;
        }
        let half = |s: &[usize]| -> Result<Dataset> {
            let x: Vec<f64> = s.iter().map(|&i| raw_x[i]).collect();
            Dataset::new(map_domain(&x, map)?, s.iter().map(|&i| raw_z[i]).collect())
        };
        let tune_data = half(tune)?;
        let tune_basis = KernelBasis::new(&tune_data, cfg)?;
        let lambda = adaptive_lambda_spectrum(&interaction_spectrum(&tune_basis, cfg)?, tune.len(), opts.rho_mode)?;
        let test_data = half(rest)?;
        let fixed = TestOptions {
            lambda: LambdaChoice::Fixed(lambda),
            ..*opts
        };
        let mut out = test(&test_data, &fixed, cfg)?;
        out.split_seed = Some(opts.seed);
        return Ok(out);
    }
    Err(PlrError::SplitDegenerate(SPLIT_RETRIES))
}
