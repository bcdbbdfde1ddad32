//! MMD, score and Kolmogorov–Smirnov two-sample baselines.

use crate::data::Dataset;
use crate::error::{PlrError, Result};
use crate::kernels::{KernelConfig, XKernel};
use crate::plr::tail_p;
use crate::rng;
use faer::Mat;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const KOLMOGOROV_TERMS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    MmdPerm,
    KsAsymptotic,
    KsPerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: BaselineMethod,
    pub n_permutations: usize,
}

/// Centred continuous gram `K1^X` at the sample points.
pub fn centered_gram(x: &[f64], cfg: &KernelConfig) -> Mat<f64> {
    let xk = XKernel::new(x, cfg);
    centered_from(&xk)
}

pub(crate) fn centered_from(xk: &XKernel) -> Mat<f64> {
    let n = xk.len();
    Mat::from_fn(n, n, |i, j| xk.qx[(i, j)] - xk.k0(xk.row_mean[i], j))
}

/// Biased MMD² from a precomputed centred gram.
pub fn mmd_from_gram(k1: &Mat<f64>, z: &[u8]) -> Result<f64> {
    let n1 = z.iter().filter(|&&v| v == 1).count();
    let n0 = z.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(PlrError::Domain("MMD needs both groups nonempty".into()));
    }
    let mut s = [[0.0f64; 2]; 2];
    for j in 0..z.len() {
        let col = k1.col_as_slice(j);
        let (mut a0, mut a1) = (0.0, 0.0);
        for (i, &v) in col.iter().enumerate() {
            if z[i] == 0 {
                a0 += v;
            } else {
                a1 += v;
            }
        }
        s[z[j] as usize][0] += a0;
        s[z[j] as usize][1] += a1;
    }
    let (n0, n1) = (n0 as f64, n1 as f64);
    Ok(s[0][0] / (n0 * n0) - 2.0 * s[0][1] / (n0 * n1) + s[1][1] / (n1 * n1))
}

/// `(1/n0²) Σ00 K1 − (2/(n0 n1)) Σ01 K1 + (1/n1²) Σ11 K1`, diagonal terms included.
pub fn mmd_biased(data: &Dataset, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    mmd_from_gram(&centered_gram(data.x(), cfg), data.z())
}

/// `(1/n²) Σ_ij K1^X(x_i, x_j) K1^Z(z_i, z_j)` with the observed proportions in `K1^Z`.
pub fn score_statistic(data: &Dataset, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    let k1 = centered_gram(data.x(), cfg);
    let (_, k1z) = crate::kernels::decompose_discrete(data.omega_hat())?;
    let z = data.z();
    let n = z.len();
    let mut total = 0.0;
    for j in 0..n {
        let col = k1.col_as_slice(j);
        for i in 0..n {
            total += col[i] * k1z[z[i] as usize][z[j] as usize];
        }
    }
    Ok(total / (n * n) as f64)
}

/// `sup_t |F0(t) − F1(t)|` for sorted samples.
pub fn ks_statistic(x0: &[f64], x1: &[f64]) -> Result<f64> {
    if x0.is_empty() || x1.is_empty() {
        return Err(PlrError::Domain("KS needs both samples nonempty".into()));
    }
    let (n0, n1) = (x0.len() as f64, x1.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < x0.len() && j < x1.len() {
        let t = x0[i].min(x1[j]);
        while i < x0.len() && x0[i] <= t {
            i += 1;
        }
        while j < x1.len() && x1[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n0 - j as f64 / n1).abs());
    }
    Ok(d)
}

/// Asymptotic Kolmogorov tail `2 Σ (−1)^(k−1) exp(−2k²t²)`.
pub fn kolmogorov_tail(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=KOLMOGOROV_TERMS {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * t * t).exp();
        s += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KsCalibration {
    Asymptotic,
    Permutation { b: usize, seed: u64 },
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn ks_of(data: &Dataset) -> f64 {
    ks_statistic(&sorted(data.group(0)), &sorted(data.group(1))).unwrap_or(0.0)
}

pub fn ks_test(data: &Dataset, calibration: KsCalibration) -> Result<BaselineResult> {
    data.require_two_groups()?;
    let d = ks_statistic(&sorted(data.group(0)), &sorted(data.group(1)))?;
    match calibration {
        KsCalibration::Asymptotic => {
            let [n0, n1] = data.counts();
            let ne = (n0 * n1) as f64 / (n0 + n1) as f64;
            Ok(BaselineResult {
                statistic: d,
                p_value: kolmogorov_tail(ne.sqrt() * d),
                method: BaselineMethod::KsAsymptotic,
                n_permutations: 0,
            })
        }
        KsCalibration::Permutation { b, seed } => Ok(BaselineResult {
            statistic: d,
            p_value: baseline_permutation(data, ks_of, b, seed)?,
            method: BaselineMethod::KsPerm,
            n_permutations: b,
        }),
    }
}

/// Permutation p-value `(1 + #{s_b ≥ s_obs}) / (B + 1)` of an arbitrary statistic.
pub fn baseline_permutation<F>(data: &Dataset, statistic: F, b: usize, seed: u64) -> Result<f64>
where
    F: Fn(&Dataset) -> f64 + Sync,
{
    if b < 19 {
        return Err(PlrError::Config(format!("need at least 19 permutations, got {b}")));
    }
    let obs = statistic(data);
    let stats: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut z = data.z().to_vec();
            z.shuffle(&mut rng::stream(seed, i as u64));
            let s = statistic(&data.with_labels(z).ok()?);
            s.is_finite().then_some(s)
        })
        .collect();
    let failed = stats.iter().filter(|s| s.is_none()).count();
    if failed as f64 > 0.05 * b as f64 {
        return Err(PlrError::CalibrationUnreliable { failed, total: b });
    }
    let exceed = stats.iter().flatten().filter(|&&s| s >= obs).count();
    Ok(tail_p(exceed, b - failed))
}

/// MMD with a permutation p-value; the centred gram is computed once.
pub fn mmd_test(data: &Dataset, b: usize, seed: u64, cfg: &KernelConfig) -> Result<BaselineResult> {
    data.require_two_groups()?;
    cfg.validate()?;
    let k1 = centered_gram(data.x(), cfg);
    mmd_test_gram(&k1, data, b, seed)
}

pub(crate) fn mmd_test_gram(k1: &Mat<f64>, data: &Dataset, b: usize, seed: u64) -> Result<BaselineResult> {
    let statistic = mmd_from_gram(k1, data.z())?;
    let p_value = baseline_permutation(data, |d| mmd_from_gram(k1, d.z()).unwrap_or(f64::NAN), b, seed)?;
    Ok(BaselineResult {
        statistic,
        p_value,
        method: BaselineMethod::MmdPerm,
        n_permutations: b,
    })
}
