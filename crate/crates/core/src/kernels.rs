//! Sobolev and indicator kernels, their ANOVA decompositions and gram matrices.

use crate::data::Dataset;
use crate::error::{PlrError, Result};
use crate::linalg;
use faer::Mat;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Measures used to centre the marginal kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    /// Lebesgue measure on `[0, 1]` and equal label weights `(1/2, 1/2)`.
    ///
    /// The reduced gram is positive semidefinite for every labelling and the
    /// interaction spectrum does not depend on the labels.
    #[default]
    Reference,
    /// Sample means over the observed `x_i` and the observed proportions `ω̂`.
    Empirical,
}

impl std::str::FromStr for Centering {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "empirical" => Ok(Self::Empirical),
            other => Err(PlrError::Config(format!("unknown centering '{other}'"))),
        }
    }
}

impl std::fmt::Display for Centering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Reference => "reference",
            Self::Empirical => "empirical",
        })
    }
}

/// Smoothness order, numerical floors and quadrature resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub m: u32,
    pub eig_floor: f64,
    pub psd_tol: f64,
    pub resolution: usize,
    pub centering: Centering,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            m: 2,
            eig_floor: 1e-10,
            psd_tol: 1e-8,
            resolution: crate::quadrature::DEFAULT_RESOLUTION,
            centering: Centering::Reference,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.m) {
            return Err(PlrError::Config(format!(
                "smoothness order m = {} not in {{1, 2}}",
                self.m
            )));
        }
        if !(self.eig_floor > 0.0) || !(self.psd_tol >= 0.0) {
            return Err(PlrError::Config(
                "eig_floor must be positive and psd_tol nonnegative".into(),
            ));
        }
        if self.resolution == 0 {
            return Err(PlrError::Config("quadrature resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Scaled Bernoulli polynomial `k_r(t) = B_r(t) / r!` for `r ∈ {2, 4}`.
pub fn bernoulli_k(r: u32, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(PlrError::Domain(format!("t = {t} outside [0, 1]")));
    }
    match r {
        2 => Ok(k2(t)),
        4 => Ok(k4(t)),
        _ => Err(PlrError::Config(format!("no scaled Bernoulli polynomial of order {r}"))),
    }
}

#[inline]
fn k2(t: f64) -> f64 {
    (t * t - t + 1.0 / 6.0) / 2.0
}

#[inline]
fn k4(t: f64) -> f64 {
    let u = t - 0.5;
    let u2 = u * u;
    ((u2 - 0.5) * u2 + 7.0 / 240.0) / 24.0
}

/// Smooth part of the Sobolev kernel, `(-1)^(m-1) k_2m(|a - b|)`.
#[inline]
pub(crate) fn smooth_part(m: u32, a: f64, b: f64) -> f64 {
    let t = (a - b).abs();
    if m == 1 {
        k2(t)
    } else {
        -k4(t)
    }
}

/// `1 + (-1)^(m-1) k_2m(|x - y|)`.
pub fn sobolev_kernel(x: f64, y: f64, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    for v in [x, y] {
        if !(0.0..=1.0).contains(&v) {
            return Err(PlrError::Domain(format!("x = {v} outside [0, 1]")));
        }
    }
    Ok(1.0 + smooth_part(cfg.m, x, y))
}

pub fn discrete_kernel(z: u8, w: u8) -> f64 {
    if z == w {
        1.0
    } else {
        0.0
    }
}

/// Splits the indicator kernel on `{0, 1}` into its mean part `K0` and
/// contrast part `K1` under label weights `omega`.
pub fn decompose_discrete(omega: [f64; 2]) -> Result<([[f64; 2]; 2], [[f64; 2]; 2])> {
    if omega.iter().any(|w| !(*w >= 0.0)) || (omega[0] + omega[1] - 1.0).abs() > 1e-12 {
        return Err(PlrError::Domain(format!(
            "label weights {omega:?} must be nonnegative and sum to 1"
        )));
    }
    let s2 = omega[0] * omega[0] + omega[1] * omega[1];
    let mut k0 = [[0.0; 2]; 2];
    let mut k1 = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            k0[a][b] = omega[a] + omega[b] - s2;
            k1[a][b] = discrete_kernel(a as u8, b as u8) - omega[a] - omega[b] + s2;
        }
    }
    Ok((k0, k1))
}

/// Double centering: `q1 = C q C` with `C = I - 11ᵀ/n`, `q0 = q - q1`.
pub fn decompose_continuous_gram(q: &Mat<f64>) -> Result<(Mat<f64>, Mat<f64>)> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(PlrError::Shape {
            expected: "square matrix".into(),
            got: format!("{}x{}", q.nrows(), q.ncols()),
        });
    }
    let nf = n as f64;
    let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| q[(i, j)]).sum::<f64>() / nf).collect();
    let col: Vec<f64> = (0..n).map(|j| q.col_as_slice(j).iter().sum::<f64>() / nf).collect();
    let grand = row.iter().sum::<f64>() / nf;
    let q0 = Mat::from_fn(n, n, |i, j| row[i] + col[j] - grand);
    let q1 = Mat::from_fn(n, n, |i, j| q[(i, j)] - q0[(i, j)]);
    Ok((q0, q1))
}

/// Which product kernel to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPart {
    /// `K^X · 1{z = z'}`.
    Full,
    /// Everything except the interaction: `K^X·K0^Z + K0^X·K1^Z`.
    Reduced,
    /// `K1^X · K1^Z`.
    Interaction,
}

/// Label-free ingredients of the continuous kernel at the sample points.
#[derive(Debug, Clone)]
pub struct XKernel {
    pub(crate) m: u32,
    pub(crate) centering: Centering,
    pub(crate) x: Vec<f64>,
    pub(crate) qx: Mat<f64>,
    pub(crate) row_mean: Vec<f64>,
    pub(crate) grand_mean: f64,
}

impl XKernel {
    pub fn new(x: &[f64], cfg: &KernelConfig) -> Self {
        let n = x.len();
        let qx = Mat::from_fn(n, n, |i, j| 1.0 + smooth_part(cfg.m, x[i], x[j]));
        Self::from_gram(x, qx, cfg)
    }

    pub(crate) fn from_gram(x: &[f64], qx: Mat<f64>, cfg: &KernelConfig) -> Self {
        let n = x.len();
        let nf = n as f64;
        let row_mean: Vec<f64> = (0..n).map(|j| qx.col_as_slice(j).iter().sum::<f64>() / nf).collect();
        let grand_mean = row_mean.iter().sum::<f64>() / nf;
        Self {
            m: cfg.m,
            centering: cfg.centering,
            x: x.to_vec(),
            qx,
            row_mean,
            grand_mean,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    #[inline]
    pub(crate) fn k(&self, a: f64, b: f64) -> f64 {
        1.0 + smooth_part(self.m, a, b)
    }

    /// Mean embedding at an arbitrary point (sample mean of the kernel section).
    pub(crate) fn mean_at(&self, x: f64) -> f64 {
        match self.centering {
            Centering::Reference => 1.0,
            Centering::Empirical => {
                self.x.iter().map(|&xi| self.k(x, xi)).sum::<f64>() / self.x.len() as f64
            }
        }
    }

    /// Mean part `K0^X` between an arbitrary point (with mean `mu`) and sample `j`.
    #[inline]
    pub(crate) fn k0(&self, mu: f64, j: usize) -> f64 {
        match self.centering {
            Centering::Reference => 1.0,
            Centering::Empirical => mu + self.row_mean[j] - self.grand_mean,
        }
    }
}

/// Kernel evaluator bound to a labelled sample.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub(crate) xk: Arc<XKernel>,
    pub(crate) z: Vec<u8>,
    pub(crate) omega: [f64; 2],
    pub(crate) k0z: [[f64; 2]; 2],
    pub(crate) k1z: [[f64; 2]; 2],
}

impl KernelBasis {
    pub fn new(data: &Dataset, cfg: &KernelConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_x(Arc::new(XKernel::new(data.x(), cfg)), data.z().to_vec(), data.omega_hat())
    }

    /// Reuses the label-free part for another labelling.
    pub fn with_x(xk: Arc<XKernel>, z: Vec<u8>, omega_hat: [f64; 2]) -> Result<Self> {
        if z.len() != xk.len() {
            return Err(PlrError::Shape {
                expected: format!("{} labels", xk.len()),
                got: format!("{}", z.len()),
            });
        }
        let omega = match xk.centering {
            Centering::Reference => [0.5, 0.5],
            Centering::Empirical => omega_hat,
        };
        let (k0z, k1z) = decompose_discrete(omega)?;
        Ok(Self {
            xk,
            z,
            omega,
            k0z,
            k1z,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Label weights used by the decomposition.
    pub fn omega(&self) -> [f64; 2] {
        self.omega
    }

    #[inline]
    fn combine(&self, part: KernelPart, kx: f64, k0x: f64, z: u8, zj: u8) -> f64 {
        let (a, b) = (z as usize, zj as usize);
        match part {
            KernelPart::Full => {
                if z == zj {
                    kx
                } else {
                    0.0
                }
            }
            KernelPart::Reduced => kx * self.k0z[a][b] + k0x * self.k1z[a][b],
            KernelPart::Interaction => (kx - k0x) * self.k1z[a][b],
        }
    }

    /// Kernel sections `K((x, z), Y_j)` for all sample points `j`.
    pub fn row(&self, part: KernelPart, x: f64, z: u8, out: &mut [f64]) {
        let xk = &*self.xk;
        let mu = xk.mean_at(x);
        for (j, o) in out.iter_mut().enumerate() {
            let kx = xk.k(x, xk.x[j]);
            *o = self.combine(part, kx, xk.k0(mu, j), z, self.z[j]);
        }
    }

    /// Gram matrix of the requested part at the sample points.
    pub fn gram(&self, part: KernelPart) -> Mat<f64> {
        let xk = &*self.xk;
        let n = self.len();
        Mat::from_fn(n, n, |i, j| {
            let k0x = xk.k0(xk.row_mean[i], j);
            self.combine(part, xk.qx[(i, j)], k0x, self.z[i], self.z[j])
        })
    }

    /// `G × n` matrix of kernel sections at the nodes `(xs[q], zs[q])`.
    pub fn eval_matrix(&self, part: KernelPart, xs: &[f64], zs: &[u8]) -> Mat<f64> {
        let n = self.len();
        let mut out = Mat::zeros(xs.len(), n);
        let mut buf = vec![0.0; n];
        for (q, (&x, &z)) in xs.iter().zip(zs).enumerate() {
            self.row(part, x, z, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                out[(q, j)] = *v;
            }
        }
        out
    }
}

/// Marginal, decomposed and product grams of one sample.
#[derive(Debug, Clone)]
pub struct GramSet {
    pub q_x: Mat<f64>,
    pub q_z: Mat<f64>,
    pub q0_x: Mat<f64>,
    pub q1_x: Mat<f64>,
    pub q0_z: Mat<f64>,
    pub q1_z: Mat<f64>,
    pub q_full: Mat<f64>,
    pub q_reduced: Mat<f64>,
    pub q_interaction: Mat<f64>,
    pub cfg: KernelConfig,
}

impl GramSet {
    /// Smallest eigenvalues of the full, reduced and interaction grams.
    pub fn min_eigenvalues(&self) -> Result<[f64; 3]> {
        let f = |m: &Mat<f64>| -> Result<f64> {
            Ok(linalg::sym_eigenvalues(m)?.first().copied().unwrap_or(0.0))
        };
        Ok([f(&self.q_full)?, f(&self.q_reduced)?, f(&self.q_interaction)?])
    }
}

pub fn build_grams(data: &Dataset, cfg: &KernelConfig) -> Result<GramSet> {
    cfg.validate()?;
    let n = data.len();
    let x = data.x();
    let z = data.z();
    let q_x = Mat::from_fn(n, n, |i, j| 1.0 + smooth_part(cfg.m, x[i], x[j]));
    let q_z = Mat::from_fn(n, n, |i, j| discrete_kernel(z[i], z[j]));
    let (q0_x, q1_x) = match cfg.centering {
        Centering::Empirical => decompose_continuous_gram(&q_x)?,
        Centering::Reference => (
            Mat::from_fn(n, n, |_, _| 1.0),
            Mat::from_fn(n, n, |i, j| smooth_part(cfg.m, x[i], x[j])),
        ),
    };
    let omega = match cfg.centering {
        Centering::Reference => [0.5, 0.5],
        Centering::Empirical => data.omega_hat(),
    };
    let (k0, k1) = decompose_discrete(omega)?;
    let q0_z = Mat::from_fn(n, n, |i, j| k0[z[i] as usize][z[j] as usize]);
    let q1_z = Mat::from_fn(n, n, |i, j| k1[z[i] as usize][z[j] as usize]);
    let q_full = Mat::from_fn(n, n, |i, j| q_x[(i, j)] * q_z[(i, j)]);
    let q_reduced = Mat::from_fn(n, n, |i, j| {
        q0_x[(i, j)] * q0_z[(i, j)] + q1_x[(i, j)] * q0_z[(i, j)] + q0_x[(i, j)] * q1_z[(i, j)]
    });
    let q_interaction = Mat::from_fn(n, n, |i, j| q1_x[(i, j)] * q1_z[(i, j)]);
    Ok(GramSet {
        q_x,
        q_z,
        q0_x,
        q1_x,
        q0_z,
        q1_z,
        q_full,
        q_reduced,
        q_interaction,
        cfg: *cfg,
    })
}

/// Largest `|A - Aᵀ|` entry.
pub fn asymmetry(a: &Mat<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn emp() -> KernelConfig {
        KernelConfig {
            centering: Centering::Empirical,
            ..Default::default()
        }
    }

    #[test]
    fn bernoulli_values() {
        assert_abs_diff_eq!(bernoulli_k(4, 0.5).unwrap(), 7.0 / 5760.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bernoulli_k(4, 0.0).unwrap(), -1.0 / 720.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bernoulli_k(2, 0.0).unwrap(), 1.0 / 12.0, epsilon = 1e-15);
        assert!(matches!(bernoulli_k(6, 0.1), Err(PlrError::Config(_))));
        assert!(matches!(bernoulli_k(4, 1.5), Err(PlrError::Domain(_))));
    }

    #[test]
    fn bernoulli_matches_polynomial_oracle() {
        // B4(t) = t^4 - 2t^3 + t^2 - 1/30, B2(t) = t^2 - t + 1/6
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let b4 = t.powi(4) - 2.0 * t.powi(3) + t * t - 1.0 / 30.0;
            assert_abs_diff_eq!(bernoulli_k(4, t).unwrap(), b4 / 24.0, epsilon = 1e-15);
            let b2 = t * t - t + 1.0 / 6.0;
            assert_abs_diff_eq!(bernoulli_k(2, t).unwrap(), b2 / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn sobolev_values() {
        let cfg = KernelConfig::default();
        assert_abs_diff_eq!(sobolev_kernel(0.3, 0.3, &cfg).unwrap(), 1.0 + 1.0 / 720.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sobolev_kernel(0.0, 0.5, &cfg).unwrap(), 1.0 - 7.0 / 5760.0, epsilon = 1e-15);
        assert!(sobolev_kernel(-0.1, 0.5, &cfg).is_err());
        let bad = KernelConfig { m: 3, ..cfg };
        assert!(sobolev_kernel(0.1, 0.5, &bad).is_err());
    }

    #[test]
    fn discrete_decomposition() {
        assert_eq!(discrete_kernel(0, 0), 1.0);
        assert_eq!(discrete_kernel(0, 1), 0.0);
        assert_eq!(discrete_kernel(1, 1), 1.0);
        let (k0, k1) = decompose_discrete([0.5, 0.5]).unwrap();
        assert_eq!(k0, [[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(k1, [[0.5, -0.5], [-0.5, 0.5]]);
        assert!(decompose_discrete([0.5, 0.6]).is_err());
    }

    #[test]
    fn centering_constant_matrix() {
        let q = Mat::from_fn(4, 4, |_, _| 1.0);
        let (_, q1) = decompose_continuous_gram(&q).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                assert_abs_diff_eq!(q1[(i, j)], 0.0, epsilon = 1e-15);
            }
        }
        assert!(decompose_continuous_gram(&Mat::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn single_group_kills_interaction_empirically() {
        let d = Dataset::new(vec![0.1, 0.5, 0.7, 0.9], vec![1, 1, 1, 1]).unwrap();
        let g = build_grams(&d, &emp()).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                assert_eq!(g.q_interaction[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cross_group_entries_vanish() {
        let d = Dataset::new(vec![0.2, 0.8], vec![0, 1]).unwrap();
        let g = build_grams(&d, &KernelConfig::default()).unwrap();
        assert_eq!(g.q_full[(0, 1)], 0.0);
    }

    #[test]
    fn basis_gram_matches_build_grams() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 / 13.0 + 0.02).collect();
        let z: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
        let d = Dataset::new(x, z).unwrap();
        for cfg in [KernelConfig::default(), emp()] {
            let g = build_grams(&d, &cfg).unwrap();
            let b = KernelBasis::new(&d, &cfg).unwrap();
            for (part, m) in [
                (KernelPart::Full, &g.q_full),
                (KernelPart::Reduced, &g.q_reduced),
                (KernelPart::Interaction, &g.q_interaction),
            ] {
                let bg = b.gram(part);
                let ev = b.eval_matrix(part, d.x(), d.z());
                for j in 0..12 {
                    for i in 0..12 {
                        assert_abs_diff_eq!(bg[(i, j)], m[(i, j)], epsilon = 1e-13);
                        assert_abs_diff_eq!(ev[(i, j)], m[(i, j)], epsilon = 1e-13);
                    }
                }
            }
        }
    }
}
