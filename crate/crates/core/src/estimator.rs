//! Penalized maximum-likelihood log-density fits under the full and reduced models.

use crate::data::Dataset;
use crate::error::{PlrError, Result};
use crate::kernels::{GramSet, KernelBasis, KernelConfig, KernelPart, XKernel};
use crate::linalg::{self, PivotedCholesky};
use crate::quadrature::QuadGrid;
use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const MIN_STEP: f64 = 1.0 / (1u64 << 30) as f64;
const JITTER: f64 = 1e-10;
const ARMIJO: f64 = 1e-4;
const DECREMENT_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Unrestricted log-density on `[0, 1] × {0, 1}`.
    Full,
    /// No interaction between `x` and the label.
    Reduced,
}

impl ModelKind {
    pub fn part(self) -> KernelPart {
        match self {
            Self::Full => KernelPart::Full,
            Self::Reduced => KernelPart::Reduced,
        }
    }

    fn gram(self, grams: &GramSet) -> &Mat<f64> {
        match self {
            Self::Full => &grams.q_full,
            Self::Reduced => &grams.q_reduced,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Reduced => "reduced",
        })
    }
}

/// A converged fit `η̂(y) = b + Σ_i K(Y_i, y) c_i` with an unpenalized constant `b`.
#[derive(Debug, Clone)]
pub struct FittedDensity {
    pub coeffs: Vec<f64>,
    pub intercept: f64,
    pub model: ModelKind,
    pub gram: Arc<Mat<f64>>,
    pub data: Dataset,
    pub grid: QuadGrid,
    pub lambda: f64,
    /// Norm of the objective's gradient in the metric of the penalty.
    pub final_grad_norm: f64,
    pub iterations: usize,
    pub objective: f64,
    /// Quadrature integral of `exp(η̂)`.
    pub mass: f64,
    pub objective_trace: Vec<f64>,
    basis: Arc<KernelBasis>,
    x_means: OnceLock<[f64; 2]>,
}

/// Four-way split of `η̂(x, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaComponents {
    pub constant: f64,
    pub main_x: f64,
    pub main_z: f64,
    pub interaction: f64,
}

impl AnovaComponents {
    pub fn total(&self) -> f64 {
        self.constant + self.main_x + self.main_z + self.interaction
    }
}

impl FittedDensity {
    pub fn basis(&self) -> &KernelBasis {
        &self.basis
    }

    /// Gradient tolerance the fit was held to.
    pub fn grad_tol(&self) -> f64 {
        GRAD_TOL * self.objective.abs().max(1.0)
    }
}

/// Result of one Newton solve.
#[derive(Debug, Clone)]
pub(crate) struct Solved {
    pub c: Vec<f64>,
    pub intercept: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub mass: f64,
}

/// One group of representers with its own gram `m` and grid evaluations `zg`.
pub(crate) struct Block<'a> {
    pub m: MatRef<'a, f64>,
    pub zg: MatRef<'a, f64>,
    pub w: &'a [f64],
}

struct Whitened {
    pc: Option<PivotedCholesky>,
    phi: Mat<f64>,
    lin: Vec<f64>,
    offset: usize,
    n: usize,
}

impl Whitened {
    fn rank(&self) -> usize {
        self.phi.ncols()
    }

    fn coeffs(&self, beta: &[f64]) -> Vec<f64> {
        match &self.pc {
            Some(pc) => coeffs_from_beta(pc, &beta[self.offset..self.offset + self.rank()], self.n),
            None => vec![0.0; self.n],
        }
    }
}

/// Minimizes `-(1/n) Σ_i η(Y_i) + Σ_q w_q exp(η(y_q)) + (λ/2) cᵀMc` with
/// `η = b + Σ_i K(Y_i, ·) c_i` over `c` and an unpenalized constant `b`.
///
/// The constant is profiled out, leaving `-(1/n) 1ᵀMc + log Σ_q w_q e^{ζᵀc} + 1 + (λ/2) cᵀMc`.
/// Each block works in coordinates `β` with `c = P [L11⁻ᵀ β; 0]` from a pivoted
/// Cholesky factor of its gram, so the penalty becomes `|β|²/2`.
pub(crate) fn solve(blocks: &[Block<'_>], n_total: usize, lambda: f64, model: &str) -> Result<Solved> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(PlrError::Domain(format!("lambda = {lambda} must be positive")));
    }
    let inv_n = 1.0 / n_total as f64;
    let mut parts = Vec::with_capacity(blocks.len());
    let mut offset = 0;
    for b in blocks {
        let n = b.m.nrows();
        let g = b.zg.nrows();
        let part = if n == 0 {
            Whitened { pc: None, phi: Mat::zeros(g, 0), lin: Vec::new(), offset, n }
        } else {
            let pc = PivotedCholesky::new(b.m)?;
            let r = pc.rank;
            let lin = (0..r).map(|k| pc.l.col(k).iter().sum::<f64>() * inv_n).collect();
            let mut phi_t = Mat::from_fn(r, g, |k, q| b.zg[(q, pc.perm[k])]);
            pc.solve_lower_in_place(&mut phi_t);
            Whitened { phi: phi_t.transpose().to_owned(), pc: Some(pc), lin, offset, n }
        };
        offset += part.rank();
        parts.push(part);
    }
    let r = offset;
    let coeffs = |beta: &[f64]| -> Vec<f64> { parts.iter().flat_map(|p| p.coeffs(beta)).collect() };

    // objective, per-block normalized weights p_q ∝ w_q e^{η_q}, and log Σ w e^η
    let eval = |beta: &[f64]| -> (f64, Vec<Vec<f64>>, f64) {
        let etas: Vec<Vec<f64>> = parts
            .iter()
            .map(|p| linalg::mat_vec(p.phi.as_ref(), &beta[p.offset..p.offset + p.rank()]))
            .collect();
        let top = etas.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut probs: Vec<Vec<f64>> = etas
            .iter()
            .zip(blocks)
            .map(|(eta, b)| eta.iter().zip(b.w).map(|(h, w)| w * (h - top).exp()).collect())
            .collect();
        let s: f64 = probs.iter().flatten().sum();
        for p in probs.iter_mut().flatten() {
            *p /= s;
        }
        let log_s = top + s.ln();
        let lin: f64 = parts.iter().map(|p| linalg::dot(&p.lin, &beta[p.offset..p.offset + p.rank()])).sum();
        let f = -lin + log_s + 1.0 + 0.5 * lambda * linalg::dot(beta, beta);
        (f, probs, log_s)
    };

    let mut beta = vec![0.0; r];
    let (mut f, mut probs, mut log_s) = eval(&beta);
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut grad = vec![0.0; r];
    let mut u = vec![0.0; r];
    let mut converged = false;
    while iterations <= MAX_ITER {
        for (p, pr) in parts.iter().zip(&probs) {
            let pe = linalg::mat_t_vec(p.phi.as_ref(), pr);
            for k in 0..p.rank() {
                let j = p.offset + k;
                u[j] = pe[k];
                grad[j] = pe[k] - p.lin[k] + lambda * beta[j];
            }
        }
        let gnorm = linalg::norm(&grad);
        if gnorm < GRAD_TOL * f.abs().max(1.0) {
            converged = true;
            break;
        }
        if iterations == MAX_ITER {
            break;
        }
        let dir = newton_direction(&parts, &probs, &grad, &u, lambda)?;
        let slope = linalg::dot(&grad, &dir);
        if !(slope < 0.0) {
            return Err(PlrError::Divergence(format!("{model} fit: non-descent Newton direction")));
        }
        // Newton decrement below the resolution of the objective
        if -slope <= DECREMENT_FLOOR * f.abs().max(1.0) {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t >= MIN_STEP {
            let trial: Vec<f64> = beta.iter().zip(&dir).map(|(b, d)| b + t * d).collect();
            let (ft, pt, lt) = eval(&trial);
            if ft.is_finite() && ft <= f + ARMIJO * t * slope {
                accepted = Some((trial, ft, pt, lt));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((b, ft, pt, lt)) => {
                beta = b;
                f = ft;
                probs = pt;
                log_s = lt;
                trace.push(f);
            }
            None => {
                return Err(PlrError::Convergence {
                    model: model.to_string(),
                    iterations,
                    grad_norm: gnorm,
                    coeffs: coeffs(&beta),
                });
            }
        }
    }
    let grad_norm = linalg::norm(&grad);
    if !converged {
        return Err(PlrError::Convergence {
            model: model.to_string(),
            iterations,
            grad_norm,
            coeffs: coeffs(&beta),
        });
    }
    Ok(Solved {
        c: coeffs(&beta),
        intercept: -log_s,
        objective: f,
        grad_norm,
        iterations,
        trace,
        mass: probs.iter().flatten().sum(),
    })
}

fn coeffs_from_beta(pc: &PivotedCholesky, beta: &[f64], n: usize) -> Vec<f64> {
    let r = pc.rank;
    let mut b = Mat::from_fn(r, 1, |k, _| beta[k]);
    pc.solve_upper_in_place(&mut b);
    let mut c = vec![0.0; n];
    for k in 0..r {
        c[pc.perm[k]] = b[(k, 0)];
    }
    c
}

// Solves (A - u uᵀ) d = -g with A = blockdiag(Φᵀ P Φ + λ I) by Sherman–Morrison.
fn newton_direction(parts: &[Whitened], probs: &[Vec<f64>], grad: &[f64], u: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let r = grad.len();
    let mut ag = vec![0.0; r];
    let mut au = vec![0.0; r];
    for (p, pr) in parts.iter().zip(probs) {
        let span = p.offset..p.offset + p.rank();
        if span.is_empty() {
            continue;
        }
        let [a, b] = shifted_solve(p.phi.as_ref(), pr, [&grad[span.clone()], &u[span.clone()]], lambda)?;
        ag[span.clone()].copy_from_slice(&a);
        au[span].copy_from_slice(&b);
    }
    let denom = (1.0 - linalg::dot(u, &au)).max(f64::EPSILON);
    let scale = linalg::dot(u, &ag) / denom;
    Ok(ag.iter().zip(&au).map(|(a, b)| -(a + scale * b)).collect())
}

// Applies (Φᵀ P Φ + λ I)⁻¹ to two vectors, switching to the Woodbury form when Φ is wide.
fn shifted_solve(phi: MatRef<'_, f64>, p: &[f64], rhs: [&[f64]; 2], lambda: f64) -> Result<[Vec<f64>; 2]> {
    let (g, r) = (phi.nrows(), phi.ncols());
    let sp: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let b = Mat::from_fn(g, r, |q, k| sp[q] * phi[(q, k)]);
    let trace: f64 = (0..r).map(|k| b.col(k).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() + r as f64 * lambda;
    let mut jitter = JITTER * trace / r as f64;
    for _ in 0..8 {
        let lam = lambda + jitter;
        let out = if r <= g {
            let mut h = linalg::mat_mul(b.as_ref().transpose(), b.as_ref());
            for k in 0..r {
                h[(k, k)] += lam;
            }
            linalg::spd_solve(&h, rhs[0]).zip(linalg::spd_solve(&h, rhs[1]))
        } else {
            let mut a = linalg::mat_mul(b.as_ref(), b.as_ref().transpose());
            for q in 0..g {
                a[(q, q)] += lam;
            }
            let apply = |v: &[f64]| {
                linalg::spd_solve(&a, &linalg::mat_vec(b.as_ref(), v)).map(|y| {
                    let bty = linalg::mat_t_vec(b.as_ref(), &y);
                    v.iter().zip(&bty).map(|(vk, w)| (vk - w) / lam).collect::<Vec<f64>>()
                })
            };
            apply(rhs[0]).zip(apply(rhs[1]))
        };
        if let Some((x, y)) = out {
            return Ok([x, y]);
        }
        jitter = jitter.max(f64::MIN_POSITIVE) * 100.0;
    }
    Err(PlrError::Divergence("Newton system not positive definite".into()))
}

/// Sample-point and grid kernel evaluations for the full model, blocked by label.
///
/// The full gram is block diagonal by label and each grid slice only sees its
/// own group, so the blocks only interact through the shared constant.
pub(crate) fn solve_full(xk: &XKernel, z: &[u8], grid: &QuadGrid, lambda: f64) -> Result<Solved> {
    let n = z.len();
    let idx: [Vec<usize>; 2] = [0u8, 1].map(|label| (0..n).filter(|&i| z[i] == label).collect());
    let mats: Vec<(Mat<f64>, Mat<f64>)> = (0..2u8)
        .map(|label| {
            let idx = &idx[label as usize];
            let slice = grid.slice(label);
            let m = Mat::from_fn(idx.len(), idx.len(), |a, b| xk.qx[(idx[a], idx[b])]);
            let zg = Mat::from_fn(slice.len(), idx.len(), |q, b| xk.k(grid.x[slice.start + q], xk.x[idx[b]]));
            (m, zg)
        })
        .collect();
    let blocks: Vec<Block<'_>> = mats
        .iter()
        .enumerate()
        .map(|(label, (m, zg))| Block { m: m.as_ref(), zg: zg.as_ref(), w: &grid.weights[grid.slice(label as u8)] })
        .collect();
    let mut s = solve(&blocks, n, lambda, "full")?;
    let mut c = vec![0.0; n];
    for (k, &i) in idx.iter().flatten().enumerate() {
        c[i] = s.c[k];
    }
    s.c = c;
    Ok(s)
}

pub(crate) fn solve_reduced(basis: &KernelBasis, grid: &QuadGrid, lambda: f64) -> Result<Solved> {
    let m = basis.gram(KernelPart::Reduced);
    let zg = basis.eval_matrix(KernelPart::Reduced, &grid.x, &grid.z);
    let block = Block { m: m.as_ref(), zg: zg.as_ref(), w: &grid.weights };
    solve(&[block], basis.len(), lambda, "reduced")
}

pub(crate) fn solve_model(basis: &KernelBasis, model: ModelKind, grid: &QuadGrid, lambda: f64) -> Result<Solved> {
    match model {
        ModelKind::Full => solve_full(&basis.xk, &basis.z, grid, lambda),
        ModelKind::Reduced => solve_reduced(basis, grid, lambda),
    }
}

fn basis_for(data: &Dataset, grams: &GramSet, cfg: &KernelConfig) -> Result<KernelBasis> {
    cfg.validate()?;
    if grams.q_x.nrows() != data.len() {
        return Err(PlrError::Shape {
            expected: format!("{0}x{0} grams", data.len()),
            got: format!("{0}x{0}", grams.q_x.nrows()),
        });
    }
    if grams.cfg.centering != cfg.centering || grams.cfg.m != cfg.m {
        return Err(PlrError::Config("grams were built under a different kernel configuration".into()));
    }
    let xk = XKernel::from_gram(data.x(), grams.q_x.clone(), cfg);
    KernelBasis::with_x(Arc::new(xk), data.z().to_vec(), data.omega_hat())
}

/// Damped Newton fit of the penalized likelihood from `c = 0`.
pub fn fit(
    data: &Dataset,
    grams: &GramSet,
    model: ModelKind,
    lambda: f64,
    grid: &QuadGrid,
    cfg: &KernelConfig,
) -> Result<FittedDensity> {
    let basis = Arc::new(basis_for(data, grams, cfg)?);
    let s = solve_model(&basis, model, grid, lambda)?;
    Ok(assemble(s, basis, Arc::new(model.gram(grams).clone()), model, data, grid, lambda))
}

pub(crate) fn assemble(
    s: Solved,
    basis: Arc<KernelBasis>,
    gram: Arc<Mat<f64>>,
    model: ModelKind,
    data: &Dataset,
    grid: &QuadGrid,
    lambda: f64,
) -> FittedDensity {
    FittedDensity {
        coeffs: s.c,
        intercept: s.intercept,
        model,
        gram,
        data: data.clone(),
        grid: grid.clone(),
        lambda,
        final_grad_norm: s.grad_norm,
        iterations: s.iterations,
        objective: s.objective,
        mass: s.mass,
        objective_trace: s.trace,
        basis,
        x_means: OnceLock::new(),
    }
}

struct Problem {
    m: Mat<f64>,
    zg: Mat<f64>,
    w: Vec<f64>,
    n: usize,
    lambda: f64,
}

impl Problem {
    fn new(c: &[f64], data: &Dataset, grams: &GramSet, model: ModelKind, lambda: f64, grid: &QuadGrid) -> Result<Self> {
        let basis = basis_for(data, grams, &grams.cfg)?;
        if c.len() != data.len() {
            return Err(PlrError::Shape {
                expected: format!("{} coefficients", data.len()),
                got: format!("{}", c.len()),
            });
        }
        if lambda <= 0.0 {
            return Err(PlrError::Domain(format!("lambda = {lambda} must be positive")));
        }
        Ok(Self {
            m: model.gram(grams).clone(),
            zg: basis.eval_matrix(model.part(), &grid.x, &grid.z),
            w: grid.weights.clone(),
            n: data.len(),
            lambda,
        })
    }

    fn weighted_exp(&self, c: &[f64], b: f64) -> Result<Vec<f64>> {
        let eta = linalg::mat_vec(self.zg.as_ref(), c);
        let e: Vec<f64> = eta.iter().zip(&self.w).map(|(h, w)| w * (b + h).exp()).collect();
        if e.iter().any(|v| !v.is_finite()) {
            return Err(PlrError::Divergence("exp overflow on the quadrature grid".into()));
        }
        Ok(e)
    }
}

/// `-(1/n) 1ᵀMc + Σ_q w_q exp(ζ(y_q)ᵀc) + (λ/2) cᵀMc` for the model's gram `M`.
pub fn objective(
    c: &[f64],
    data: &Dataset,
    grams: &GramSet,
    model: ModelKind,
    lambda: f64,
    grid: &QuadGrid,
) -> Result<f64> {
    objective_with_intercept(c, 0.0, data, grams, model, lambda, grid)
}

/// The objective with `η = b + ζᵀc`; `fit` minimizes this over `(c, b)`.
pub fn objective_with_intercept(
    c: &[f64],
    b: f64,
    data: &Dataset,
    grams: &GramSet,
    model: ModelKind,
    lambda: f64,
    grid: &QuadGrid,
) -> Result<f64> {
    let p = Problem::new(c, data, grams, model, lambda, grid)?;
    let e = p.weighted_exp(c, b)?;
    let mc = linalg::mat_vec(p.m.as_ref(), c);
    Ok(-b - mc.iter().sum::<f64>() / p.n as f64 + e.iter().sum::<f64>() + 0.5 * lambda * linalg::dot(c, &mc))
}

/// `-(1/n) M1 + Σ_q w_q e^{ζᵀc} ζ(y_q) + λMc`.
pub fn gradient(
    c: &[f64],
    data: &Dataset,
    grams: &GramSet,
    model: ModelKind,
    lambda: f64,
    grid: &QuadGrid,
) -> Result<Vec<f64>> {
    let mut g = gradient_with_intercept(c, 0.0, data, grams, model, lambda, grid)?;
    g.pop();
    Ok(g)
}

/// Gradient of [`objective_with_intercept`]; the last entry is the derivative in `b`.
pub fn gradient_with_intercept(
    c: &[f64],
    b: f64,
    data: &Dataset,
    grams: &GramSet,
    model: ModelKind,
    lambda: f64,
    grid: &QuadGrid,
) -> Result<Vec<f64>> {
    let p = Problem::new(c, data, grams, model, lambda, grid)?;
    let e = p.weighted_exp(c, b)?;
    let v: Vec<f64> = c.iter().map(|ci| p.lambda * ci - 1.0 / p.n as f64).collect();
    let mv = linalg::mat_vec(p.m.as_ref(), &v);
    let ze = linalg::mat_t_vec(p.zg.as_ref(), &e);
    let mut g: Vec<f64> = mv.iter().zip(&ze).map(|(a, b)| a + b).collect();
    g.push(e.iter().sum::<f64>() - 1.0);
    Ok(g)
}

/// `Σ_q w_q e^{ζᵀc} ζ(y_q) ζ(y_q)ᵀ + λM`.
pub fn hessian(
    c: &[f64],
    data: &Dataset,
    grams: &GramSet,
    model: ModelKind,
    lambda: f64,
    grid: &QuadGrid,
) -> Result<Mat<f64>> {
    let p = Problem::new(c, data, grams, model, lambda, grid)?;
    let e = p.weighted_exp(c, 0.0)?;
    let n = p.n;
    let se = Mat::from_fn(p.zg.nrows(), n, |q, j| e[q].sqrt() * p.zg[(q, j)]);
    let mut h = linalg::mat_mul(se.as_ref().transpose(), se.as_ref());
    for j in 0..n {
        for i in 0..n {
            h[(i, j)] += lambda * p.m[(i, j)];
        }
    }
    Ok(h)
}

fn check_x(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(PlrError::Domain(format!("x = {x} outside [0, 1]")))
    }
}

/// `η̂(x, z)`.
pub fn eval_eta(fit: &FittedDensity, x: f64, z: u8) -> Result<f64> {
    check_x(x)?;
    if z > 1 {
        return Err(PlrError::Domain(format!("label {z} not in {{0, 1}}")));
    }
    Ok(eta_unchecked(fit, x, z))
}

fn eta_unchecked(fit: &FittedDensity, x: f64, z: u8) -> f64 {
    let mut row = vec![0.0; fit.coeffs.len()];
    fit.basis.row(fit.model.part(), x, z, &mut row);
    fit.intercept + linalg::dot(&row, &fit.coeffs)
}

/// `exp(η̂(x, z))` divided by the quadrature mass.
pub fn eval_density(fit: &FittedDensity, x: f64, z: u8) -> Result<f64> {
    Ok(eval_eta(fit, x, z)?.exp() / fit.mass)
}

/// Splits `η̂(x, z)` with the empirical measure on `x` and `ω̂` on the label.
pub fn anova_components(fit: &FittedDensity, x: f64, z: u8) -> Result<AnovaComponents> {
    let eta = eval_eta(fit, x, z)?;
    let w = fit.data.omega_hat();
    let ax = *fit.x_means.get_or_init(|| {
        let xs = fit.data.x();
        let mut out = [0.0; 2];
        for (label, o) in out.iter_mut().enumerate() {
            *o = xs.iter().map(|&xi| eta_unchecked(fit, xi, label as u8)).sum::<f64>() / xs.len() as f64;
        }
        out
    });
    let az = w[0] * eta_unchecked(fit, x, 0) + w[1] * eta_unchecked(fit, x, 1);
    let constant = w[0] * ax[0] + w[1] * ax[1];
    let main_x = az - constant;
    let main_z = ax[z as usize] - constant;
    let interaction = eta - constant - main_x - main_z;
    Ok(AnovaComponents {
        constant,
        main_x,
        main_z,
        interaction,
    })
}
