//! Gauss–Legendre rules on `[0, 1]` and the joint grid over `[0, 1] × {0, 1}`.

use crate::error::{PlrError, Result};
use serde::{Deserialize, Serialize};

/// Default number of nodes per label slice.
pub const DEFAULT_RESOLUTION: usize = 64;

/// Quadrature grid over `[0, 1] × {0, 1}`. Each slice carries weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadGrid {
    pub x: Vec<f64>,
    pub z: Vec<u8>,
    pub weights: Vec<f64>,
    pub resolution: usize,
}

impl QuadGrid {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Weighted sum of `f` over the grid nodes.
    pub fn integrate<F: Fn(f64, u8) -> f64>(&self, f: F) -> f64 {
        self.x
            .iter()
            .zip(&self.z)
            .zip(&self.weights)
            .map(|((&x, &z), &w)| w * f(x, z))
            .sum()
    }

    /// Node indices belonging to slice `z`.
    pub fn slice(&self, z: u8) -> std::ops::Range<usize> {
        let q = self.resolution;
        if z == 0 {
            0..q
        } else {
            q..2 * q
        }
    }
}

/// Nodes and weights of the `q`-point Gauss–Legendre rule mapped to `[0, 1]`.
///
/// Roots of the Legendre polynomial are polished by Newton iteration to 1e-15.
pub fn gauss_legendre_01(q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if q == 0 {
        return Err(PlrError::Config("quadrature needs at least one node".into()));
    }
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    let qf = q as f64;
    for i in 0..q.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (qf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(q, t);
            dp = d;
            let step = p / d;
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre(q, t);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        // t is the i-th largest root; map to [0, 1] keeping ascending order
        nodes[q - 1 - i] = 0.5 * (1.0 + t);
        nodes[i] = 0.5 * (1.0 - t);
        weights[q - 1 - i] = 0.5 * w;
        weights[i] = 0.5 * w;
    }
    Ok((nodes, weights))
}

// P_q(t) and its derivative by the three-term recurrence.
fn legendre(q: usize, t: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = t;
    if q == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=q {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = q as f64 * (t * p1 - p0) / (t * t - 1.0);
    (p1, d)
}

/// The `q`-point rule replicated over both label slices (`2q` nodes).
pub fn joint_grid(q: usize) -> Result<QuadGrid> {
    let (nodes, weights) = gauss_legendre_01(q)?;
    let mut x = nodes.clone();
    x.extend_from_slice(&nodes);
    let mut w = weights.clone();
    w.extend_from_slice(&weights);
    let z = std::iter::repeat_n(0u8, q).chain(std::iter::repeat_n(1u8, q)).collect();
    Ok(QuadGrid {
        x,
        z,
        weights: w,
        resolution: q,
    })
}
