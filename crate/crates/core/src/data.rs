//! Paired observations and the map from raw measurements onto `[0, 1]`.

use crate::error::{PlrError, Result};
use serde::{Deserialize, Serialize};

/// Observations `(x_i, z_i)` with `x_i ∈ [0, 1]` and `z_i ∈ {0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Vec<f64>,
    z: Vec<u8>,
    omega_hat: [f64; 2],
}

impl Dataset {
    pub fn new(x: Vec<f64>, z: Vec<u8>) -> Result<Self> {
        if x.len() != z.len() {
            return Err(PlrError::Shape {
                expected: format!("{} labels", x.len()),
                got: format!("{} labels", z.len()),
            });
        }
        if x.len() < 2 {
            return Err(PlrError::Domain(format!(
                "need at least 2 observations, got {}",
                x.len()
            )));
        }
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PlrError::Domain(format!("x = {v} outside [0, 1]")));
        }
        if let Some(v) = z.iter().find(|&&v| v > 1) {
            return Err(PlrError::Domain(format!("label {v} not in {{0, 1}}")));
        }
        let n1 = z.iter().filter(|&&v| v == 1).count();
        let n = z.len();
        let omega_hat = [(n - n1) as f64 / n as f64, n1 as f64 / n as f64];
        Ok(Self { x, z, omega_hat })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Group proportions `(n0/n, n1/n)`.
    pub fn omega_hat(&self) -> [f64; 2] {
        self.omega_hat
    }

    /// Group sizes `(n0, n1)`.
    pub fn counts(&self) -> [usize; 2] {
        let n1 = self.z.iter().filter(|&&v| v == 1).count();
        [self.z.len() - n1, n1]
    }

    /// Fails with [`PlrError::SingleGroup`] unless both labels occur.
    pub fn require_two_groups(&self) -> Result<()> {
        let [n0, n1] = self.counts();
        if n0 == 0 || n1 == 0 {
            Err(PlrError::SingleGroup)
        } else {
            Ok(())
        }
    }

    /// Same points with labels reassigned.
    pub fn with_labels(&self, z: Vec<u8>) -> Result<Self> {
        Self::new(self.x.clone(), z)
    }

    /// Observed `x` values of group `g`.
    pub fn group(&self, g: u8) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.z)
            .filter(|(_, &z)| z == g)
            .map(|(&x, _)| x)
            .collect()
    }
}

/// How raw measurements are carried onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// Pooled ranks `rank / (n + 1)`, ties sharing their average rank.
    #[default]
    Rank,
    /// Affine rescaling of `[min, max]` onto `[0.05, 0.95]`.
    MinMax,
}

impl std::str::FromStr for MapMode {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Self::Rank),
            "minmax" => Ok(Self::MinMax),
            other => Err(PlrError::Config(format!("unknown mapping '{other}'"))),
        }
    }
}

impl std::fmt::Display for MapMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rank => "rank",
            Self::MinMax => "minmax",
        })
    }
}

const MINMAX_EPS: f64 = 0.05;

/// Maps raw values onto `[0, 1]`.
pub fn map_domain(raw: &[f64], mode: MapMode) -> Result<Vec<f64>> {
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(PlrError::Domain(format!("non-finite value {v}")));
    }
    let n = raw.len();
    match mode {
        MapMode::Rank => {
            let ranks = average_ranks(raw);
            Ok(ranks.into_iter().map(|r| r / (n as f64 + 1.0)).collect())
        }
        MapMode::MinMax => {
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                let s = (1.0 - 2.0 * MINMAX_EPS) / (hi - lo);
                Ok(raw.iter().map(|v| MINMAX_EPS + (v - lo) * s).collect())
            } else {
                Ok(vec![0.5; n])
            }
        }
    }
}

/// One-based ranks with ties replaced by their average.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}
