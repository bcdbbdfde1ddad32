//! Simulation settings and seeded size/power experiments.

use crate::baselines::{self, KsCalibration};
use crate::data::{map_domain, Dataset, MapMode};
use crate::error::{PlrError, Result};
use crate::kernels::{Centering, KernelConfig, XKernel};
use crate::plr::{self, Calibration, LambdaChoice, Prepared, Spectrum, TestOptions};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

pub const ALPHA: f64 = 0.05;
pub const DESK_SIZES: [usize; 4] = [125, 250, 500, 1000];
pub const FULL_SIZES: [usize; 8] = [125, 250, 375, 500, 625, 750, 875, 1000];
pub const DESK_TRIALS: usize = 200;
pub const FULL_TRIALS: usize = 1000;
pub const CSV_HEADER: [&str; 8] = ["setting", "delta", "n", "method", "trials", "rejections", "rate", "mean_runtime_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub id: u8,
    pub delta: f64,
    pub n_per_group: usize,
}

impl SettingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.id) {
            return Err(PlrError::Domain(format!("setting {} not in 1..=6", self.id)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(PlrError::Domain(format!("delta = {} must be finite and nonnegative", self.delta)));
        }
        if matches!(self.id, 3 | 4) && self.delta >= 1.0 {
            return Err(PlrError::Domain(format!(
                "setting {} needs delta < 1, got {}",
                self.id, self.delta
            )));
        }
        if self.n_per_group == 0 {
            return Err(PlrError::Domain("n_per_group must be positive".into()));
        }
        Ok(())
    }
}

/// Standard normal by the Marsaglia polar method.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u = 2.0 * rng.random::<f64>() - 1.0;
        let v = 2.0 * rng.random::<f64>() - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// `Beta(a, b)` as `X / (X + Y)` with gamma variates.
pub fn beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let x = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
    let y = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
    x / (x + y)
}

/// Draws `2 · n_per_group` labelled observations on the raw scale.
pub fn generate(spec: &SettingSpec, seed: u64) -> Result<(Vec<f64>, Vec<u8>)> {
    spec.validate()?;
    let mut r = rng::stream(seed, 0);
    let n = 2 * spec.n_per_group;
    let d = spec.delta;
    let mut x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let zi = r.random_bool(0.5) as u8;
        let t = zi as f64;
        let left = r.random::<f64>() < 0.5;
        let v = match spec.id {
            1 => (1.0 + d * t) * normal(&mut r),
            2 => {
                let mean = if left { -d * t } else { d * t };
                mean + (1.0 + d * d * (1.0 - t)).sqrt() * normal(&mut r)
            }
            3 => {
                if left {
                    2.0 + normal(&mut r)
                } else {
                    -2.0 + (1.0 - d * t) * normal(&mut r)
                }
            }
            4 => {
                let mean = if left { 2.0 } else { -2.0 };
                mean + (1.0 - d * t) * normal(&mut r)
            }
            5 => {
                let f = 1.0 + d * t;
                beta(2.0 * f, 2.0 * f, &mut r)
            }
            _ => {
                let f = 1.0 + d * t;
                if left {
                    beta(2.0 * f, 6.0 * f, &mut r)
                } else {
                    beta(6.0 * f, 2.0 * f, &mut r)
                }
            }
        };
        x.push(v);
        z.push(zi);
    }
    Ok((x, z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PlrAsymptotic,
    PlrPermutation,
    PlrSplit,
    MmdPerm,
    Ks,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::PlrAsymptotic,
        Method::PlrPermutation,
        Method::PlrSplit,
        Method::MmdPerm,
        Method::Ks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PlrAsymptotic => "plr_asymptotic",
            Self::PlrPermutation => "plr_permutation",
            Self::PlrSplit => "plr_split",
            Self::MmdPerm => "mmd_perm",
            Self::Ks => "ks",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PlrError::Config(format!("unknown method '{s}'")))
    }
}

/// Grid, methods and knobs of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub settings: Vec<u8>,
    pub deltas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub master_seed: u64,
    pub permutations: usize,
    pub alpha: f64,
    /// Record wall-clock runtimes (makes the table nondeterministic).
    pub timing: bool,
    pub kernel: KernelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            settings: vec![1],
            deltas: vec![0.0],
            sizes: DESK_SIZES.to_vec(),
            methods: vec![Method::PlrAsymptotic],
            trials: DESK_TRIALS,
            master_seed: 0,
            permutations: 199,
            alpha: ALPHA,
            timing: false,
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub setting: u8,
    pub delta: f64,
    pub n: usize,
    pub method: Method,
    /// Trials that produced a decision.
    pub trials: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    pub mean_runtime_ms: Option<f64>,
    pub failures: usize,
    /// False when more than 5% of trials failed.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
    pub master_seed: u64,
}

/// Per-trial detail for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub reject: Option<bool>,
    pub p_value: Option<f64>,
    /// Standardized statistic, for the asymptotic PLR only.
    pub z_score: Option<f64>,
    pub runtime_ms: f64,
}

type CacheKey = (usize, u64);

/// Interaction spectra shared across trials whose mapped `x` agree as sets.
///
/// Under reference centering the spectrum depends on the points only, and
/// rank-mapped continuous samples of equal size always give the same set.
#[derive(Default)]
pub(crate) struct PrepCache {
    inner: Mutex<HashMap<CacheKey, Vec<(Vec<u64>, Arc<Spectrum>)>>>,
}

impl PrepCache {
    pub fn get(&self, x: &[f64], cfg: &KernelConfig) -> Result<Prepared> {
        let xk = Arc::new(XKernel::new(x, cfg));
        if cfg.centering != Centering::Reference {
            return Ok(Prepared { xk, spectrum: None });
        }
        let mut bits: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        bits.sort_unstable();
        let key = (x.len(), bits.iter().fold(0u64, |a, &b| rng::mix64(a ^ b)));
        let hit = self
            .inner
            .lock()
            .expect("cache lock")
            .get(&key)
            .and_then(|list| list.iter().find(|(v, _)| *v == bits).map(|(_, s)| s.clone()));
        let spectrum = match hit {
            Some(s) => s,
            None => {
                let s = Arc::new(plr::reference_spectrum(&xk, cfg)?);
                self.inner
                    .lock()
                    .expect("cache lock")
                    .entry(key)
                    .or_default()
                    .push((bits, s.clone()));
                s
            }
        };
        Ok(Prepared {
            xk,
            spectrum: Some(spectrum),
        })
    }
}

/// Seed of one trial of one cell.
pub fn trial_seed(master: u64, spec: &SettingSpec, trial: usize) -> u64 {
    rng::derive_seed(
        master,
        &[spec.id as u64, spec.delta.to_bits(), spec.n_per_group as u64, trial as u64],
    )
}

pub(crate) fn run_method(
    method: Method,
    raw_x: &[f64],
    z: &[u8],
    seed: u64,
    cfg: &ExperimentConfig,
    cache: &PrepCache,
) -> Result<(bool, f64, Option<f64>)> {
    let k = &cfg.kernel;
    let opts = TestOptions {
        alpha: cfg.alpha,
        lambda: LambdaChoice::Auto,
        calibration: Calibration::Asymptotic,
        permutations: cfg.permutations,
        seed,
        ..Default::default()
    };
    let mapped = || -> Result<Dataset> { Dataset::new(map_domain(raw_x, MapMode::Rank)?, z.to_vec()) };
    match method {
        Method::PlrAsymptotic | Method::PlrPermutation => {
            let data = mapped()?;
            let prep = cache.get(data.x(), k)?;
            let opts = TestOptions {
                calibration: if method == Method::PlrAsymptotic {
                    Calibration::Asymptotic
                } else {
                    Calibration::Permutation
                },
                ..opts
            };
            let r = plr::test_prepared(&prep, &data, &opts, k)?;
            let zs = (method == Method::PlrAsymptotic).then_some(r.z_score);
            Ok((r.reject, r.p_value, zs))
        }
        Method::PlrSplit => {
            let r = plr::split_test(raw_x, z, &opts, MapMode::Rank, k)?;
            Ok((r.reject, r.p_value, None))
        }
        Method::MmdPerm => {
            let data = mapped()?;
            data.require_two_groups()?;
            let prep = cache.get(data.x(), k)?;
            let k1 = baselines::centered_from(&prep.xk);
            let r = baselines::mmd_test_gram(&k1, &data, cfg.permutations, seed)?;
            Ok((r.p_value <= cfg.alpha, r.p_value, None))
        }
        Method::Ks => {
            let data = Dataset::new(map_domain(raw_x, MapMode::Rank)?, z.to_vec())?;
            let r = baselines::ks_test(&data, KsCalibration::Asymptotic)?;
            Ok((r.p_value <= cfg.alpha, r.p_value, None))
        }
    }
}

/// Every trial of one cell, for every requested method.
pub fn run_cell(spec: &SettingSpec, cfg: &ExperimentConfig) -> Result<Vec<Vec<TrialOutcome>>> {
    run_cell_cached(spec, cfg, &PrepCache::default())
}

fn run_cell_cached(spec: &SettingSpec, cfg: &ExperimentConfig, cache: &PrepCache) -> Result<Vec<Vec<TrialOutcome>>> {
    spec.validate()?;
    let per_trial: Vec<Vec<TrialOutcome>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(cfg.master_seed, spec, t);
            let generated = generate(spec, seed);
            cfg.methods
                .iter()
                .map(|&m| {
                    let start = Instant::now();
                    let out = generated
                        .as_ref()
                        .map_err(|e| PlrError::Domain(e.to_string()))
                        .and_then(|(x, z)| run_method(m, x, z, seed, cfg, cache));
                    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
                    match out {
                        Ok((reject, p, zs)) => TrialOutcome {
                            reject: Some(reject),
                            p_value: Some(p),
                            z_score: zs,
                            runtime_ms,
                        },
                        Err(_) => TrialOutcome {
                            reject: None,
                            p_value: None,
                            z_score: None,
                            runtime_ms,
                        },
                    }
                })
                .collect()
        })
        .collect();
    // transpose to method-major
    Ok((0..cfg.methods.len())
        .map(|mi| per_trial.iter().map(|t| t[mi].clone()).collect())
        .collect())
}

/// Runs every `(setting, delta, n)` cell and tallies rejections per method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PowerTable> {
    if cfg.trials == 0 {
        return Err(PlrError::Config("trials must be at least 1".into()));
    }
    if cfg.methods.is_empty() {
        return Err(PlrError::Config("no methods requested".into()));
    }
    let cache = PrepCache::default();
    let mut rows = Vec::new();
    for &setting in &cfg.settings {
        for &delta in &cfg.deltas {
            for &n in &cfg.sizes {
                let spec = SettingSpec {
                    id: setting,
                    delta,
                    n_per_group: n,
                };
                let outcomes = run_cell_cached(&spec, cfg, &cache)?;
                for (mi, &method) in cfg.methods.iter().enumerate() {
                    rows.push(tally(&spec, method, &outcomes[mi], cfg.timing));
                }
            }
        }
    }
    Ok(PowerTable {
        rows,
        master_seed: cfg.master_seed,
    })
}

fn tally(spec: &SettingSpec, method: Method, outcomes: &[TrialOutcome], timing: bool) -> PowerRow {
    let done: Vec<bool> = outcomes.iter().filter_map(|o| o.reject).collect();
    let failures = outcomes.len() - done.len();
    let rejections = done.iter().filter(|&&r| r).count();
    let trials = done.len();
    PowerRow {
        setting: spec.id,
        delta: spec.delta,
        n: spec.n_per_group,
        method,
        trials,
        rejections,
        rejection_rate: if trials > 0 { rejections as f64 / trials as f64 } else { 0.0 },
        mean_runtime_ms: timing
            .then(|| outcomes.iter().map(|o| o.runtime_ms).sum::<f64>() / outcomes.len().max(1) as f64),
        failures,
        valid: failures as f64 <= 0.05 * outcomes.len() as f64,
    }
}

impl PowerTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for r in &self.rows {
            wr.write_record([
                r.setting.to_string(),
                r.delta.to_string(),
                r.n.to_string(),
                r.method.to_string(),
                r.trials.to_string(),
                r.rejections.to_string(),
                r.rejection_rate.to_string(),
                r.mean_runtime_ms.map(|v| format!("{v:.3}")).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// One SVG per `(setting, delta)`: rejection rate against `n`, a line per method.
    pub fn write_svgs(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let mut keys: Vec<(u8, u64)> = self.rows.iter().map(|r| (r.setting, r.delta.to_bits())).collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        let mut paths = Vec::new();
        for (setting, dbits) in keys {
            let delta = f64::from_bits(dbits);
            let rows: Vec<&PowerRow> = self
                .rows
                .iter()
                .filter(|r| r.setting == setting && r.delta.to_bits() == dbits)
                .collect();
            let path = dir.join(format!("{stem}_s{setting}_d{delta}.svg"));
            std::fs::write(&path, svg_plot(setting, delta, &rows))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

const PALETTE: [&str; 5] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e"];

fn svg_plot(setting: u8, delta: f64, rows: &[&PowerRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let n_max = rows.iter().map(|r| r.n).max().unwrap_or(1) as f64;
    let n_min = rows.iter().map(|r| r.n).min().unwrap_or(0) as f64;
    let span = (n_max - n_min).max(1.0);
    let px = |n: f64| pad + (n - n_min) / span * (w - 2.0 * pad);
    let py = |r: f64| h - pad - r * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s += &format!("<text x=\"{}\" y=\"18\" text-anchor=\"middle\">setting {setting}, delta {delta}</text>\n", w / 2.0);
    s += &format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        s += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick}</text>\n",
            pad - 4.0,
            py(tick) + 4.0
        );
    }
    s += &format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
        py(ALPHA),
        w - pad
    );
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.dedup();
    let mut seen = Vec::new();
    for m in methods {
        if seen.contains(&m) {
            continue;
        }
        seen.push(m);
        let color = PALETTE[(seen.len() - 1) % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.n as f64, r.rejection_rate))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|(n, r)| format!("{:.1},{:.1}", px(*n), py(*r))).collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        );
        for (n, r) in &pts {
            s += &format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n", px(*n), py(*r));
        }
        let ly = pad + 14.0 * seen.len() as f64;
        s += &format!(
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{m}</text>\n",
            w - pad - 90.0
        );
    }
    for n in rows.iter().map(|r| r.n).collect::<std::collections::BTreeSet<_>>() {
        s += &format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{n}</text>\n",
            px(n as f64),
            h - pad + 16.0
        );
    }
    s += "</svg>\n";
    s
}
