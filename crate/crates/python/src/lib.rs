use ::plrtest as core;
use core::estimator::ModelKind;
use core::{Calibration, Centering, KernelConfig, LambdaChoice, MapMode, Method, RhoMode};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::str::FromStr;

create_exception!(plrtest, PlrError, PyException);

fn err(e: core::PlrError) -> PyErr {
    PlrError::new_err(e.to_string())
}

fn parse<T: FromStr<Err = core::PlrError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn kernel(m: u32, resolution: usize, centering: &str) -> PyResult<KernelConfig> {
    let cfg = KernelConfig {
        m,
        resolution,
        centering: parse::<Centering>(centering)?,
        ..KernelConfig::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Labelled sample on `[0, 1]`.
#[pyclass(frozen, name = "Dataset", module = "plrtest")]
struct PyDataset {
    inner: core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (x, z, map=None))]
    fn new(x: Vec<f64>, z: Vec<u8>, map: Option<&str>) -> PyResult<Self> {
        let x = match map {
            Some(mode) => core::map_domain(&x, parse::<MapMode>(mode)?).map_err(err)?,
            None => x,
        };
        Ok(Self {
            inner: core::Dataset::new(x, z).map_err(err)?,
        })
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x().to_vec()
    }

    #[getter]
    fn z(&self) -> Vec<u8> {
        self.inner.z().to_vec()
    }

    #[getter]
    fn omega_hat(&self) -> (f64, f64) {
        let [a, b] = self.inner.omega_hat();
        (a, b)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let [n0, n1] = self.inner.counts();
        format!("Dataset(n={}, n0={n0}, n1={n1})", self.inner.len())
    }
}

#[pyclass(frozen, name = "PlrResult", module = "plrtest")]
struct PyPlrResult {
    inner: core::PlrResult,
}

#[pymethods]
impl PyPlrResult {
    #[getter]
    fn plr(&self) -> f64 {
        self.inner.plr
    }
    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }
    #[getter]
    fn theta_hat(&self) -> f64 {
        self.inner.theta_hat
    }
    #[getter]
    fn sigma_hat(&self) -> f64 {
        self.inner.sigma_hat
    }
    #[getter]
    fn z_score(&self) -> f64 {
        self.inner.z_score
    }
    #[getter]
    fn p_value(&self) -> f64 {
        self.inner.p_value
    }
    #[getter]
    fn reject(&self) -> bool {
        self.inner.reject
    }
    #[getter]
    fn calibration(&self) -> String {
        self.inner.calibration.to_string()
    }
    #[getter]
    fn n_permutations(&self) -> usize {
        self.inner.n_permutations
    }
    #[getter]
    fn warning(&self) -> Option<String> {
        self.inner.warning.clone()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = &self.inner;
        let d = PyDict::new(py);
        d.set_item("plr", r.plr)?;
        d.set_item("lambda", r.lambda)?;
        d.set_item("theta_hat", r.theta_hat)?;
        d.set_item("sigma_hat", r.sigma_hat)?;
        d.set_item("z_score", r.z_score)?;
        d.set_item("p_value", r.p_value)?;
        d.set_item("reject", r.reject)?;
        d.set_item("alpha", r.alpha)?;
        d.set_item("calibration", r.calibration.to_string())?;
        d.set_item("n_permutations", r.n_permutations)?;
        d.set_item("rho_mode", r.rho_mode.to_string())?;
        d.set_item("n", r.n)?;
        d.set_item("n0", r.n0)?;
        d.set_item("n1", r.n1)?;
        d.set_item("warning", r.warning.clone())?;
        d.set_item("split_seed", r.split_seed)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let r = &self.inner;
        format!(
            "PlrResult(plr={:e}, lambda={:e}, z_score={:.4}, p_value={:.4}, reject={})",
            r.plr,
            r.lambda,
            r.z_score,
            r.p_value,
            if r.reject { "True" } else { "False" }
        )
    }
}

/// Penalized density fit under the full or additive model.
#[pyclass(frozen, name = "FittedDensity", module = "plrtest")]
struct PyFittedDensity {
    inner: core::FittedDensity,
}

#[pymethods]
impl PyFittedDensity {
    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }
    #[getter]
    fn mass(&self) -> f64 {
        self.inner.mass
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }
    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }
    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs.clone()
    }

    fn eta(&self, x: f64, z: u8) -> PyResult<f64> {
        core::eval_eta(&self.inner, x, z).map_err(err)
    }

    fn density(&self, x: f64, z: u8) -> PyResult<f64> {
        core::eval_density(&self.inner, x, z).map_err(err)
    }

    /// `(constant, main_x, main_z, interaction)`.
    fn anova(&self, x: f64, z: u8) -> PyResult<(f64, f64, f64, f64)> {
        let a = core::anova_components(&self.inner, x, z).map_err(err)?;
        Ok((a.constant, a.main_x, a.main_z, a.interaction))
    }
}

#[pyfunction]
#[pyo3(signature = (data, alpha=0.05, lambda_=None, calibration="asymptotic", permutations=199, seed=0, rho="inverse", m=2, resolution=64, centering="reference"))]
#[allow(clippy::too_many_arguments)]
fn test(
    py: Python<'_>,
    data: &PyDataset,
    alpha: f64,
    lambda_: Option<f64>,
    calibration: &str,
    permutations: usize,
    seed: u64,
    rho: &str,
    m: u32,
    resolution: usize,
    centering: &str,
) -> PyResult<PyPlrResult> {
    let cfg = kernel(m, resolution, centering)?;
    let opts = core::TestOptions {
        alpha,
        lambda: lambda_.map_or(LambdaChoice::Auto, LambdaChoice::Fixed),
        calibration: parse::<Calibration>(calibration)?,
        permutations,
        seed,
        rho_mode: parse::<RhoMode>(rho)?,
    };
    let d = data.inner.clone();
    let inner = py.detach(move || core::test(&d, &opts, &cfg)).map_err(err)?;
    Ok(PyPlrResult { inner })
}

/// Tunes `λ` on one half of the raw sample and tests on the other.
#[pyfunction]
#[pyo3(signature = (x, z, alpha=0.05, calibration="asymptotic", permutations=199, seed=0, map="rank", m=2, resolution=64, centering="reference"))]
#[allow(clippy::too_many_arguments)]
fn split_test(
    py: Python<'_>,
    x: Vec<f64>,
    z: Vec<u8>,
    alpha: f64,
    calibration: &str,
    permutations: usize,
    seed: u64,
    map: &str,
    m: u32,
    resolution: usize,
    centering: &str,
) -> PyResult<PyPlrResult> {
    let cfg = kernel(m, resolution, centering)?;
    let map = parse::<MapMode>(map)?;
    let opts = core::TestOptions {
        alpha,
        calibration: parse::<Calibration>(calibration)?,
        permutations,
        seed,
        ..Default::default()
    };
    let inner = py.detach(move || core::split_test(&x, &z, &opts, map, &cfg)).map_err(err)?;
    Ok(PyPlrResult { inner })
}

#[pyfunction]
#[pyo3(signature = (data, lambda_, model="full", m=2, resolution=64, centering="reference"))]
fn fit(
    py: Python<'_>,
    data: &PyDataset,
    lambda_: f64,
    model: &str,
    m: u32,
    resolution: usize,
    centering: &str,
) -> PyResult<PyFittedDensity> {
    let cfg = kernel(m, resolution, centering)?;
    let kind = match model {
        "full" => ModelKind::Full,
        "reduced" => ModelKind::Reduced,
        other => return Err(PlrError::new_err(format!("unknown model '{other}'"))),
    };
    let d = data.inner.clone();
    let inner = py
        .detach(move || -> core::Result<_> {
            let grams = core::build_grams(&d, &cfg)?;
            let grid = core::joint_grid(cfg.resolution)?;
            core::fit(&d, &grams, kind, lambda_, &grid, &cfg)
        })
        .map_err(err)?;
    Ok(PyFittedDensity { inner })
}

/// Adaptive `λ` from the interaction spectrum.
#[pyfunction]
#[pyo3(signature = (data, m=2, resolution=64, centering="reference"))]
fn adaptive_lambda(data: &PyDataset, m: u32, resolution: usize, centering: &str) -> PyResult<f64> {
    let cfg = kernel(m, resolution, centering)?;
    let grams = core::build_grams(&data.inner, &cfg).map_err(err)?;
    core::adaptive_lambda(&grams.q_interaction, data.inner.len(), &cfg).map_err(err)
}

/// Nonincreasing eigenvalues of the interaction gram.
#[pyfunction]
#[pyo3(signature = (data, m=2, resolution=64, centering="reference"))]
fn interaction_spectrum(data: &PyDataset, m: u32, resolution: usize, centering: &str) -> PyResult<Vec<f64>> {
    let cfg = kernel(m, resolution, centering)?;
    let grams = core::build_grams(&data.inner, &cfg).map_err(err)?;
    Ok(core::Spectrum::from_matrix(&grams.q_interaction, cfg.eig_floor)
        .map_err(err)?
        .eigenvalues)
}

#[pyfunction]
#[pyo3(signature = (raw, mode="rank"))]
fn map_domain(raw: Vec<f64>, mode: &str) -> PyResult<Vec<f64>> {
    core::map_domain(&raw, parse::<MapMode>(mode)?).map_err(err)
}

#[pyfunction]
fn separation_rate(n: u64, m: u32, d: u32) -> f64 {
    core::separation_rate(n, m, d)
}

#[pyfunction]
#[pyo3(signature = (data, m=2))]
fn mmd_biased(data: &PyDataset, m: u32) -> PyResult<f64> {
    core::baselines::mmd_biased(&data.inner, &kernel(m, 64, "reference")?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (data, m=2))]
fn score_statistic(data: &PyDataset, m: u32) -> PyResult<f64> {
    core::baselines::score_statistic(&data.inner, &kernel(m, 64, "reference")?).map_err(err)
}

/// `(D, p_value)` with the asymptotic Kolmogorov tail.
#[pyfunction]
fn ks_test(data: &PyDataset) -> PyResult<(f64, f64)> {
    let r = core::baselines::ks_test(&data.inner, core::baselines::KsCalibration::Asymptotic).map_err(err)?;
    Ok((r.statistic, r.p_value))
}

/// Raw `(x, z)` draws from one of the six simulation settings.
#[pyfunction]
fn generate(setting: u8, delta: f64, n_per_group: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<u8>)> {
    let spec = core::SettingSpec {
        id: setting,
        delta,
        n_per_group,
    };
    core::generate(&spec, seed).map_err(err)
}

/// Runs a size/power grid and returns the CSV table.
#[pyfunction]
#[pyo3(signature = (settings, deltas, sizes, methods=vec!["plr_asymptotic".to_string()], trials=200, seed=0, permutations=199))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    settings: Vec<u8>,
    deltas: Vec<f64>,
    sizes: Vec<usize>,
    methods: Vec<String>,
    trials: usize,
    seed: u64,
    permutations: usize,
) -> PyResult<String> {
    let methods = methods.iter().map(|s| parse::<Method>(s)).collect::<PyResult<Vec<_>>>()?;
    let cfg = core::ExperimentConfig {
        settings,
        deltas,
        sizes,
        methods,
        trials,
        master_seed: seed,
        permutations,
        ..Default::default()
    };
    py.detach(move || core::run_experiment(&cfg).and_then(|t| t.to_csv_string()))
        .map_err(err)
}

#[pymodule]
fn plrtest(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PlrError", m.py().get_type::<PlrError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPlrResult>()?;
    m.add_class::<PyFittedDensity>()?;
    m.add_function(wrap_pyfunction!(test, m)?)?;
    m.add_function(wrap_pyfunction!(split_test, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(interaction_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(map_domain, m)?)?;
    m.add_function(wrap_pyfunction!(separation_rate, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_biased, m)?)?;
    m.add_function(wrap_pyfunction!(score_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(ks_test, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
