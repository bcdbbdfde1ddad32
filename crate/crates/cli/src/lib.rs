//! Subcommands behind the `plrtest` binary.

use clap::{Args, Parser, Subcommand};
use plrtest::plr::Spectrum;
use plrtest::simulate::{FULL_SIZES, FULL_TRIALS};
use plrtest::{
    adaptive_lambda, build_grams, map_domain, split_test, test, Calibration, Centering, Dataset, ExperimentConfig,
    KernelConfig, LambdaChoice, MapMode, Method, PlrError, PlrResult, RhoMode, TestOptions,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Plr(#[from] PlrError),
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Input { path: String, msg: String },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "plrtest", version, about = "Penalized likelihood ratio two-sample test")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test a two-column `x,z` file for a difference between the groups.
    Test(TestArgs),
    /// Run a seeded size/power grid and write the table as CSV.
    Simulate(SimulateArgs),
    /// Print the interaction spectrum and the adaptive smoothing parameter.
    Spectrum(SpectrumArgs),
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    /// Sobolev smoothness order (1 or 2).
    #[arg(long, default_value_t = 2)]
    pub m: u32,
    /// Gauss-Legendre nodes per label.
    #[arg(long, default_value_t = plrtest::quadrature::DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// reference or empirical.
    #[arg(long, default_value = "reference")]
    pub centering: Centering,
}

impl KernelArgs {
    pub fn config(&self) -> KernelConfig {
        KernelConfig {
            m: self.m,
            resolution: self.resolution,
            centering: self.centering,
            ..KernelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    pub path: PathBuf,
    /// rank or minmax.
    #[arg(long, default_value = "rank")]
    pub map: MapMode,
    /// `auto` or a positive value.
    #[arg(long, default_value = "auto")]
    pub lambda: LambdaChoice,
    /// Tune λ on the full sample instead of a held-out half.
    #[arg(long)]
    pub no_split: bool,
    /// asymptotic or permutation.
    #[arg(long, default_value = "asymptotic")]
    pub calibration: Calibration,
    #[arg(long, default_value_t = 199)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// inverse or literal.
    #[arg(long, default_value = "inverse")]
    pub rho: RhoMode,
    #[arg(long)]
    pub json: bool,
    /// Exit with status 2 when the null is rejected.
    #[arg(long)]
    pub exit_code_signal: bool,
    #[command(flatten)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Comma-separated setting ids in 1..=6.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub settings: Vec<u8>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub deltas: Vec<f64>,
    /// Per-group sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "125,250,500,1000")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "plr_asymptotic")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = plrtest::simulate::DESK_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 199)]
    pub permutations: usize,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// The eight-size grid with 1000 trials per cell.
    #[arg(long)]
    pub full: bool,
    /// Also write one SVG per (setting, delta) beside the CSV.
    #[arg(long)]
    pub svg: bool,
    /// Fill the runtime column (the table is then no longer reproducible).
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SpectrumArgs {
    pub path: PathBuf,
    #[arg(long, default_value = "rank")]
    pub map: MapMode,
    /// Only print the largest `top` eigenvalues.
    #[arg(long)]
    pub top: Option<usize>,
    /// Write eigenvalues and the λ grid to this CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub kernel: KernelArgs,
}

/// A test result plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub input: String,
    pub map: MapMode,
    pub m: u32,
    pub resolution: usize,
    pub centering: Centering,
    pub seed: u64,
    pub split: bool,
    pub version: String,
    pub result: PlrResult,
}

impl TestReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let r = &self.result;
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".into());
        let lines = [
            ("input", self.input.clone()),
            ("map", self.map.to_string()),
            ("m", self.m.to_string()),
            ("resolution", self.resolution.to_string()),
            ("centering", self.centering.to_string()),
            ("seed", self.seed.to_string()),
            ("split", self.split.to_string()),
            ("n", format!("{} ({} / {})", r.n, r.n0, r.n1)),
            ("lambda", format!("{:e}", r.lambda)),
            ("plr", format!("{:e}", r.plr)),
            ("theta_hat", r.theta_hat.to_string()),
            ("sigma_hat", r.sigma_hat.to_string()),
            ("z_score", r.z_score.to_string()),
            ("p_value", r.p_value.to_string()),
            ("calibration", r.calibration.to_string()),
            ("permutations", r.n_permutations.to_string()),
            ("alpha", r.alpha.to_string()),
            ("reject", r.reject.to_string()),
            ("warning", opt(&r.warning)),
            ("version", self.version.clone()),
        ];
        lines.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }
}

/// Reads a headed `x,z` file.
pub fn read_xz(path: &Path) -> CliResult<(Vec<f64>, Vec<u8>)> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| CliError::Read {
        path: shown.clone(),
        source,
    })?;
    let bad = |msg: String| CliError::Input {
        path: shown.clone(),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != ["x", "z"] {
        return Err(bad(format!("expected header 'x,z', found '{}'", header.join(","))));
    }
    let (mut x, mut z) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        let xv: f64 = rec[0]
            .parse()
            .map_err(|_| bad(format!("line {line}: x '{}' is not a number", &rec[0])))?;
        if !xv.is_finite() {
            return Err(bad(format!("line {line}: x must be finite")));
        }
        let zv = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("line {line}: z '{other}' is not 0 or 1"))),
        };
        x.push(xv);
        z.push(zv);
    }
    if x.is_empty() {
        return Err(bad("no data rows".into()));
    }
    Ok((x, z))
}

fn require_two_groups(z: &[u8]) -> CliResult<()> {
    if z.iter().all(|&v| v == z[0]) {
        return Err(PlrError::SingleGroup.into());
    }
    Ok(())
}

/// The library call behind `plrtest test`.
pub fn run_test(args: &TestArgs) -> CliResult<TestReport> {
    let (raw_x, z) = read_xz(&args.path)?;
    require_two_groups(&z)?;
    let cfg = args.kernel.config();
    let opts = TestOptions {
        alpha: args.alpha,
        lambda: args.lambda,
        calibration: args.calibration,
        permutations: args.permutations,
        seed: args.seed,
        rho_mode: args.rho,
    };
    let split = matches!(args.lambda, LambdaChoice::Auto) && !args.no_split;
    let result = if split {
        split_test(&raw_x, &z, &opts, args.map, &cfg)?
    } else {
        let data = Dataset::new(map_domain(&raw_x, args.map)?, z)?;
        test(&data, &opts, &cfg)?
    };
    Ok(TestReport {
        input: args.path.display().to_string(),
        map: args.map,
        m: cfg.m,
        resolution: cfg.resolution,
        centering: cfg.centering,
        seed: args.seed,
        split,
        version: env!("CARGO_PKG_VERSION").into(),
        result,
    })
}

pub fn experiment_config(args: &SimulateArgs) -> ExperimentConfig {
    let (sizes, trials, methods) = if args.full {
        (
            FULL_SIZES.to_vec(),
            FULL_TRIALS,
            vec![Method::PlrAsymptotic, Method::PlrPermutation, Method::MmdPerm, Method::Ks],
        )
    } else {
        (args.sizes.clone(), args.trials, args.methods.clone())
    };
    ExperimentConfig {
        settings: args.settings.clone(),
        deltas: args.deltas.clone(),
        sizes,
        methods,
        trials,
        master_seed: args.seed,
        permutations: args.permutations,
        timing: args.timing,
        kernel: args.kernel.config(),
        ..ExperimentConfig::default()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

pub fn run_simulate<W: Write>(args: &SimulateArgs, out: &mut W) -> CliResult<()> {
    if args.svg && args.out.is_none() {
        return Err(CliError::Usage("--svg needs --out".into()));
    }
    let cfg = experiment_config(args);
    let table = plrtest::run_experiment(&cfg)?;
    let csv = table.to_csv_string()?;
    match &args.out {
        None => out.write_all(csv.as_bytes())?,
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            if args.svg {
                let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("power");
                for p in table.write_svgs(dir, stem)? {
                    writeln!(out, "wrote {}", p.display())?;
                }
            }
            writeln!(out, "wrote {}", path.display())?;
        }
    }
    Ok(())
}

/// Eigenvalues, null moments over a λ grid and the adaptive λ.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub grid: Vec<(f64, f64, f64)>,
    pub lambda_star: f64,
    pub n: usize,
}

pub const LAMBDA_GRID: [f64; 9] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

pub fn spectrum_report(args: &SpectrumArgs) -> CliResult<SpectrumReport> {
    let (raw_x, z) = read_xz(&args.path)?;
    if z.iter().all(|&v| v == z[0]) {
        return Err(PlrError::DegenerateCalibration("single group, the interaction spectrum vanishes".into()).into());
    }
    let cfg = args.kernel.config();
    let data = Dataset::new(map_domain(&raw_x, args.map)?, z)?;
    let n = data.len();
    let q = build_grams(&data, &cfg)?.q_interaction;
    let spectrum = Spectrum::from_matrix(&q, cfg.eig_floor)?;
    let grid = LAMBDA_GRID
        .iter()
        .map(|&l| {
            let (t, s) = spectrum.moments(l, n, RhoMode::Inverse);
            (l, t, s)
        })
        .collect();
    let lambda_star = adaptive_lambda(&q, n, &cfg)?;
    Ok(SpectrumReport {
        eigenvalues: spectrum.eigenvalues,
        grid,
        lambda_star,
        n,
    })
}

pub fn run_spectrum<W: Write>(args: &SpectrumArgs, out: &mut W) -> CliResult<()> {
    let rep = spectrum_report(args)?;
    let shown = args.top.unwrap_or(rep.eigenvalues.len()).min(rep.eigenvalues.len());
    writeln!(out, "n: {}", rep.n)?;
    writeln!(out, "eigenvalues ({} of {}):", shown, rep.eigenvalues.len())?;
    for (i, g) in rep.eigenvalues.iter().take(shown).enumerate() {
        writeln!(out, "{:>6} {:.12e}", i + 1, g)?;
    }
    writeln!(out, "{:>12} {:>14} {:>14}", "lambda", "theta_hat", "sigma_hat")?;
    for (l, t, s) in &rep.grid {
        writeln!(out, "{l:>12e} {t:>14.6} {s:>14.6}")?;
    }
    writeln!(out, "lambda_star: {:e}", rep.lambda_star)?;
    if let Some(path) = &args.csv {
        let mut buf = String::from("kind,index,lambda,value,theta_hat,sigma_hat\n");
        for (i, g) in rep.eigenvalues.iter().enumerate() {
            buf.push_str(&format!("eigenvalue,{},,{g},,\n", i + 1));
        }
        for (l, t, s) in &rep.grid {
            buf.push_str(&format!("grid,,{l},,{t},{s}\n"));
        }
        buf.push_str(&format!("lambda_star,,{},,,\n", rep.lambda_star));
        write_file(path, buf.as_bytes())?;
    }
    Ok(())
}

/// Honours `PLR_THREADS` by sizing the global worker pool.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("PLR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("PLR_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

/// Runs one parsed command and returns the process exit code.
pub fn run<W: Write>(cli: &Cli, out: &mut W) -> CliResult<i32> {
    match &cli.command {
        Command::Test(args) => {
            let report = run_test(args)?;
            if args.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                out.write_all(report.to_text().as_bytes())?;
            }
            Ok(if args.exit_code_signal && report.result.reject { 2 } else { 0 })
        }
        Command::Simulate(args) => run_simulate(args, out).map(|_| 0),
        Command::Spectrum(args) => run_spectrum(args, out).map(|_| 0),
    }
}
