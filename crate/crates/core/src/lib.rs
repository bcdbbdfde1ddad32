//! Penalized likelihood ratio two-sample test on `[0, 1] × {0, 1}`.

pub mod baselines;
pub mod data;
pub mod estimator;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod plr;
pub mod quadrature;
pub mod rng;
pub mod simulate;

pub use data::{map_domain, Dataset, MapMode};
pub use error::{PlrError, Result};
pub use faer::Mat;
pub use kernels::{build_grams, Centering, GramSet, KernelBasis, KernelConfig, KernelPart};
pub use quadrature::{gauss_legendre_01, joint_grid, QuadGrid};
pub use estimator::{anova_components, eval_density, eval_eta, fit, AnovaComponents, FittedDensity, ModelKind};
pub use plr::{
    adaptive_lambda, null_params, permutation_calibrate, plr_statistic, separation_rate, split_test, test,
    Calibration, LambdaChoice, NullParams, PlrResult, RhoMode, Spectrum, TestOptions,
};
pub use simulate::{generate, run_experiment, ExperimentConfig, Method, PowerRow, PowerTable, SettingSpec};
