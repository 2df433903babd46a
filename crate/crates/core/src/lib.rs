//! Nonparametric series quantile regression for partially linear models.
pub mod basis;
pub mod cli;
pub mod dataio;
pub mod functional;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod qrfit;
pub mod rearrange;
pub mod synth;

pub use basis::{BasisError, BasisSpec, BSplineBasis, FourierBasis, IndicatorBasis, PolynomialBasis, TauGrid};
pub use dataio::{build_design, load_csv, DataError, Dataset, DesignMatrix, ModelSpec};
pub use functional::{apply_load, build_load, LoadMatrix, LoadSpec};
pub use inference::{infer, InferenceConfig, InferenceResult, Process, SeMode};
pub use qrfit::{fit_process, fit_qr, ProcessOptions, QrProblem, QrSolution};
pub use rearrange::{rearrange, RearrangeDims, RearrangeSpec};
