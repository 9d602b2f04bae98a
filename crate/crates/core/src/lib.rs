//! Tensor dictionary learning toolkit for multi-spectral image denoising.
//!
//! Implements the LTDL pipeline: overlapping full-band block extraction,
//! k-means++ grouping, shared spatial/spectral overcomplete dictionaries with
//! a nearly-low-rank Tucker penalty, solved by ADMM, plus the standard MSI
//! quality indices and a synthetic dictionary-recovery experiment.

pub mod config;
pub mod dictionary;
pub mod error;
pub mod grouping;
pub mod io;
pub mod lowrank;
pub mod metrics;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use config::PartialConfig;
pub use dictionary::{DictionaryPair, DualVars};
pub use error::{LtdlError, Result};
pub use grouping::{BlockGrid, Msi, TensorGroup};
pub use lowrank::{RankTriple, TuckerFactors};
pub use metrics::MetricReport;
pub use solver::{GroupState, LtdlConfig, SolverReport};
pub use synth::SynthSpec;
pub use tensor::{kron, norms, Matrix, Tensor3};
