//! Multidimensional total least squares with linear equality constraints:
//! solver, condition numbers and their bounds, matrix-free estimation, and
//! perturbation studies.

pub mod dense;
pub mod cli;
pub mod conditioning;
pub mod error;
pub mod generate;
pub mod kron;
pub mod matfree;
pub mod perturb;
pub mod tlse;

pub use error::{Gate, Result, TlseError};
pub use tlse::{solve, Dims, SolveOptions, TlseDecomposition, TlseProblem, TlseSolution};
