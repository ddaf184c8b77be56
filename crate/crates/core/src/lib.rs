//! Numerical toolkit for nonautonomous linear systems `x' = A(t)x`:
//! nonuniform dichotomy spectra, block reduction by Lyapunov transforms,
//! and finite-jet normal forms of polynomial perturbations.

pub mod builtin;
pub mod config;
pub mod documents;
pub mod error;
pub mod evolution;
pub mod expr;
pub mod integrate;
pub mod linalg;
pub mod normalform;
pub mod pipeline;
pub mod poly;
pub mod polyops;
pub mod reduction;
pub mod report;
pub mod spectrum;
pub mod system;

pub use config::{parse_system, print_system, ConfigError};
pub use error::{Error, Result};
pub use evolution::{build_evolution, EvolutionOperator, ShiftedOperator, TimeGrid};
pub use report::{RunManifest, Tolerances};
pub use system::{CoefficientField, SampleGrid, SystemSpec, Term, TimeExpression};
pub use normalform::{normal_form, NormalFormConfig, NormalFormResult};
pub use pipeline::{analyze, normalize, reduce, Analysis, PipelineOptions};
pub use reduction::{block_diagonalize, BlockSystem, ReductionConfig};
pub use spectrum::{scan_spectrum, DichotomyTester, Interval, SpectrumConfig, SpectrumResult};
