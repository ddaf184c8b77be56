use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("non-finite value in {what} at t = {t}")]
    NonFinite { what: String, t: f64 },

    #[error("t = {t} outside sampled range [{lo}, {hi}] of {what}")]
    OutOfGrid { what: String, t: f64, lo: f64, hi: f64 },

    #[error("time {t} outside window [{lo}, {hi}]")]
    OutOfWindow { t: f64, lo: f64, hi: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("integrator step size underflow near t = {t}")]
    StepUnderflow { t: f64 },

    #[error("evolution operator norm exceeded {limit:e} at t = {t}")]
    BlowUp { t: f64, limit: f64 },

    #[error("projector rank changes across the grid ({0})")]
    RankInstability(String),

    #[error("indeterminate: {0}")]
    Indeterminate(String),

    #[error("size cap exceeded: {what} needs {needed} > {cap}")]
    SizeCap { what: String, needed: usize, cap: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("tail tolerance {requested:e} not reachable in window; achievable bound {achievable:e}")]
    WindowTooShort { requested: f64, achievable: f64 },

    #[error("growth detected while solving block {block}: {detail}")]
    GrowthDetected { block: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
