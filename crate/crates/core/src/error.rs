use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("kernel has zero total jump rate")]
    NoMotion,
    #[error("numerical failure at site {site}, step {step}")]
    NumericalFailure { site: usize, step: u64 },
    #[error("event rate overflow at level {level}: rate {rate}")]
    RateOverflow { level: usize, rate: f64 },
    #[error("ancestry log integrity error at record {record}: {reason}")]
    Integrity { record: usize, reason: String },
    #[error("ultrametric violated: d({i},{j}) = {dij} > max(d({i},{k}), d({k},{j})) = {bound}")]
    NotUltrametric {
        i: usize,
        j: usize,
        k: usize,
        dij: f64,
        bound: f64,
    },
    #[error("estimator did not converge: {0}")]
    NonConvergence(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("compute budget exceeded: need {needed} work units, cap {cap}")]
    Budget { needed: f64, cap: f64 },
}

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
