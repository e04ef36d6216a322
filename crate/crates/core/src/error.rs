use crate::prelude::*;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("unknown area `{0}`")]
    UnknownArea(String),

    #[error("adjacency graph is disconnected; components: {}", format_components(.0))]
    Disconnected(Vec<Vec<String>>),

    #[error("certainty unit: unit {index} has size {size} exceeding the sampling interval {interval}")]
    CertaintyUnit {
        index: usize,
        size: f64,
        interval: f64,
    },

    #[error("no data in domain")]
    NoData,

    #[error("variance not estimable from {0} cluster(s)")]
    VarianceNotEstimable(usize),

    #[error("estimate {0} lies on the boundary of [0, 1]; logit undefined")]
    Boundary(f64),

    #[error("singular cross-product matrix (condition number {0:e})")]
    Singular(f64),

    #[error("Cholesky factorisation failed: {0}")]
    Cholesky(String),

    #[error("non-finite log posterior {context}; parameters: {snapshot:?}")]
    NonFinite { context: String, snapshot: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    /// Failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::Cholesky(_) | Error::NonFinite { .. } | Error::Numeric(_)
        )
    }
}

fn format_components(components: &[Vec<String>]) -> String {
    components
        .iter()
        .map(|c| format!("{{{}}}", c.join(", ")))
        .collect::<Vec<_>>()
        .join(" ")
}
