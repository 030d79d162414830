use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure: non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
