//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor, model, I/O and training failures.
#[derive(Error, Debug)]
pub enum HprnError {
    /// Shapes that should agree do not.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// A binary file failed to parse.
    #[error("parse error in {path} at offset {offset}: {msg}")]
    Parse {
        path: String,
        offset: u64,
        msg: String,
    },

    /// A metric is undefined for the given inputs.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Training aborted; carries a diagnostics dump.
    #[error("training aborted at step {step}: {msg} (lr={lr}, l1={l1}, sopc={sopc}, total={total})")]
    TrainingAborted {
        step: usize,
        msg: String,
        lr: f64,
        l1: f64,
        sopc: f64,
        total: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl HprnError {
    pub fn dimension(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        HprnError::Dimension {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        HprnError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HprnError>;
