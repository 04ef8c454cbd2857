use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Errors produced by the core numerics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("direction ({x}, {y}, {z}) is not unit length (norm {norm})")]
    NonUnitDirection { x: f64, y: f64, z: f64, norm: f64 },

    #[error("unsupported SH order {0}; expected an even order in 0..=8")]
    InvalidOrder(usize),

    #[error("SH order mismatch: {expected} vs {found}")]
    OrderMismatch { expected: usize, found: usize },

    #[error("expected {expected} SH coefficients for order {order}, got {found}")]
    CoefficientCount { order: usize, expected: usize, found: usize },

    #[error("least-squares system is rank deficient at SH order {order}")]
    Singular { order: usize },

    #[error("{context}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{context}: {expected} entries expected, {found} found")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("gradient scheme has no b0 volumes")]
    NoB0,

    #[error("no volumes within {tolerance} s/mm^2 of b={target}; available shells: {available:?}")]
    ShellNotFound {
        target: f64,
        tolerance: f64,
        available: Vec<f64>,
    },

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("all pairs are tied; no signed-rank test possible")]
    AllTied,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;
