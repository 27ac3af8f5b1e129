use std::io;

use thiserror::Error;

/// Errors raised by the core numerical and training routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },

    #[error("sym_eig: input is not symmetric (max defect {defect:e})")]
    NotSymmetric { defect: f64 },

    #[error("sym_eig: no convergence after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("gram matrix undefined for all-zero activations")]
    ZeroActivations,

    #[error("gram input for layer {layer} is not Frobenius-normalized (norm {norm})")]
    NotNormalized { layer: usize, norm: f64 },

    #[error("non-finite value encountered at training iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Failures specific to reading and writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),

    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
