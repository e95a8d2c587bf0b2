//! Error types, one small enum per subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhotonicsError {
    /// The quadrature grid does not meet the resolution/span preconditions.
    #[error("quadrature grid under-resolved: {0}")]
    GridUnderresolved(String),
    /// The two-parameter envelope cannot represent the computed interferogram.
    #[error("dip fit diverged: residual rms {residual_rms} exceeds 0.05")]
    FitDiverged { residual_rms: f64 },
    #[error("invalid joint spectral amplitude: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("cannot move a fixed delay line")]
    FixedDelayLine,
    #[error("invalid plant configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum ControlError {
    /// The scanned response is too flat to contain an interference dip.
    #[error("no dip found: scan contrast {contrast:.4} below 0.1")]
    NoDip { contrast: f64 },
    #[error("lock duration must cover at least one dwell")]
    DurationTooShort,
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    /// No bin stands far enough above the background to fit.
    #[error("no peak: max bin {max_count} below background {background:.1} + 5*sqrt(background)")]
    NoPeak { max_count: u64, background: f64 },
    #[error("gaussian fit did not converge within {0} iterations")]
    NonConvergence(usize),
    /// The fitted center left the configured search span.
    #[error("fitted center {center_fs} fs outside the search span")]
    PeakOutsideSpan { center_fs: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetrologyError {
    #[error("series is empty")]
    EmptySeries,
    /// Raised per averaging factor when N < 3m + 1.
    #[error("insufficient data for m = {m}: need at least {needed} samples, have {have}")]
    InsufficientData { m: usize, needed: usize, have: usize },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    /// One entry per violated constraint; collected, not fail-fast.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("output error at {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
