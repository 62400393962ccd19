use alloc::string::String;

/// Errors produced by the estimation library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid correspondence: {0}")]
    InvalidCorrespondence(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("degenerate sample: design matrix rank below 8")]
    Degenerate,
    #[error("no pose candidate places any point in front of both cameras")]
    PoseUndecidable,
    #[error("insufficient data: {needed} correspondences required, {available} available")]
    InsufficientData { needed: usize, available: usize },
    #[error("refinement underdetermined: {effective} effective points for {dof} degrees of freedom")]
    RefineUnderdetermined { effective: usize, dof: usize },
    #[error("cannot refine the zero model")]
    ZeroModel,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration required for essential-matrix estimation")]
    MissingCalibration,
    #[error("weights: {0}")]
    Weights(String),
    #[error("no forward tape recorded")]
    MissingTape,
    #[error("empty error list")]
    EmptyErrors,
    #[error("infeasible synthetic specification: {0}")]
    InfeasibleSynthetic(&'static str),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
