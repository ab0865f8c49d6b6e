use thiserror::Error;

use crate::spectral::Representation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("field is in {found:?} representation, expected {expected:?}")]
    WrongRepresentation {
        expected: Representation,
        found: Representation,
    },
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("sample times must be strictly increasing (violated at index {index})")]
    NonMonotoneTimes { index: usize },
    #[error("(p, r) = ({p}, {r}) is not admissible in dimension {dim}")]
    InadmissiblePair { p: f64, r: f64, dim: usize },
    #[error("solution blew up at t = {time}: {detail}")]
    BlowUp { time: f64, detail: String },
    #[error("control bin edge {edge} is not aligned with the solver step {dt}")]
    BinMisalignment { edge: f64, dt: f64 },
    #[error("control does not match the measure: {0}")]
    ControlShape(String),
    #[error("control is unbounded or not finite")]
    UnboundedControl,
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("profile `{profile}` is not twice differentiable at theta = {theta}")]
    NotDifferentiable { profile: String, theta: f64 },
    #[error("root solve failed: {0}")]
    RootSolve(String),
    #[error("flow integration overflowed: {0}")]
    FlowOverflow(String),
    #[error("target level {level} is out of reach: {detail}")]
    LevelOutOfReach { level: f64, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
