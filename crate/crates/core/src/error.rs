use thiserror::Error;

use crate::discrete_calculus::NodeSet;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh needs at least 2 interior nodes, got {0}")]
    TooFewNodes(usize),
    #[error("region nesting violated: {0}")]
    RegionNesting(String),
    #[error("region {region} contains no primal node at N={n}")]
    RegionEmpty { region: &'static str, n: usize },
    #[error("node set mismatch: expected {expected:?}, found {found:?}")]
    NodeSetMismatch { expected: NodeSet, found: NodeSet },
    #[error("length {len} does not match node set {tag:?} of size {expected}")]
    LengthMismatch {
        tag: NodeSet,
        len: usize,
        expected: usize,
    },
    #[error("closure index {0} is not a boundary node")]
    NotBoundary(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("time-weight bridge is not monotone (min derivative {0:e})")]
    NonMonotoneBridge(f64),
    #[error("inadmissible parameters: lambda*h*(delta*T)^-m = {value:e} exceeds eps0 = {eps0:e}")]
    Inadmissible { value: f64, eps0: f64 },
    #[error("weight exponent {0:e} is outside the representable f64 range")]
    WeightOverflow(f64),
    #[error("tree depth {0} outside 1..=14")]
    TreeDepth(usize),
    #[error("process shape mismatch: {0}")]
    Shape(String),
    #[error("measured contraction factor {factor:.4} >= 1 after {iterations} iterations; increase lambda")]
    NoContraction { factor: f64, iterations: usize },
    #[error("fixed-point iteration hit max_iter = {0}")]
    PicardMaxIter(usize),
    #[error("nonlinearity check failed: {0}")]
    Nonlinearity(String),
    #[error("h = {h} exceeds h1 = {h1}")]
    ScheduleRejected { h: f64, h1: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
