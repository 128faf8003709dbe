use alloc::string::String;
use core::fmt;

/// Error type shared by every module in the crate.
///
/// The variants mirror how failures are reported at the CLI boundary:
/// configuration problems, bad call arguments, shape mismatches, numeric
/// blow-ups, and contract violations detected at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Invalid configuration (bad ranges, empty strata, unknown keys).
    Config(String),
    /// Invalid argument to an operation (out-of-range scalar, bad length).
    Parameter(String),
    /// Tensor/raster shape mismatch.
    Dimension(String),
    /// Non-finite value where the contract requires finiteness.
    Numeric(String),
    /// A caller-side contract was violated (e.g. non-normalized input).
    Contract(String),
    /// The task is degenerate (e.g. single-class training set).
    Degenerate(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Config(m) => write!(f, "config: {m}"),
            CoreError::Parameter(m) => write!(f, "parameter: {m}"),
            CoreError::Dimension(m) => write!(f, "dimension: {m}"),
            CoreError::Numeric(m) => write!(f, "numeric: {m}"),
            CoreError::Contract(m) => write!(f, "contract: {m}"),
            CoreError::Degenerate(m) => write!(f, "degenerate: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

macro_rules! err_ctor {
    ($name:ident, $variant:ident) => {
        pub fn $name(msg: impl fmt::Display) -> CoreError {
            CoreError::$variant(alloc::format!("{msg}"))
        }
    };
}

impl CoreError {
    err_ctor!(config, Config);
    err_ctor!(parameter, Parameter);
    err_ctor!(dimension, Dimension);
    err_ctor!(numeric, Numeric);
    err_ctor!(contract, Contract);
    err_ctor!(degenerate, Degenerate);
}
