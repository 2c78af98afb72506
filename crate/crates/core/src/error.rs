// Error classes shared across the crate.

use alloc::string::String;
use core::fmt;

/// Error type for every fallible operation in the crate.
///
/// Variants correspond to the failure classes of the public contracts:
/// shape mismatches, invalid numeric domains, broken call contracts,
/// invalid configurations, bad user inputs, and unparseable task strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes are incompatible; the message names both shapes.
    Dimension(String),
    /// Input lies outside the mathematical domain of the operation.
    Domain(String),
    /// An API contract was violated (e.g. backward on a non-scalar loss).
    Contract(String),
    /// A configuration is internally inconsistent.
    Config(String),
    /// A runtime input is invalid (e.g. token id out of range).
    Input(String),
    /// A token stream does not parse under the task grammar.
    Grammar(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Grammar(m) => write!(f, "grammar error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
