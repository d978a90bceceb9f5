use core::fmt;

use alloc::string::String;

/// Errors produced by the core kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Image, mask or patch dimensions are inconsistent.
    Geometry(String),
    /// A configuration or call parameter is out of range.
    Parameter(String),
    /// Shapes of matrices handed to the model or the enhancement do not line up.
    Shape(String),
    /// Condition sources cannot be fused.
    Fusion(String),
    /// A requested source is not present in the unified tokens.
    Lookup(String),
    /// A crop mask selects no pixel.
    EmptyRegion,
    /// A dense grid has no active cell.
    EmptyStructure,
    /// An index is outside its valid range.
    OutOfBounds { index: usize, bound: usize },
    /// A non-finite value appeared in input or during integration.
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Geometry(m) => write!(f, "geometry error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Fusion(m) => write!(f, "fusion error: {m}"),
            Error::Lookup(m) => write!(f, "lookup error: {m}"),
            Error::EmptyRegion => f.write_str("mask selects an empty region"),
            Error::EmptyStructure => f.write_str("grid has no active voxel"),
            Error::OutOfBounds { index, bound } => {
                write!(f, "index {index} out of bounds (must be < {bound})")
            }
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    /// True for errors caused by non-finite values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
