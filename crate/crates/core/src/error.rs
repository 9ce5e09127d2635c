use alloc::string::String;

/// Errors raised by the estimation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("entry {index} of the instrument is {value}, expected 0 or 1")]
    NonBinaryInstrument { index: usize, value: f64 },

    #[error("entry {index} of {what} is not finite")]
    NonFinite { what: &'static str, index: usize },

    #[error("group {group} is empty or group indices are not contiguous")]
    EmptyGroup { group: usize },

    #[error("group {group} has no instrument variation (n_g = {size}, m_g = {active})")]
    DegenerateGroup { group: usize, size: usize, active: usize },

    #[error(
        "group {group} violates the group-size requirement (n_g = {size}, m_g = {active}); \
         need at least two units with and without an active instrument"
    )]
    GroupSizeViolation { group: usize, size: usize, active: usize },

    #[error("cell (group {group}, instrument {status}) has size {size}; the Hartley inverse needs at least 3")]
    SmallCell { group: usize, status: u8, size: usize },

    #[error("cell (group {group}, instrument {status}) has size {size}; at least 2 required")]
    CellTooSmall { group: usize, status: u8, size: usize },

    #[error("group {group} has size {size}; at least 3 required")]
    GroupTooSmall { group: usize, size: usize },

    #[error("design is empty after filtering")]
    EmptyDesign,

    #[error(
        "denominator T'AT = {value:e} is numerically zero; identification is too weak for the \
         Wald statistic, use the identification-robust test instead"
    )]
    WeakDenominator { value: f64 },

    #[error("variance estimate {value:e} is not positive; use the identification-robust test instead")]
    NonPositiveVariance { value: f64 },

    #[error("missing population input `{0}` for the requested estimand")]
    MissingInput(&'static str),

    #[error("estimator {0} is not available on the saturated block path")]
    Unsupported(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;
