use alloc::string::String;

/// Errors for contract violations and numerical failures.
///
/// Shape and dimension mismatches are always reported through this type, not
/// by panicking: callers assemble networks and worlds from user-editable
/// config, so a bad shape is an input error, not a bug.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An operation received operands whose shapes cannot be combined.
    #[error("{context}: shape mismatch, expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        context: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },

    /// A gradient or parameter update produced a non-finite value.
    /// `layer` is the index within the network that owns the bad value.
    #[error("non-finite value in {context} at layer {layer}")]
    NonFinite { context: &'static str, layer: usize },

    /// A specification failed validation before any numerics ran.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// The invertibility certificate found a layer whose round trip exceeds
    /// the tolerance.
    #[error("mixing layer {layer} fails round-trip certificate: max error {max_err:e}")]
    Certificate { layer: usize, max_err: f64 },

    /// A point handed to the exact un-mixing routine does not lie on the
    /// world's data manifold.
    #[error("point off the data manifold: projection residual {residual:e} exceeds {tol:e}")]
    OffManifold { residual: f64, tol: f64 },

    /// A domain index outside `0..n_domains`.
    #[error("domain index {domain} out of range for {n_domains} domains")]
    DomainOutOfRange { domain: usize, n_domains: usize },

    /// Encoded bytes that do not describe a valid object.
    #[error("decode error: {0}")]
    Decode(String),

    /// A numerical routine could not produce a usable result.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected_rows: expected.0,
            expected_cols: expected.1,
            got_rows: got.0,
            got_cols: got.1,
        }
    }
}
