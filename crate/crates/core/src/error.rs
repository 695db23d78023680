use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),

    #[error("invalid share {value} for product {product} in market {market}: {reason}")]
    InvalidShare {
        product: usize,
        market: usize,
        value: f64,
        reason: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("dimension error: {factors} factors requested but min(J, T) = {max}")]
    TooManyFactors { factors: usize, max: usize },

    #[error("numeric overflow while evaluating shares in market {market}")]
    NumericOverflow { market: usize },

    #[error(
        "share inversion did not converge in market {market} after {iterations} iterations \
         (residual {residual:e})"
    )]
    NoConvergence {
        market: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("collinear design: smallest eigenvalue of (x,z)'(x,z)/JT is {min_eigenvalue:e}")]
    CollinearDesign { min_eigenvalue: f64 },

    #[error("under-identified: {instruments} instruments but at least {required} required")]
    UnderIdentified { instruments: usize, required: usize },

    #[error("singular weight matrix: eigenvalue ratio {ratio:e}")]
    SingularWeight { ratio: f64 },

    #[error("G W G' is ill-conditioned (condition number {condition:e})")]
    SingularG { condition: f64 },

    #[error("degenerate residual difference: |delta xi| = {norm:e}")]
    DegenerateXi { norm: f64 },

    #[error("market index {market} out of range (T = {markets})")]
    InvalidMarket { market: usize, markets: usize },

    #[error("Monte Carlo study failed: {failed} of {reps} replications failed")]
    StudyFailed { failed: usize, reps: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("at alpha = {alpha:?}: {source}")]
    AtAlpha { alpha: Vec<f64>, source: Box<Error> },
}

impl Error {
    pub(crate) fn at_alpha(self, alpha: &[f64]) -> Error {
        match self {
            e @ Error::AtAlpha { .. } => e,
            e => Error::AtAlpha {
                alpha: alpha.to_vec(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with any `AtAlpha` context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtAlpha { source, .. } => source.root(),
            e => e,
        }
    }
}
