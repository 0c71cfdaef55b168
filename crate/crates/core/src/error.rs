use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// `μ_π` puts mass on pairs the reference occupancy never visits.
    #[error("absolute continuity violated on {} state-action pair(s): {pairs:?}", pairs.len())]
    Support { pairs: Vec<usize> },

    #[error("proxy reward is constant under the reference occupancy (variance {variance:e})")]
    DegenerateProxy { variance: f64 },

    #[error("proxy reward is not normalized under the reference occupancy (mean {mean:e}, second moment {second_moment:e})")]
    NotNormalized { mean: f64, second_moment: f64 },

    #[error("batches must be independent but share seed {0}")]
    DependentBatches(u64),

    #[error("dual variable lambda3 must be negative, got {0}")]
    NonNegativeLambda3(f64),

    /// Reference-visited features do not span the feature space.
    #[error("feature second-moment matrix is singular: {} deficient direction(s), smallest eigenvalue {min_eigenvalue:e}", directions.len())]
    Span { min_eigenvalue: f64, directions: Vec<Vec<f64>> },

    #[error("dual solver did not converge: residual {residual:e} after {iterations} iterations")]
    DualNonConvergence {
        best: crate::adversary::DualVariables,
        residual: f64,
        iterations: usize,
    },

    #[error("discriminator loss diverged at epoch {epoch}; try a smaller step size")]
    Divergence { epoch: usize },

    #[error("environment too large: {pairs} state-action pairs exceeds cap {cap}")]
    TooLarge { pairs: usize, cap: usize },

    #[error("features do not reproduce the proxy reward (residual {0:e})")]
    FeatureMismatch(f64),

    #[error("lower bound violated by {violations} sampled reward(s); minimum margin {min_margin:e}")]
    BoundViolation { violations: usize, min_margin: f64 },

    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration { iteration, source: alloc::boxed::Box::new(self) }
    }
}
