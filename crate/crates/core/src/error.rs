use alloc::string::String;
use core::fmt;

/// One of the three stacked regression components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Mean,
    Scale,
    Correlation,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Mean, Component::Scale, Component::Correlation];

    pub fn index(self) -> usize {
        match self {
            Component::Mean => 0,
            Component::Scale => 1,
            Component::Correlation => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Mean => "mean",
            Component::Scale => "scale",
            Component::Correlation => "corr",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid cluster {id}: {reason}")]
    InvalidCluster { id: u64, reason: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("divergent linear predictor in cluster {cluster}")]
    DivergentPredictor { cluster: u64 },
    #[error("non-positive scale in cluster {cluster}")]
    NonPositiveScale { cluster: u64 },
    #[error("non-positive variance function value in cluster {cluster}")]
    NonPositiveVariance { cluster: u64 },
    #[error("irreparable working covariance in cluster {cluster}")]
    IrreparableCovariance { cluster: u64 },
    #[error("singular working covariance in cluster {cluster}")]
    SingularCovariance { cluster: u64 },
    #[error("rank-deficient {component} design")]
    RankDeficient { component: Component },
    #[error("diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("non-identifiable {component} component")]
    NonIdentifiable { component: Component },
    #[error("fit did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("full model did not converge")]
    FullModelNotConverged,
    #[error("quadrature failed to converge on [{lower}, {upper}]")]
    Quadrature { lower: f64, upper: f64 },
    #[error("candidate space of {count} models exceeds the enumeration cap")]
    TooManyCandidates { count: u64 },
    #[error("simulation failure: {0}")]
    Simulation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
