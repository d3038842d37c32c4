//! Joint estimating equations for the mean, scale and pairwise correlation of
//! clustered responses, with sandwich covariance estimators and information-criterion
//! model selection.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod equations;
pub mod error;
pub mod fitter;
pub mod linalg;
mod math;
pub mod model;
mod par;
pub mod quadrature;
pub mod selection;
pub mod simulate;
pub mod variance;

pub use error::{Component, Error, Result};
pub use fitter::{fit, FitOptions, FitResult, InitMode};
pub use model::{
    Cluster, ClusterDataset, Link, LinkSpec, ModelSpec, ThetaVector, V3Mode, VarianceFunction,
    WorkingCorrelation, WorkingStructure,
};
pub use selection::{select, CandidateSupport, ColumnMask, PenaltyScale, SearchSpace, SelectionResult, Strategy};
pub use simulate::{ReplicateSummary, Scenario, ScenarioConfig};
pub use variance::{sandwich, SandwichFlavor, SandwichResult, SlopeMatrix};
