//! Clustered federated learning simulator built around Gaussian loss
//! weighting.
//!
//! Sampled clients report the loss they observe at each local iteration. The
//! server turns those traces into Gaussian rewards ([`reward`]), accumulates
//! them into a pairwise interaction matrix ([`interaction`]), and once that
//! matrix settles it runs spectral clustering with Davies-Bouldin model
//! selection ([`cluster`]) to decide whether to split the federation. The
//! [`orchestrator`] applies this recursively, giving each cluster its own
//! server, model and interaction state.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! command-line front end uses.

pub mod cluster;
pub mod config;
pub mod datagen;
pub mod error;
pub mod formats;
pub mod interaction;
pub mod linalg;
pub mod metrics;
pub mod orchestrator;
pub mod pipeline;
pub mod reward;
pub mod rng;
mod scalar;
pub mod training;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Opaque client identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub usize);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for ClientId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.parse().map(ClientId)
    }
}

/// Default scalar type.
pub type Real = f64;

pub type LossTrace = reward::LossTrace<Real>;
pub type GaussianWeightState = reward::GaussianWeightState<Real>;
pub type InteractionState = interaction::InteractionState<Real>;
pub type AffinityMatrix = interaction::AffinityMatrix<Real>;
pub type ClusteringOutcome = cluster::ClusteringOutcome<Real>;
pub type Matrix = linalg::Matrix<Real>;
pub type ModelParams = training::ModelParams<Real>;
pub type ClientDataset = training::ClientDataset<Real>;
pub type ClusterNode = orchestrator::ClusterNode<Real>;
pub type Federation = datagen::Federation<Real>;
