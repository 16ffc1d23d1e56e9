//! Information-theoretic bounds and inference pipelines for degree-balanced
//! stochastic block models observed through several correlated networks and
//! per-node side information.

pub mod bp;
pub mod channel;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod label_model;
pub mod linalg;
pub mod netgen;
pub mod oracle;
pub mod potential;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod spectral;

pub use bp::{compute_mse, run_bp, BpConfig, NodeEstimates};
pub use config::{ExperimentConfig, MethodKind};
pub use error::{Error, Result};
pub use harness::{run_sweep, SweepOptions};
pub use label_model::{sample_covariates, sample_labels, ChannelSpec, CommunityModel, CovariateSample, LabelSample};
pub use netgen::{generate_gaussian_equiv, generate_network, AdjacencyList, GaussianEquivObservation};
pub use oracle::{exact_mutual_information_mc, exact_posterior, ExactPosterior};
pub use potential::{minimize_potential, BoundResult, Layer, MinimizeOptions, NetworkSpec, OverlapMatrix};
pub use scalar::Real;
pub use spectral::{spectral_pipeline, GmmOptions, SpectralEstimate};

pub type CommunityModelF32 = label_model::CommunityModel<f32>;
pub type CommunityModelF64 = label_model::CommunityModel<f64>;
pub type ChannelSpecF32 = label_model::ChannelSpec<f32>;
pub type ChannelSpecF64 = label_model::ChannelSpec<f64>;
pub type NetworkSpecF32 = potential::NetworkSpec<f32>;
pub type NetworkSpecF64 = potential::NetworkSpec<f64>;
pub type BoundResultF32 = potential::BoundResult<f32>;
pub type BoundResultF64 = potential::BoundResult<f64>;
