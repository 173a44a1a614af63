//! Targeted maximum likelihood estimation of mean counterfactual outcomes
//! and average treatment effects for hierarchical (community/individual)
//! data under arbitrary single time-point interventions — static, dynamic,
//! or stochastic — with IPTW and G-computation comparators.
//!
//! The crate is organized around the estimation pipeline:
//!
//! - [`data`]: dataset ingestion, role bindings, weights, aggregation
//! - [`glm`]: the built-in weighted GLM learner (gaussian / logistic)
//! - [`density`]: conditional exposure densities via binned hazard fits
//! - [`intervention`]: intervention specifications and Monte-Carlo sampling
//! - [`tmle`]: clever covariate, targeting, estimators, influence curves
//! - [`hierarchy`]: the four community analysis strategies
//! - [`sim`]: benchmark data-generating processes and replication studies

pub mod data;
pub mod density;
pub mod error;
pub mod formula;
pub mod frame;
pub mod glm;
pub mod hierarchy;
pub mod intervention;
pub mod rng;
pub mod sim;
pub mod tmle;

pub use data::{
    aggregate_to_community, build_weights, CommunityWeightPolicy, HierDataset, NodeRoles,
    ObsWeightPolicy, WeightScheme,
};
pub use density::{BinMethod, BinningConfig, FittedDensity};
pub use error::{Error, Result};
pub use formula::Formula;
pub use frame::Frame;
pub use hierarchy::{
    fit_generic_density, marginalize_individual_g, run, CommunityStep, EstimationConfig,
    RunOutput, StrategyConfig,
};
pub use intervention::{InterventionKind, InterventionSpec, McConfig, MeanModel, SamplerSpec};
pub use tmle::{EstimationReport, Estimator, OutcomeScale, TargetMethod};
