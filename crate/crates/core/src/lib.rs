//! Population-size estimation from multi-list capture-recapture data with
//! individual covariates.
//!
//! The model combines a latent-class structure for capture heterogeneity with
//! a multinomial model for the marginal distribution of the observed
//! covariates. Capture histories within a latent class follow either a
//! log-linear model over the 2^J configurations or a recursive-logistic
//! factorization in which each occasion's capture logit depends on a class of
//! the previous partial history. The population size `N`, the structural
//! parameters `beta = (zeta, lambda)` and the stratum weights `tau` are
//! estimated jointly by a three-block scheme (Fisher scoring for `beta`, a
//! fixed-point solve for `tau`, one-dimensional scoring for `N`), and
//! uncertainty about `N` is reported through a profile-likelihood interval.
//!
//! All numeric code is generic over the scalar type through [`Scalar`];
//! `f64` aliases for the main entry points live at the crate root.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod report;
pub mod sim;
pub mod special;
pub mod tau;

mod num;

pub use error::{Error, Result};
pub use num::Scalar;

/// `f64` instantiations of the core types.
pub type Dataset64 = data::Dataset<f64>;
pub type ModelSpec64 = model::ModelSpec<f64>;
pub type Params64 = likelihood::Params<f64>;
pub type FitResult64 = estimate::FitResult<f64>;
pub type FitOptions64 = estimate::FitOptions<f64>;
pub type InfoMatrices64 = inference::InfoMatrices<f64>;
pub type ProfileCi64 = inference::ProfileCi<f64>;
