//! Staged speaker-verification recipe runner built on `spkforge-core`.
//!
//! Stages: 1 prepare data, 2 speed perturbation, 3 format, 4 statistics, 5 training,
//! 6 embedding extraction, 7 scoring, 8 metrics, 9 packaging, 10 registration.

pub mod config;
pub mod corpus;
pub mod error;
pub mod registry;
pub mod stages;
pub mod trials;

pub use config::RecipeConfig;
pub use corpus::gen_synthetic_corpus;
pub use error::{RecipeError, Result};
pub use registry::{LoadedModel, Registry, REGISTRY_ENV};
pub use stages::{Recipe, StageOutcome, STAGE_NAMES};
pub use trials::make_trials;
