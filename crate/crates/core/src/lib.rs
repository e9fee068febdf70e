//! Optimal low-rank Markov state models from trajectory pairs.
//!
//! The crate samples pair ensembles `(x, y)` from overdamped Langevin
//! dynamics, projects the transfer operator onto an indicator basis, and
//! extracts the best rank-`k` model by whitening and truncated SVD. Spectral
//! tools then turn the dominant eigen- or singular vectors into metastable or
//! coherent sets and a small column-stochastic MSM.
//!
//! ```no_run
//! use gmsm::{basis::{GridBasis, PruneMode}, config::KeyValues, estimator, scenarios};
//!
//! let (field, sim) = scenarios::builtin_scenario("double_well", &KeyValues::new())?;
//! let pairs = scenarios::sample_pairs(&field, &sim)?;
//! let grid = GridBasis::new(vec![-2.0], vec![2.0], vec![100])?.prune(&pairs, PruneMode::InitialOnly)?;
//! let corr = estimator::correlations(&grid, &grid, &pairs)?;
//! let model = estimator::truncate(&corr, 2, estimator::DEFAULT_EPSILON)?;
//! println!("{:?}", model.singular_values);
//! # Ok::<(), gmsm::Error>(())
//! ```

pub mod basis;
pub mod config;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod linalg;
pub mod lowrank;
pub mod report;
pub mod scenarios;
pub mod spectral;

pub use error::{Error, Result};
