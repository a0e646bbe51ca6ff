//! Bayesian image segmentation with the hidden Potts model and a spatial
//! external-field prior.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`] — regular 2D/3D site geometry, edges and the two-colour
//!   chequerboard partition.
//! * [`potts`] — label fields, the Potts sufficient statistic, the prior
//!   conditional and Swendsen-Wang simulation.
//! * [`pathsampler`] — thermodynamic integration tables and the
//!   Metropolis-Hastings update of the inverse temperature.
//! * [`externalfield`] — distance transforms and the Gaussian-mixture
//!   spatial prior over labels.
//! * [`engine`] — the full posterior sampler.
//! * [`sequential`] — updating displacement hyperparameters from a fitted
//!   chain.
//! * [`phantom`] — synthetic ground-truth phantoms.
//! * [`eval`] — segmentation scores and summaries.
//! * [`io`] — on-disk formats.
//!
//! Class labels are held in memory as zero-based indices `0..k`. Label
//! volumes on disk store `index + 1`, so that `0` never appears in a valid
//! label file.

pub mod engine;
pub mod error;
pub mod eval;
pub mod externalfield;
pub mod io;
pub mod lattice;
pub mod pathsampler;
pub mod phantom;
pub mod potts;
pub mod rng;
pub mod sequential;

pub use error::{Error, Result};
pub use lattice::{build_lattice, BlockPartition, EdgeSet, Lattice, LatticeSpec};
pub use potts::{LabelField, SufficientStat};
