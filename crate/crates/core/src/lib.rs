//! Evenly-distributed class centroids on the unit hypersphere, fixed-centroid
//! margin losses with analytical gradients, and a small deterministic MLP
//! trainer for verifying the clustering behavior at desk scale.
//!
//! The pieces fit together like this: [`centroids::generate`] spreads `c` unit
//! vectors in `d` dimensions by simulated charge repulsion; [`loss`] evaluates
//! margin and centroid-MSE losses against those fixed centers; [`train`] fits
//! an MLP feature extractor under any of the losses; [`metrics`] quantifies
//! how compact and separated the resulting feature space is; [`data`] loads
//! CSV/IDX datasets and persists centroid files.

pub mod centroids;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod numeric;
pub mod train;

pub use error::{Error, Result};
pub use numeric::{Matrix, Rng};
