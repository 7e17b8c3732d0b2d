//! Numerical laboratory for the dual-pair measure, the double phase pair kernels,
//! anchored dyadic cubes in the product space and the level-set decomposition
//! built from them.

pub mod config;
pub mod cz;
pub mod dyadic;
pub mod error;
pub mod fields;
pub mod grid;
pub mod ledger;
pub mod measure;
pub mod numeric;
pub mod pairs;
pub mod params;
pub mod pipeline;
pub mod quadrature;
pub mod report;
pub mod suite;
pub mod verify;

pub use error::{Error, Result};
