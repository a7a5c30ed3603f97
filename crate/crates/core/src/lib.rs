//! Numerical laboratory for random holomorphic sections on model punctured
//! Riemann surfaces: section spaces and their Bergman kernels, coefficient
//! ensembles, zero sets, and Monte Carlo experiments on the sup norm, zero
//! equidistribution and hole probabilities.

pub mod ensembles;
pub mod error;
pub mod hilbert;
pub mod models;
pub mod poly;
pub mod quad;
pub mod stats;
pub mod zeros;

pub use ensembles::{Ensemble, EnsembleKind, RadiusRule, SeedSpec};
pub use error::{Error, Result};
pub use hilbert::{build_basis, RandomSection, SectionBasis, Truncation};
pub use models::{ModelDescriptor, ModelKind, ModelSpace, Point, Region};
pub use num_complex::Complex64;
pub use zeros::{find_zeros, TestFunction, ZeroSet};
