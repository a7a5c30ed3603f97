//! Shared fixtures for the benchmarks.

use cusplab::ensembles::sample_coefficients;
use cusplab::{build_basis, Complex64, Ensemble, ModelSpace, SectionBasis, SeedSpec, Truncation};

pub fn sphere_basis(p: u32) -> SectionBasis {
    build_basis(&ModelSpace::sphere(1).unwrap(), p, None).unwrap()
}

pub fn cusped_basis(p: u32) -> SectionBasis {
    let model = ModelSpace::cusped_sphere(1, [0.1, 0.5], 0.1, true).unwrap();
    build_basis(&model, p, None).unwrap()
}

pub fn disk_basis(p: u32, r_max: f64) -> SectionBasis {
    build_basis(&ModelSpace::punctured_disk(), p, Some(Truncation::Radius { r_max })).unwrap()
}

pub fn gaussian_coefficients(basis: &SectionBasis, trial: u64) -> Vec<Complex64> {
    sample_coefficients(&Ensemble::gaussian(1.0).unwrap(), basis.dim(), &SeedSpec::new(1), basis.p(), trial)
}
