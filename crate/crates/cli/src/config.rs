//! Experiment configuration: parsing, defaults, validation and hashing.

use cusplab::ensembles::{EnsembleKind, RadiusRule};
use cusplab::models::{verify_conditions, ConditionGrid, DEFAULT_BACKGROUND_SCALE, DEFAULT_BLEND};
use cusplab::stats::{GridSpec, Runner, Setup};
use cusplab::{Complex64, Ensemble, Error, ModelDescriptor, ModelSpace, Region, Result, SeedSpec, TestFunction, Truncation};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    #[serde(default)]
    ensemble: RawEnsemble,
    #[serde(default)]
    seed: RawSeed,
    #[serde(default)]
    experiment: RawExperiment,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: String,
    degree: Option<u32>,
    blend: Option<[f64; 2]>,
    background_scale: Option<f64>,
    punctures: Option<Vec<Complex64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnsemble {
    kind: Option<String>,
    sigma: Option<f64>,
    radius_rule: Option<RadiusRule>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSeed {
    master: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    kind: Option<ExperimentKind>,
    p: Option<Vec<u32>>,
    region: Option<Region>,
    delta: Option<f64>,
    n_trials: Option<u64>,
    grid: Option<f64>,
    truncation: Option<Truncation>,
    point: Option<Complex64>,
    direction: Option<Complex64>,
    test_function: Option<TestFunction>,
    refinement_trials: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Supnorm,
    Equidistribution,
    Holes,
    Variance,
    Pairing,
    VanishingOrder,
    Moments,
}

/// The configuration with every default filled in. Its JSON form is what
/// outputs embed and what the content hash covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub model: ModelDescriptor,
    pub ensemble: EnsembleKind,
    pub seed: u64,
    pub experiment: ExperimentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: Option<ExperimentKind>,
    pub p: Vec<u32>,
    pub region: Option<Region>,
    pub delta: f64,
    pub n_trials: u64,
    pub grid: f64,
    pub truncation: Option<Truncation>,
    pub point: Complex64,
    pub direction: Complex64,
    pub test_function: Option<TestFunction>,
    pub refinement_trials: u64,
}

pub const DEFAULT_SEED: u64 = 0;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Resolved> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Validation(e.to_string()))?;
    let model = resolve_model(&raw.model)?;
    let ensemble = match raw.ensemble.kind.as_deref().unwrap_or("gaussian") {
        "gaussian" => {
            if raw.ensemble.radius_rule.is_some() {
                return invalid("ensemble.radius_rule applies to the uniform-disk ensemble only");
            }
            EnsembleKind::ComplexGaussian { sigma: raw.ensemble.sigma.unwrap_or(1.0) }
        }
        "uniform-disk" => {
            if raw.ensemble.sigma.is_some() {
                return invalid("ensemble.sigma applies to the gaussian ensemble only");
            }
            let Some(radius) = raw.ensemble.radius_rule else {
                return invalid("uniform-disk ensemble needs ensemble.radius_rule");
            };
            EnsembleKind::UniformDisk { radius }
        }
        other => return invalid(format!("unknown ensemble.kind {other:?} (expected gaussian or uniform-disk)")),
    };
    let e = raw.experiment;
    let experiment = ExperimentSpec {
        kind: e.kind,
        p: e.p.unwrap_or_else(|| vec![2, 4, 8]),
        region: e.region,
        delta: e.delta.unwrap_or(0.2),
        n_trials: e.n_trials.unwrap_or(1000),
        grid: e.grid.unwrap_or(GridSpec::default().spacing),
        truncation: e.truncation,
        point: e.point.unwrap_or(Complex64::new(0.3, 0.2)),
        direction: e.direction.unwrap_or(Complex64::new(1.0, 0.0)),
        test_function: e.test_function,
        refinement_trials: e.refinement_trials.unwrap_or(0),
    };
    Ok(Resolved { model, ensemble, seed: seed_override.or(raw.seed.master).unwrap_or(DEFAULT_SEED), experiment })
}

fn resolve_model(m: &RawModel) -> Result<ModelDescriptor> {
    let origin = Complex64::new(0.0, 0.0);
    let punctures = m.punctures.clone();
    let only_origin = |default: bool| -> Result<bool> {
        match &punctures {
            None => Ok(default),
            Some(v) if v.is_empty() => Ok(false),
            Some(v) if v.iter().all(|&a| a == origin) && v.len() == 1 => Ok(true),
            Some(_) => invalid("model.punctures may only contain the chart origin [0.0, 0.0]"),
        }
    };
    match m.kind.as_str() {
        "punctured-disk" => {
            if m.degree.is_some() || m.blend.is_some() || m.background_scale.is_some() {
                return invalid("the punctured disk takes no degree, blend or background_scale");
            }
            if !only_origin(true)? {
                return invalid("the punctured disk is punctured at the origin");
            }
            Ok(ModelDescriptor::PuncturedDisk)
        }
        "sphere" => {
            if m.blend.is_some() || m.background_scale.is_some() {
                return invalid("the sphere takes no blend or background_scale");
            }
            if only_origin(false)? {
                return invalid("the sphere has no punctures; use kind = \"cusped-sphere\"");
            }
            Ok(ModelDescriptor::FubiniStudySphere { degree: m.degree.unwrap_or(1) })
        }
        "cusped-sphere" => Ok(ModelDescriptor::CuspedSphere {
            degree: m.degree.unwrap_or(1),
            blend: m.blend.unwrap_or(DEFAULT_BLEND),
            background_scale: m.background_scale.unwrap_or(DEFAULT_BACKGROUND_SCALE),
            cusp_at_origin: only_origin(true)?,
        }),
        other => invalid(format!("unknown model.kind {other:?} (expected punctured-disk, sphere or cusped-sphere)")),
    }
}

impl Resolved {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A configuration that passed every check, with its model and ensemble built.
pub struct Validated {
    pub config: Resolved,
    pub setup: Setup,
}

/// Model construction alone; used by `model-check`, which reports condition failures itself.
pub fn build_model(config: &Resolved) -> Result<ModelSpace> {
    ModelSpace::from_descriptor(&config.model)
}

pub fn validate(config: Resolved, workers: usize, need_experiment: bool) -> Result<Validated> {
    let model = build_model(&config)?;
    let report = verify_conditions(&model, &ConditionGrid::default_for(&model))?;
    if !report.pass {
        return invalid(format!(
            "model conditions fail: min curvature ratio {:.3e} (ε₀ = {:.3e}), cusp deviation {:?}",
            report.min_ratio, report.epsilon0, report.max_cusp_deviation
        ));
    }
    let x = &config.experiment;
    if x.p.is_empty() || x.p.iter().any(|&p| p < 2) {
        return invalid("experiment.p must list values of at least 2");
    }
    if need_experiment && x.kind.is_none() {
        return invalid("experiment.kind is required");
    }
    if let Some(region) = &x.region {
        region.validate(&model)?;
    }
    if !(x.delta > 0.0 && x.delta.is_finite()) {
        return invalid("experiment.delta must be positive");
    }
    if x.n_trials == 0 {
        return invalid("experiment.n_trials must be positive");
    }
    GridSpec { spacing: x.grid }.metric_step(2)?;
    if x.direction.norm() == 0.0 {
        return invalid("experiment.direction must be nonzero");
    }
    if matches!(model.kind(), cusplab::ModelKind::PuncturedDisk) && x.truncation.is_none() {
        return invalid("the punctured disk needs experiment.truncation");
    }
    if !matches!(model.kind(), cusplab::ModelKind::PuncturedDisk) && x.truncation.is_some() {
        return invalid("experiment.truncation applies to the punctured disk only");
    }
    let ensemble = Ensemble::from_kind(config.ensemble)?;
    let runner = Runner::new(workers)?;
    let setup = Setup { model, ensemble, seed: SeedSpec::new(config.seed), truncation: x.truncation, runner };
    let mut dims = Vec::with_capacity(x.p.len());
    for &p in &x.p {
        dims.push(setup.basis(p)?.dim());
    }
    setup.ensemble.validate(&dims)?;
    Ok(Validated { config, setup })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let r = parse("[model]\nkind = \"sphere\"\n", None).unwrap();
        assert_eq!(r.model, ModelDescriptor::FubiniStudySphere { degree: 1 });
        assert_eq!(r.ensemble, EnsembleKind::ComplexGaussian { sigma: 1.0 });
        assert_eq!(r.seed, DEFAULT_SEED);
    }

    #[test]
    fn seed_override_changes_hash() {
        let text = "[model]\nkind = \"sphere\"\n[seed]\nmaster = 3\n";
        let a = parse(text, None).unwrap();
        let b = parse(text, Some(4)).unwrap();
        assert_eq!(a.seed, 3);
        assert_eq!(b.seed, 4);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), parse(text, Some(3)).unwrap().hash());
    }

    #[test]
    fn dotted_keys_and_tables_agree() {
        let a = parse("model.kind = \"cusped-sphere\"\nmodel.blend = [0.2, 0.6]\n", None).unwrap();
        let b = parse("[model]\nkind = \"cusped-sphere\"\nblend = [0.2, 0.6]\n", None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("[model]\nkind = \"sphere\"\ncolour = 1\n", None).is_err());
        assert!(parse("[model]\nkind = \"torus\"\n", None).is_err());
    }

    #[test]
    fn inverted_blend_fails_validation() {
        let r = parse("[model]\nkind = \"cusped-sphere\"\nblend = [0.5, 0.1]\n", None).unwrap();
        assert!(matches!(validate(r, 1, false), Err(Error::Validation(_))));
    }

    #[test]
    fn punctures_are_checked() {
        assert!(parse("[model]\nkind = \"cusped-sphere\"\npunctures = [[0.5, 0.0]]\n", None).is_err());
        let r = parse("[model]\nkind = \"cusped-sphere\"\npunctures = []\n", None).unwrap();
        assert!(matches!(r.model, ModelDescriptor::CuspedSphere { cusp_at_origin: false, .. }));
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let text = std::fs::read_to_string(&path).unwrap();
            let r = parse(&text, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let need = r.experiment.kind.is_some();
            if let Err(e) = validate(r, 1, need) {
                panic!("{}: {e}", path.display());
            }
            n += 1;
        }
        assert!(n >= 5);
    }
}
