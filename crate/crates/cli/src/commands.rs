use std::f64::consts::PI;
use std::fmt::Write as _;

use cusplab::ensembles::moment_report;
use cusplab::hilbert::{dimension_check, gaussian_regime, near_diagonal_report};
use cusplab::models::{local_distance, verify_conditions, ConditionGrid, ConditionReport};
use cusplab::stats::{
    curve_csv, equidistribution_experiment, hole_experiment, supnorm_experiment, test_function_ld_experiment,
    vanishing_order_table, variance_identity_check, GridSpec, McEstimate,
};
use cusplab::{Complex64, Error, ModelKind, ModelSpace, Region, Result, SectionBasis};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentKind, Validated};

pub enum Content {
    Json(Value),
    Csv(String),
}

pub struct Artifact {
    pub name: String,
    pub content: Content,
}

fn json_artifact<T: Serialize>(name: &str, value: &T) -> Result<Artifact> {
    Ok(Artifact { name: name.into(), content: Content::Json(serde_json::to_value(value)?) })
}

fn csv_artifact(name: &str, body: String) -> Artifact {
    Artifact { name: name.into(), content: Content::Csv(body) }
}

pub fn model_check(model: &ModelSpace) -> Result<(ConditionReport, Vec<Artifact>)> {
    let grid = ConditionGrid::default_for(model);
    let report = verify_conditions(model, &grid)?;
    let out = json_artifact("model_check.json", &json!({ "grid": grid, "conditions": report }))?;
    Ok((report, vec![out]))
}

pub fn basis(v: &Validated) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    let mut dims = Vec::new();
    for &p in &v.config.experiment.p {
        let b = v.setup.basis(p)?;
        out.push(json_artifact(&format!("basis_p{p}.json"), &b.to_document())?);
        let check = match dimension_check(&b) {
            Ok(r) => serde_json::to_value(r)?,
            Err(Error::Unsupported(why)) => json!({ "p": p, "d_p": b.dim(), "truncated": b.is_truncated(), "note": why }),
            Err(e) => return Err(e),
        };
        dims.push(check);
    }
    out.push(json_artifact("dimension_check.json", &dims)?);
    Ok(out)
}

/// Log-spaced radii covering the chart region where kernel values are meaningful.
fn radial_profile(model: &ModelSpace, certified: Option<f64>) -> Vec<f64> {
    let (lo, hi): (f64, f64) = match model.kind() {
        ModelKind::PuncturedDisk => (1e-6, certified.unwrap_or(0.9)),
        _ => (1e-3, 1e3),
    };
    let n = 400;
    (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Metric length of the chart ray from `x` along `dir` up to the edge of the
/// region where the basis is usable.
fn reach(model: &ModelSpace, b: &SectionBasis, x: Complex64, dir: Complex64) -> Result<f64> {
    let d = dir / dir.norm();
    let edge = match b.truncation() {
        Some(info) => {
            // |x + t d| = R for the positive root t
            let r = info.certified_radius;
            let bx = (x * d.conj()).re;
            -bx + (bx * bx - x.norm_sqr() + r * r).max(0.0).sqrt()
        }
        None => 1e8,
    };
    local_distance(model, x, x + d * edge)
}

pub fn bergman(v: &Validated) -> Result<Vec<Artifact>> {
    let model = &v.setup.model;
    let x = v.config.experiment.point;
    let dir = v.config.experiment.direction;
    if !model.contains(x) {
        return Err(Error::Domain(format!("experiment.point {x} is outside the model")));
    }
    let mut diag = String::from("p,r,density,normalized\n");
    let mut profile = String::from("p,dist,re,im,normalized,gaussian,ratio,rejected\n");
    let mut sup = String::from("p,sup_density,at_r,ratio\n");
    let mut summary = Vec::new();
    for &p in &v.config.experiment.p {
        let b = v.setup.basis(p)?;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for r in radial_profile(model, b.truncation().map(|t| t.certified_radius)) {
            let z = Complex64::new(r, 0.0);
            let d = b.bergman_density(z)?;
            let pn = b.normalized_kernel(z, z)?;
            let _ = writeln!(diag, "{p},{r},{d},{pn}");
            if d > best.0 {
                best = (d, r);
            }
        }
        // the unit-disk sup law is (p/2π)^{3/2}; other models report the raw sup
        let ratio = match model.kind() {
            ModelKind::PuncturedDisk => best.0 / (p as f64 / (2.0 * PI)).powf(1.5),
            _ => f64::NAN,
        };
        let ratio_cell = if ratio.is_finite() { ratio.to_string() } else { String::new() };
        let _ = writeln!(sup, "{p},{},{},{ratio_cell}", best.0, best.1);
        let (bw, radius) = gaussian_regime(p, model.epsilon0(), 1);
        let top = radius.min(0.98 * reach(model, &b, x, dir)?);
        let dists: Vec<f64> = (1..=40).map(|i| top * i as f64 / 40.0).collect();
        let rows = near_diagonal_report(&b, x, dir, &dists, bw)?;
        for r in &rows {
            let _ = writeln!(
                profile,
                "{p},{},{},{},{},{},{},{}",
                r.dist, r.point.re, r.point.im, r.normalized, r.gaussian, r.ratio, r.rejected
            );
        }
        summary.push(json!({
            "p": p,
            "d_p": b.dim(),
            "sup_density": best.0,
            "sup_at_r": best.1,
            "disk_sup_ratio": if ratio.is_finite() { json!(ratio) } else { Value::Null },
            "gaussian_b": bw,
            "gaussian_radius": radius,
            "profile_radius": top,
            "near_diagonal": rows,
        }));
    }
    Ok(vec![
        json_artifact("bergman.json", &summary)?,
        csv_artifact("diagonal.csv", diag),
        csv_artifact("profile.csv", profile),
        csv_artifact("sup.csv", sup),
    ])
}

fn region(v: &Validated) -> Result<Region> {
    v.config.experiment.region.ok_or_else(|| Error::Validation("this experiment needs experiment.region".into()))
}

fn curve<T>(rows: &[T], f: impl Fn(&T) -> (u32, McEstimate)) -> String {
    curve_csv(&rows.iter().map(f).collect::<Vec<_>>())
}

pub fn experiment(v: &Validated) -> Result<Vec<Artifact>> {
    let x = &v.config.experiment;
    let s = &v.setup;
    let kind = x.kind.ok_or_else(|| Error::Validation("experiment.kind is required".into()))?;
    match kind {
        ExperimentKind::Supnorm => {
            let r = supnorm_experiment(s, &x.p, &region(v)?, GridSpec { spacing: x.grid }, x.n_trials, x.delta, x.refinement_trials)?;
            Ok(vec![
                csv_artifact("expectation.csv", curve(&r.rows, |w| (w.p, w.expectation))),
                csv_artifact("tail.csv", curve(&r.rows, |w| (w.p, w.tail))),
                json_artifact("supnorm.json", &r)?,
            ])
        }
        ExperimentKind::Equidistribution => {
            let r = equidistribution_experiment(s, &x.p, &region(v)?, x.delta, x.n_trials)?;
            Ok(vec![
                csv_artifact("count.csv", curve(&r.rows, |w| (w.p, w.normalized_count))),
                csv_artifact("deviation.csv", curve(&r.rows, |w| (w.p, w.deviation))),
                csv_artifact("hole.csv", curve(&r.rows, |w| (w.p, w.hole))),
                json_artifact("equidistribution.json", &r)?,
            ])
        }
        ExperimentKind::Holes => {
            let r = hole_experiment(s, &x.p, &region(v)?, x.n_trials)?;
            let mut out = vec![csv_artifact("hole.csv", curve(&r.rows, |w| (w.p, w.probability)))];
            if s.ensemble.is_gaussian() {
                let mut lb = String::from("p,lower_bound,ln_lower_bound\n");
                for row in &r.rows {
                    if let Some(b) = &row.lower_bound {
                        let _ = writeln!(lb, "{},{},{}", row.p, b.bound, b.ln_bound);
                    }
                }
                out.push(csv_artifact("lower_bound.csv", lb));
            }
            out.push(json_artifact("holes.json", &r)?);
            Ok(out)
        }
        ExperimentKind::Variance => {
            let mut rows = Vec::new();
            for &p in &x.p {
                let b = s.basis(p)?;
                rows.push(variance_identity_check(s, &b, x.point, x.n_trials)?);
            }
            Ok(vec![json_artifact("variance.json", &rows)?])
        }
        ExperimentKind::Pairing => {
            let phi = x
                .test_function
                .ok_or_else(|| Error::Validation("the pairing experiment needs experiment.test_function".into()))?;
            let r = test_function_ld_experiment(s, &x.p, &phi, x.delta, x.n_trials)?;
            Ok(vec![
                csv_artifact("pairing.csv", curve(&r.rows, |w| (w.p, w.pairing))),
                csv_artifact("deviation.csv", curve(&r.rows, |w| (w.p, w.deviation))),
                json_artifact("pairing.json", &r)?,
            ])
        }
        ExperimentKind::VanishingOrder => {
            let mut tables = Vec::new();
            let mut csv = String::from("p,order,count,n_trials\n");
            for &p in &x.p {
                let t = vanishing_order_table(s, p, x.n_trials)?;
                for (k, n) in &t.counts {
                    let _ = writeln!(csv, "{p},{k},{n},{}", t.n_trials);
                }
                tables.push(t);
            }
            Ok(vec![csv_artifact("orders.csv", csv), json_artifact("vanishing_order.json", &tables)?])
        }
        ExperimentKind::Moments => {
            let mut reports = Vec::new();
            for &p in &x.p {
                let d = s.basis(p)?.dim();
                let n = usize::try_from(x.n_trials).map_err(|_| Error::Validation("n_trials too large".into()))?;
                reports.push(json!({ "p": p, "moments": moment_report(&s.ensemble, d, n, &s.seed)? }));
            }
            Ok(vec![json_artifact("moments.json", &reports)?])
        }
    }
}
