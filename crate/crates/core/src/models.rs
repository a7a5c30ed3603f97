//! Geometric models: a chart, a frame weight for the line bundle, the
//! surface volume form and the curvature of the bundle metric.
//!
//! Chart normalization: `i dz∧dz̄ = 2 dA`, with `dA = dx dy` planar Lebesgue
//! measure. Every density returned here is with respect to `dA`, so the
//! Poincaré form `i dz∧dz̄ / (|z|² log²|z|²)` has density
//! `2 / (|z|² log²|z|²)` and the Riemannian length element is
//! `sqrt(volume_density) |dz|`.
//!
//! All three models are rotation invariant about the chart origin. In the
//! log-radial variable `u = ln|z|` a model is described by a convex potential
//! `φ(u) = -ln w`, and
//!
//! * curvature density `= φ''(u) / (2 r²)`,
//! * volume density    `= ω(u) / (2 r²)`,
//!
//! where `ω(u)` is the log-radial volume profile.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{self, QuadOptions};

pub type Point = Complex64;

/// Serializable description of a model; `ModelSpace` is built from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelDescriptor {
    /// The punctured unit disk with the Poincaré metric and `|1|² = |log|z|²|`.
    PuncturedDisk,
    /// The Riemann sphere with `O(n)` and its Fubini–Study metric.
    FubiniStudySphere { degree: u32 },
    /// The sphere with an optional cusp at the chart origin. Inside
    /// `blend[0]` the geometry is exactly the punctured-disk model; beyond
    /// `blend[1]` it is a Fubini–Study type metric of scale `background_scale`.
    CuspedSphere {
        degree: u32,
        blend: [f64; 2],
        background_scale: f64,
        cusp_at_origin: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    PuncturedDisk,
    FubiniStudySphere,
    CuspedSphere,
}

/// Default radii of the cusp-to-background transition.
pub const DEFAULT_BLEND: [f64; 2] = [0.1, 0.5];
/// Default scale `λ` of the background weight `(1 + |z|²/λ²)^{-n}`.
pub const DEFAULT_BACKGROUND_SCALE: f64 = 0.1;

const BLEND_PANELS: usize = 64;

/// Log-radial potential of the cusped sphere, with `φ'` blended between the
/// cusp slope and the background slope by a C∞ step.
#[derive(Debug)]
struct CuspProfile {
    degree: f64,
    lambda2: f64,
    cusp: bool,
    u_in: f64,
    u_out: f64,
    panel_start: Vec<f64>,
    outer_shift: f64,
    gl_nodes: Vec<f64>,
    gl_weights: Vec<f64>,
}

fn logistic(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl CuspProfile {
    fn new(degree: u32, blend: [f64; 2], scale: f64, cusp: bool) -> Self {
        let (gl_nodes, gl_weights) = quad::gauss_legendre(10);
        let mut prof = CuspProfile {
            degree: degree as f64,
            lambda2: scale * scale,
            cusp,
            u_in: blend[0].ln(),
            u_out: blend[1].ln(),
            panel_start: Vec::new(),
            outer_shift: 0.0,
            gl_nodes,
            gl_weights,
        };
        if cusp {
            let h = (prof.u_out - prof.u_in) / BLEND_PANELS as f64;
            let mut acc = prof.cusp_phi(prof.u_in);
            prof.panel_start.push(acc);
            for i in 0..BLEND_PANELS {
                let a = prof.u_in + h * i as f64;
                acc += prof.slope_integral(a, a + h);
                prof.panel_start.push(acc);
            }
            prof.outer_shift = acc - prof.background_phi(prof.u_out);
        }
        prof
    }

    fn cusp_phi(&self, u: f64) -> f64 {
        -(-2.0 * u).ln()
    }

    fn background_phi(&self, u: f64) -> f64 {
        self.degree * softplus(2.0 * u - self.lambda2.ln())
    }

    fn background_q(&self, u: f64) -> f64 {
        // q / (1 + q) with q = e^{2u} / λ²
        logistic(2.0 * u - self.lambda2.ln())
    }

    fn blend(&self, u: f64) -> (f64, f64) {
        if !self.cusp {
            return (1.0, 0.0);
        }
        if u <= self.u_in {
            return (0.0, 0.0);
        }
        if u >= self.u_out {
            return (1.0, 0.0);
        }
        // C∞ step: β = logistic(1/(1−s) − 1/s)
        let w = self.u_out - self.u_in;
        let s = (u - self.u_in) / w;
        let b = logistic(1.0 / (1.0 - s) - 1.0 / s);
        let db = b * (1.0 - b) * (1.0 / (s * s) + 1.0 / ((1.0 - s) * (1.0 - s))) / w;
        (b, db)
    }

    fn slopes(&self, u: f64) -> (f64, f64, f64, f64) {
        let q = self.background_q(u);
        let d2 = 2.0 * self.degree * q;
        let dd2 = 4.0 * self.degree * q * (1.0 - q);
        if self.cusp && u < 0.0 {
            (-1.0 / u, 1.0 / (u * u), d2, dd2)
        } else {
            (0.0, 0.0, d2, dd2)
        }
    }

    fn dphi(&self, u: f64) -> f64 {
        let (b, _) = self.blend(u);
        let (d1, _, d2, _) = self.slopes(u);
        if b == 0.0 {
            d1
        } else if b == 1.0 {
            d2
        } else {
            (1.0 - b) * d1 + b * d2
        }
    }

    /// `(φ'', ω)`, the curvature and volume profiles.
    fn second(&self, u: f64) -> (f64, f64) {
        let (b, db) = self.blend(u);
        let (d1, dd1, d2, dd2) = self.slopes(u);
        if b == 0.0 {
            (dd1, dd1)
        } else if b == 1.0 {
            (dd2, dd2)
        } else {
            let omega = (1.0 - b) * dd1 + b * dd2;
            (omega + db * (d2 - d1), omega)
        }
    }

    fn slope_integral(&self, a: f64, b: f64) -> f64 {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        self.gl_nodes
            .iter()
            .zip(&self.gl_weights)
            .map(|(x, w)| w * self.dphi(c + h * x))
            .sum::<f64>()
            * h
    }

    /// `φ(u + du) - φ(u)` without cancellation.
    fn phi_increment(&self, u: f64, du: f64) -> f64 {
        let v = u + du;
        if self.cusp && u <= self.u_in && v <= self.u_in {
            return -(du / u).ln_1p();
        }
        if !self.cusp || (u >= self.u_out && v >= self.u_out) {
            let sig = self.background_q(u);
            return self.degree * ((2.0 * du).exp_m1() * sig).ln_1p();
        }
        self.slope_integral(u, v)
    }

    fn phi(&self, u: f64) -> f64 {
        if !self.cusp {
            return self.background_phi(u);
        }
        if u <= self.u_in {
            return self.cusp_phi(u);
        }
        if u >= self.u_out {
            return self.background_phi(u) + self.outer_shift;
        }
        let h = (self.u_out - self.u_in) / BLEND_PANELS as f64;
        let i = (((u - self.u_in) / h) as usize).min(BLEND_PANELS - 1);
        let a = self.u_in + h * i as f64;
        self.panel_start[i] + self.slope_integral(a, u)
    }
}

/// An immutable geometric model. Cheap to clone and safe to share.
#[derive(Debug, Clone)]
pub struct ModelSpace {
    descriptor: ModelDescriptor,
    profile: Option<Arc<CuspProfile>>,
    punctures: Vec<Point>,
    epsilon0: f64,
}

impl PartialEq for ModelSpace {
    fn eq(&self, other: &Self) -> bool {
        self.descriptor == other.descriptor
    }
}

impl Serialize for ModelSpace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.descriptor.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let desc = ModelDescriptor::deserialize(d)?;
        ModelSpace::from_descriptor(&desc).map_err(serde::de::Error::custom)
    }
}

impl ModelSpace {
    pub fn punctured_disk() -> Self {
        ModelSpace {
            descriptor: ModelDescriptor::PuncturedDisk,
            profile: None,
            punctures: vec![Complex64::new(0.0, 0.0)],
            epsilon0: 1.0,
        }
    }

    pub fn sphere(degree: u32) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Validation("sphere bundle degree must be at least 1".into()));
        }
        Ok(ModelSpace {
            descriptor: ModelDescriptor::FubiniStudySphere { degree },
            profile: None,
            punctures: Vec::new(),
            epsilon0: degree as f64,
        })
    }

    pub fn cusped_sphere(degree: u32, blend: [f64; 2], background_scale: f64, cusp_at_origin: bool) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Validation("cusped sphere bundle degree must be at least 1".into()));
        }
        let [rin, rout] = blend;
        if !(rin > 0.0 && rin < rout && rout < 1.0) {
            return Err(Error::Validation(format!(
                "blend radii must satisfy 0 < rin < rout < 1, got [{rin}, {rout}]"
            )));
        }
        if !(background_scale > 0.0 && background_scale.is_finite()) {
            return Err(Error::Validation("background scale must be positive".into()));
        }
        let profile = CuspProfile::new(degree, blend, background_scale, cusp_at_origin);
        let mut model = ModelSpace {
            descriptor: ModelDescriptor::CuspedSphere {
                degree,
                blend,
                background_scale,
                cusp_at_origin,
            },
            profile: Some(Arc::new(profile)),
            punctures: if cusp_at_origin { vec![Complex64::new(0.0, 0.0)] } else { Vec::new() },
            epsilon0: 0.0,
        };
        model.epsilon0 = model.scan_min_ratio();
        Ok(model)
    }

    pub fn from_descriptor(d: &ModelDescriptor) -> Result<Self> {
        match *d {
            ModelDescriptor::PuncturedDisk => Ok(Self::punctured_disk()),
            ModelDescriptor::FubiniStudySphere { degree } => Self::sphere(degree),
            ModelDescriptor::CuspedSphere { degree, blend, background_scale, cusp_at_origin } => {
                Self::cusped_sphere(degree, blend, background_scale, cusp_at_origin)
            }
        }
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn kind(&self) -> ModelKind {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => ModelKind::PuncturedDisk,
            ModelDescriptor::FubiniStudySphere { .. } => ModelKind::FubiniStudySphere,
            ModelDescriptor::CuspedSphere { .. } => ModelKind::CuspedSphere,
        }
    }

    /// Degree `n` of the bundle; `None` for the local disk model.
    pub fn bundle_degree(&self) -> Option<u32> {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => None,
            ModelDescriptor::FubiniStudySphere { degree } | ModelDescriptor::CuspedSphere { degree, .. } => {
                Some(degree)
            }
        }
    }

    pub fn punctures(&self) -> &[Point] {
        &self.punctures
    }

    /// Lower curvature bound `a(z) ≥ ε₀`: exact for the disk and sphere, the
    /// minimum over a fine log-radial scan for the cusped sphere.
    pub fn epsilon0(&self) -> f64 {
        self.epsilon0
    }

    /// Euler characteristic of the (punctured) surface; `None` for the disk.
    pub fn euler_characteristic(&self) -> Option<i64> {
        match self.kind() {
            ModelKind::PuncturedDisk => None,
            _ => Some(2 - self.punctures.len() as i64),
        }
    }

    /// Radius of the chart domain (`∞` for the sphere models).
    pub fn chart_radius(&self) -> f64 {
        match self.kind() {
            ModelKind::PuncturedDisk => 1.0,
            _ => f64::INFINITY,
        }
    }

    /// Radius of the neighbourhood where the geometry is exactly the cusp model.
    pub fn cusp_radius(&self) -> Option<f64> {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => Some(1.0),
            ModelDescriptor::CuspedSphere { blend, cusp_at_origin: true, .. } => Some(blend[0]),
            _ => None,
        }
    }

    pub fn distance_to_puncture(&self, z: Point) -> f64 {
        self.punctures.iter().map(|a| (z - a).norm()).fold(f64::INFINITY, f64::min)
    }

    /// True when `z` lies in the chart domain minus the punctures.
    pub fn contains(&self, z: Point) -> bool {
        let r = z.norm();
        if !r.is_finite() {
            return false;
        }
        if self.distance_to_puncture(z) == 0.0 {
            return false;
        }
        match self.kind() {
            ModelKind::PuncturedDisk => r < 1.0,
            _ => true,
        }
    }

    fn check(&self, z: Point) -> Result<f64> {
        if self.contains(z) {
            Ok(z.norm())
        } else {
            Err(Error::Domain(format!("point {z} is a puncture or outside the chart domain")))
        }
    }

    /// `ln w(r)` of the frame weight as a function of the chart radius.
    pub fn radial_log_weight(&self, r: f64) -> f64 {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => (-2.0 * r.ln()).ln(),
            ModelDescriptor::FubiniStudySphere { degree } => -(degree as f64) * (r * r).ln_1p(),
            ModelDescriptor::CuspedSphere { .. } => -self.profile.as_ref().unwrap().phi(r.ln()),
        }
    }

    /// Volume density of `ω_Σ` at chart radius `r`.
    pub fn radial_volume_density(&self, r: f64) -> f64 {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => {
                let l = (r * r).ln();
                2.0 / (r * r * l * l)
            }
            ModelDescriptor::FubiniStudySphere { .. } => {
                let s = 1.0 + r * r;
                2.0 / (s * s)
            }
            ModelDescriptor::CuspedSphere { .. } => {
                let (_, omega) = self.profile.as_ref().unwrap().second(r.ln());
                omega / (2.0 * r * r)
            }
        }
    }

    /// Density of `iR^L` at chart radius `r`, from the closed-form potential.
    pub fn radial_curvature_density(&self, r: f64) -> f64 {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => self.radial_volume_density(r),
            ModelDescriptor::FubiniStudySphere { degree } => degree as f64 * self.radial_volume_density(r),
            ModelDescriptor::CuspedSphere { .. } => {
                let (curv, _) = self.profile.as_ref().unwrap().second(r.ln());
                curv / (2.0 * r * r)
            }
        }
    }

    /// `ln w` as a function of `u = ln r`.
    pub fn log_radial_log_weight(&self, u: f64) -> f64 {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => (-2.0 * u).ln(),
            ModelDescriptor::FubiniStudySphere { degree } => -(degree as f64) * softplus(2.0 * u),
            ModelDescriptor::CuspedSphere { .. } => -self.profile.as_ref().unwrap().phi(u),
        }
    }

    /// Breakpoints of the log-radial profile (where it is only C²).
    pub fn log_radial_breaks(&self) -> Vec<f64> {
        match self.descriptor {
            ModelDescriptor::CuspedSphere { blend, cusp_at_origin: true, .. } => vec![blend[0].ln(), blend[1].ln()],
            _ => Vec::new(),
        }
    }

    /// Curvature mass per unit `du dθ` at `u = ln r`, i.e. `r² ×` the
    /// curvature density. Finite wherever the model is defined, including
    /// radii whose square underflows.
    pub fn log_radial_curvature(&self, u: f64) -> f64 {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => 0.5 / (u * u),
            ModelDescriptor::FubiniStudySphere { degree } => {
                let q = logistic(2.0 * u);
                2.0 * degree as f64 * q * (1.0 - q)
            }
            ModelDescriptor::CuspedSphere { .. } => 0.5 * self.profile.as_ref().unwrap().second(u).0,
        }
    }

    /// Volume mass per unit `du dθ` at `u = ln r`.
    pub fn log_radial_volume(&self, u: f64) -> f64 {
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => 0.5 / (u * u),
            ModelDescriptor::FubiniStudySphere { .. } => {
                let q = logistic(2.0 * u);
                2.0 * q * (1.0 - q)
            }
            ModelDescriptor::CuspedSphere { .. } => 0.5 * self.profile.as_ref().unwrap().second(u).1,
        }
    }

    /// Log-radial slope `d(-ln w)/d ln r`.
    pub fn radial_potential_slope(&self, r: f64) -> f64 {
        let u = r.ln();
        match self.descriptor {
            ModelDescriptor::PuncturedDisk => -1.0 / u,
            ModelDescriptor::FubiniStudySphere { degree } => 2.0 * degree as f64 * r * r / (1.0 + r * r),
            ModelDescriptor::CuspedSphere { .. } => self.profile.as_ref().unwrap().dphi(u),
        }
    }

    /// `ln w(z)`.
    pub fn log_weight(&self, z: Point) -> Result<f64> {
        let r = self.check(z)?;
        Ok(self.radial_log_weight(r))
    }

    /// `|1^{⊗p}|²_{h^p}(z) = w(z)^p`.
    pub fn bundle_weight(&self, z: Point, p: u32) -> Result<f64> {
        let lw = self.log_weight(z)?;
        Ok((p as f64 * lw).exp())
    }

    pub fn volume_density(&self, z: Point) -> Result<f64> {
        let r = self.check(z)?;
        Ok(self.radial_volume_density(r))
    }

    pub fn curvature_density(&self, z: Point) -> Result<f64> {
        let r = self.check(z)?;
        Ok(self.radial_curvature_density(r))
    }

    /// `a(z) = iR^L / ω_Σ`. Closed form on the disk and sphere; on the cusped
    /// sphere a five-point Laplacian of `-ln w` with step `1e-4` times the
    /// distance to the nearest puncture, extrapolated once.
    pub fn curvature_ratio(&self, z: Point) -> Result<f64> {
        let r = self.check(z)?;
        match self.kind() {
            ModelKind::PuncturedDisk => Ok(1.0),
            ModelKind::FubiniStudySphere => Ok(self.epsilon0),
            ModelKind::CuspedSphere => {
                let d = self.distance_to_puncture(z);
                let h = if d.is_finite() { 1e-4 * d } else { 1e-4 * (1.0 + r) };
                let prof = self.profile.as_ref().unwrap();
                let u = r.ln();
                let r2 = r * r;
                let stencil = |h: f64| -> Result<f64> {
                    let mut sum = 0.0;
                    for step in [Complex64::new(h, 0.0), Complex64::new(-h, 0.0), Complex64::new(0.0, h), Complex64::new(0.0, -h)] {
                        self.check(z + step)?;
                        // ln|z + step| - ln|z| from the exact change in |z|²
                        let du = 0.5 * ((2.0 * (z.conj() * step).re + h * h) / r2).ln_1p();
                        sum += prof.phi_increment(u, du);
                    }
                    Ok(sum / (h * h))
                };
                // one Richardson step removes the h² term, which dominates where
                // the potential is nearly harmonic
                let lap = (4.0 * stencil(0.5 * h)? - stencil(h)?) / 3.0;
                Ok(0.5 * lap / self.radial_volume_density(r))
            }
        }
    }

    /// Closed-form `a(z)` from the log-radial profile.
    pub fn curvature_ratio_exact(&self, z: Point) -> Result<f64> {
        let r = self.check(z)?;
        Ok(self.radial_curvature_density(r) / self.radial_volume_density(r))
    }

    fn scan_min_ratio(&self) -> f64 {
        let Some(prof) = self.profile.as_ref() else { return self.epsilon0 };
        let mut min = f64::INFINITY;
        let (lo, hi) = if prof.cusp { (prof.u_in - 1.0, prof.u_out + 1.0) } else { (-6.0, 6.0) };
        let n = 4000;
        for i in 0..=n {
            let u = lo + (hi - lo) * i as f64 / n as f64;
            let (c, o) = prof.second(u);
            min = min.min(c / o);
        }
        // far field of the background is exactly a = 1
        min.min(1.0)
    }

    /// `∫ iR^L` over the whole chart domain, i.e. `2π deg_h(L)`.
    pub fn total_curvature_mass(&self) -> Result<f64> {
        if self.kind() == ModelKind::PuncturedDisk {
            return Err(Error::Unsupported("the disk model is local; its total curvature is infinite".into()));
        }
        let opts = QuadOptions::with_tolerances(1e-13, 1e-12);
        let r = quad::integrate_real_line(
            |u: f64| 2.0 * PI * self.log_radial_curvature(u),
            opts,
        )?;
        Ok(r.value)
    }
}

/// Regions of the chart. Every kind has a piecewise-smooth boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    ChartDisk { center: Point, radius: f64 },
    /// `r_inner < |z| < r_outer`, centered at the chart origin.
    ChartAnnulus { r_inner: f64, r_outer: f64 },
    /// Points of the sphere within `angular_radius` (radians on the unit
    /// sphere) of the point with chart coordinate `center`.
    SphericalCap { center: Point, angular_radius: f64 },
    ChartRectangle { min: Point, max: Point },
}

fn to_unit_sphere(z: Point) -> [f64; 3] {
    let s = 1.0 + z.norm_sqr();
    [2.0 * z.re / s, 2.0 * z.im / s, (z.norm_sqr() - 1.0) / s]
}

fn from_unit_sphere(v: [f64; 3]) -> Option<Point> {
    let d = 1.0 - v[2];
    if d <= 0.0 {
        None
    } else {
        Some(Complex64::new(v[0] / d, v[1] / d))
    }
}

impl Region {
    pub fn annulus(r_inner: f64, r_outer: f64) -> Self {
        Region::ChartAnnulus { r_inner, r_outer }
    }

    pub fn disk(center: Point, radius: f64) -> Self {
        Region::ChartDisk { center, radius }
    }

    pub fn contains(&self, z: Point) -> bool {
        match *self {
            Region::ChartDisk { center, radius } => (z - center).norm() < radius,
            Region::ChartAnnulus { r_inner, r_outer } => {
                let r = z.norm();
                r > r_inner && r < r_outer
            }
            Region::SphericalCap { center, angular_radius } => {
                let a = to_unit_sphere(center);
                let b = to_unit_sphere(z);
                let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
                dot.acos() < angular_radius
            }
            Region::ChartRectangle { min, max } => z.re > min.re && z.re < max.re && z.im > min.im && z.im < max.im,
        }
    }

    /// Chart distance from `z` to the region boundary.
    pub fn boundary_distance(&self, z: Point) -> f64 {
        match *self {
            Region::ChartDisk { center, radius } => ((z - center).norm() - radius).abs(),
            Region::ChartAnnulus { r_inner, r_outer } => {
                let r = z.norm();
                (r - r_inner).abs().min((r - r_outer).abs())
            }
            Region::SphericalCap { .. } => match self.as_chart_disk() {
                Some(Region::ChartDisk { center, radius }) => ((z - center).norm() - radius).abs(),
                _ => f64::INFINITY,
            },
            Region::ChartRectangle { min, max } => {
                let dx = (z.re - min.re).abs().min((z.re - max.re).abs());
                let dy = (z.im - min.im).abs().min((z.im - max.im).abs());
                let inside_x = z.re >= min.re && z.re <= max.re;
                let inside_y = z.im >= min.im && z.im <= max.im;
                match (inside_x, inside_y) {
                    (true, true) => dx.min(dy),
                    (true, false) => dy,
                    (false, true) => dx,
                    (false, false) => dx.hypot(dy),
                }
            }
        }
    }

    /// The chart image of a spherical cap, when the cap avoids the point at
    /// infinity.
    pub fn as_chart_disk(&self) -> Option<Region> {
        match *self {
            Region::SphericalCap { center, angular_radius } => {
                let v = to_unit_sphere(center);
                let polar = v[2].clamp(-1.0, 1.0).acos(); // angle from north pole (∞)
                if angular_radius >= polar {
                    return None;
                }
                let theta = (-v[2]).clamp(-1.0, 1.0).acos(); // angle from the south pole (0)
                let phase = if center.norm() > 0.0 { center / center.norm() } else { Complex64::new(1.0, 0.0) };
                let point = |t: f64| -> Point {
                    let z = from_unit_sphere([t.sin(), 0.0, -t.cos()]).unwrap();
                    z * phase
                };
                let z1 = point(theta - angular_radius);
                let z2 = point(theta + angular_radius);
                let c = (z1 + z2) * 0.5;
                Some(Region::ChartDisk { center: c, radius: (z2 - z1).norm() * 0.5 })
            }
            Region::ChartDisk { .. } => Some(*self),
            _ => None,
        }
    }

    /// Largest chart modulus reached by the closure of the region.
    pub fn outer_radius(&self) -> f64 {
        match *self {
            Region::ChartDisk { center, radius } => center.norm() + radius,
            Region::ChartAnnulus { r_outer, .. } => r_outer,
            Region::SphericalCap { .. } => match self.as_chart_disk() {
                Some(d) => d.outer_radius(),
                None => f64::INFINITY,
            },
            Region::ChartRectangle { min, max } => {
                let xs = min.re.abs().max(max.re.abs());
                let ys = min.im.abs().max(max.im.abs());
                xs.hypot(ys)
            }
        }
    }

    /// Chart bounding box `(min, max)`.
    pub fn bounding_box(&self) -> Option<(Point, Point)> {
        match *self {
            Region::ChartDisk { center, radius } => Some((
                center - Complex64::new(radius, radius),
                center + Complex64::new(radius, radius),
            )),
            Region::ChartAnnulus { r_outer, .. } => {
                Some((Complex64::new(-r_outer, -r_outer), Complex64::new(r_outer, r_outer)))
            }
            Region::SphericalCap { .. } => self.as_chart_disk().and_then(|d| d.bounding_box()),
            Region::ChartRectangle { min, max } => Some((min, max)),
        }
    }

    /// Check the region is well formed and its closure lies in the domain.
    /// Annuli centered on a puncture may touch it (their area stays finite).
    pub fn validate(&self, model: &ModelSpace) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        match *self {
            Region::ChartDisk { radius, .. } if !(radius > 0.0) => return bad("disk radius must be positive".into()),
            Region::ChartAnnulus { r_inner, r_outer } if !(r_inner >= 0.0 && r_inner <= r_outer) => {
                return bad(format!("annulus radii must satisfy 0 <= r_inner <= r_outer, got {r_inner}, {r_outer}"))
            }
            Region::SphericalCap { angular_radius, .. } if !(angular_radius > 0.0 && angular_radius < PI) => {
                return bad("cap angular radius must lie in (0, π)".into())
            }
            Region::ChartRectangle { min, max } if !(min.re < max.re && min.im < max.im) => {
                return bad("rectangle corners must be ordered".into())
            }
            _ => {}
        }
        if let Region::SphericalCap { .. } = self {
            if model.kind() == ModelKind::PuncturedDisk {
                return bad("spherical caps need a sphere model".into());
            }
        }
        if self.outer_radius() >= model.chart_radius() {
            return bad("region closure leaves the chart domain".into());
        }
        if let Region::ChartAnnulus { .. } = self {
            return Ok(());
        }
        for a in model.punctures() {
            if self.contains(*a) || self.boundary_distance(*a) == 0.0 {
                return bad(format!("region closure contains the puncture {a}"));
            }
        }
        Ok(())
    }
}

/// `Area^L(U) = ∫_U iR^L`.
pub fn area_l(model: &ModelSpace, region: &Region) -> Result<f64> {
    region.validate(model)?;
    integrate_over_region(model, region, |_, _| 1.0, QuadOptions::with_tolerances(1e-14, 1e-12))
}

/// `∫_U f(z) · (curvature density)(z) dA` for a smooth `f`.
pub fn integrate_over_region<F>(model: &ModelSpace, region: &Region, f: F, opts: QuadOptions) -> Result<f64>
where
    F: Fn(&ModelSpace, Point) -> f64,
{
    match *region {
        Region::ChartAnnulus { r_inner, r_outer } => {
            if r_outer <= r_inner {
                return Ok(0.0);
            }
            let radial = |u: f64| -> f64 {
                let r = u.exp();
                let dens = model.log_radial_curvature(u);
                let ang = quad::periodic_trapezoid(|t: f64| f(model, Complex64::from_polar(r, t)), 32);
                ang * dens
            };
            let hi = r_outer.ln();
            if r_inner == 0.0 {
                let v = quad::integrate_semi_infinite(|s: f64| radial(hi - s), 0.0, opts)?;
                Ok(v.value)
            } else {
                Ok(quad::integrate(radial, r_inner.ln(), hi, opts)?.value)
            }
        }
        Region::ChartDisk { center, radius } => {
            let mut failure = None;
            let v = quad::integrate(
                |rho: f64| {
                    if rho == 0.0 {
                        return 0.0;
                    }
                    let inner = quad::integrate_periodic(
                        |t: f64| {
                            let z = center + Complex64::from_polar(rho, t);
                            f(model, z) * model.radial_curvature_density(z.norm())
                        },
                        64,
                        0.1 * opts.rel_tol,
                        1 << 16,
                    );
                    match inner {
                        Ok(v) => v.value * rho,
                        Err(e) => {
                            failure = Some(e);
                            0.0
                        }
                    }
                },
                0.0,
                radius,
                opts,
            )?;
            match failure {
                Some(e) => Err(e),
                None => Ok(v.value),
            }
        }
        Region::SphericalCap { .. } => match region.as_chart_disk() {
            Some(d) => integrate_over_region(model, &d, f, opts),
            None => Err(Error::Unsupported("caps containing the point at infinity".into())),
        },
        Region::ChartRectangle { min, max } => {
            let v = quad::integrate(
                |y: f64| {
                    quad::integrate(
                        |x: f64| {
                            let z = Complex64::new(x, y);
                            f(model, z) * model.radial_curvature_density(z.norm())
                        },
                        min.re,
                        max.re,
                        opts,
                    )
                    .map(|r| r.value)
                    .unwrap_or(f64::NAN)
                },
                min.im,
                max.im,
                opts,
            )?;
            if v.value.is_finite() {
                Ok(v.value)
            } else {
                Err(Error::Quadrature { what: "inner rectangle quadrature".into(), achieved: f64::NAN })
            }
        }
    }
}

/// Metric length of the chart segment `[x, y]`; an upper bound on the
/// Riemannian distance, exact along radial lines through a pole of symmetry.
pub fn local_distance(model: &ModelSpace, x: Point, y: Point) -> Result<f64> {
    model.check(x)?;
    model.check(y)?;
    let d = y - x;
    let len = d.norm();
    if len == 0.0 {
        return Ok(0.0);
    }
    for a in model.punctures() {
        let t = (((a - x) * d.conj()).re / (len * len)).clamp(0.0, 1.0);
        if (x + d * t - a).norm() == 0.0 {
            return Err(Error::Domain(format!("segment passes through the puncture {a}")));
        }
    }
    let v = quad::integrate(
        |t: f64| model.radial_volume_density((x + d * t).norm()).sqrt(),
        0.0,
        1.0,
        QuadOptions::with_tolerances(1e-15, 1e-13),
    )?;
    Ok(v.value * len)
}

/// Polar verification grid with log-spaced radii in `[r_min, r_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub n_radial: usize,
    pub n_angular: usize,
}

impl ConditionGrid {
    pub fn default_for(model: &ModelSpace) -> Self {
        match model.kind() {
            ModelKind::PuncturedDisk => ConditionGrid { r_min: 1e-6, r_max: 0.95, n_radial: 60, n_angular: 8 },
            _ => ConditionGrid { r_min: 1e-3, r_max: 1e2, n_radial: 120, n_angular: 8 },
        }
    }

    pub fn points(&self) -> Vec<Point> {
        let mut pts = Vec::with_capacity(self.n_radial * self.n_angular);
        let (a, b) = (self.r_min.ln(), self.r_max.ln());
        for i in 0..self.n_radial {
            let r = if self.n_radial == 1 { self.r_min } else { (a + (b - a) * i as f64 / (self.n_radial - 1) as f64).exp() };
            for j in 0..self.n_angular {
                let t = 2.0 * PI * (j as f64 + 0.5) / self.n_angular as f64;
                pts.push(Complex64::from_polar(r, t));
            }
        }
        pts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub n_points: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Largest `|a - 1|` over grid points inside the exact cusp neighbourhood.
    pub max_cusp_deviation: Option<f64>,
    pub epsilon0: f64,
    pub positivity_pass: bool,
    pub cusp_pass: bool,
    pub pass: bool,
}

/// Tolerance on `|a - 1|` inside cusp neighbourhoods for the finite-difference curvature.
pub const CUSP_RATIO_TOLERANCE: f64 = 1e-6;
/// Allowance for finite-difference error when comparing grid ratios with `ε₀`.
pub const POSITIVITY_SLACK: f64 = 1e-5;

pub fn verify_conditions(model: &ModelSpace, grid: &ConditionGrid) -> Result<ConditionReport> {
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    let mut cusp_dev: Option<f64> = None;
    let mut n = 0;
    for z in grid.points() {
        if !model.contains(z) {
            continue;
        }
        let a = model.curvature_ratio(z)?;
        n += 1;
        min_ratio = min_ratio.min(a);
        max_ratio = max_ratio.max(a);
        if let Some(rc) = model.cusp_radius() {
            if z.norm() < rc && model.distance_to_puncture(z).is_finite() {
                let d = (a - 1.0).abs();
                cusp_dev = Some(cusp_dev.map_or(d, |c: f64| c.max(d)));
            }
        }
    }
    if n == 0 {
        return Err(Error::Precondition("verification grid has no points in the domain".into()));
    }
    let eps = model.epsilon0();
    let positivity_pass = min_ratio > 0.0 && eps > 0.0 && min_ratio >= eps - POSITIVITY_SLACK;
    let cusp_pass = cusp_dev.map_or(true, |d| d <= CUSP_RATIO_TOLERANCE);
    Ok(ConditionReport {
        n_points: n,
        min_ratio,
        max_ratio,
        max_cusp_deviation: cusp_dev,
        epsilon0: eps,
        positivity_pass,
        cusp_pass,
        pass: positivity_pass && cusp_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Point {
        Complex64::new(re, im)
    }

    fn cusped() -> ModelSpace {
        ModelSpace::cusped_sphere(1, DEFAULT_BLEND, DEFAULT_BACKGROUND_SCALE, true).unwrap()
    }

    #[test]
    fn disk_weight_examples() {
        let disk = ModelSpace::punctured_disk();
        let z = c((-0.5f64).exp(), 0.0);
        assert!((disk.bundle_weight(z, 1).unwrap() - 1.0).abs() < 1e-14);
        let w = disk.bundle_weight(c(0.5, 0.0), 2).unwrap();
        assert!((w - 0.25f64.ln().powi(2)).abs() < 1e-13);
        assert!((w - 1.921_812_055_672_815).abs() < 1e-12);
    }

    #[test]
    fn weight_errors() {
        let disk = ModelSpace::punctured_disk();
        assert!(matches!(disk.bundle_weight(c(0.0, 0.0), 1), Err(Error::Domain(_))));
        assert!(matches!(disk.bundle_weight(c(1.0, 0.0), 1), Err(Error::Domain(_))));
        assert!(matches!(disk.volume_density(c(0.0, 1.2)), Err(Error::Domain(_))));
        let cs = cusped();
        assert!(cs.bundle_weight(c(0.0, 0.0), 2).is_err());
        assert!(cs.bundle_weight(c(3.0, 0.0), 2).is_ok());
    }

    #[test]
    fn sphere_weight_at_origin() {
        let s = ModelSpace::sphere(1).unwrap();
        assert_eq!(s.bundle_weight(c(0.0, 0.0), 3).unwrap(), 1.0);
        let ratio = s.volume_density(c(0.0, 0.0)).unwrap() / s.volume_density(c(1.0, 0.0)).unwrap();
        assert!((ratio - 4.0).abs() < 1e-14);
    }

    #[test]
    fn disk_density_examples() {
        let disk = ModelSpace::punctured_disk();
        let z = c((-1.0f64).exp(), 0.0); // |z|² = e^{-2}
        let d = disk.volume_density(z).unwrap();
        assert!((d - 2.0 / ((-2.0f64).exp() * 4.0)).abs() < 1e-12);
        let d = disk.volume_density(c(0.5, 0.0)).unwrap();
        assert!((d - 2.0 / (0.25 * 0.25f64.ln().powi(2))).abs() < 1e-12);
        assert!((d / 2.0 - 2.0814).abs() < 1e-4);
    }

    #[test]
    fn curvature_ratios() {
        let disk = ModelSpace::punctured_disk();
        assert_eq!(disk.curvature_ratio(c(0.3, -0.2)).unwrap(), 1.0);
        let s = ModelSpace::sphere(3).unwrap();
        assert_eq!(s.curvature_ratio(c(0.0, 0.0)).unwrap(), s.curvature_ratio(c(5.0, 2.0)).unwrap());
        let cs = cusped();
        for r in [1e-4, 1e-2, 0.05, 0.09] {
            let a = cs.curvature_ratio(c(r * 0.6, r * 0.8)).unwrap();
            assert!((a - 1.0).abs() < 1e-6, "r={r} a={a}");
        }
    }

    #[test]
    fn cusped_finite_difference_matches_profile() {
        let cs = cusped();
        for r in [0.12, 0.2, 0.3, 0.45, 0.7, 2.0, 10.0] {
            let z = c(0.0, r);
            let fd = cs.curvature_ratio(z).unwrap();
            let exact = cs.curvature_ratio_exact(z).unwrap();
            assert!((fd - exact).abs() < 1e-5 * exact.max(1.0), "r={r} fd={fd} exact={exact}");
            assert!(exact >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn cusped_weight_is_cusp_weight_inside_blend() {
        let cs = cusped();
        let disk = ModelSpace::punctured_disk();
        for r in [1e-5, 1e-3, 0.05, 0.099] {
            let z = c(r, 0.0);
            assert!((cs.log_weight(z).unwrap() - disk.log_weight(z).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn cusped_potential_continuous_across_blend() {
        let cs = cusped();
        for r in [0.1, 0.5] {
            let a = cs.radial_log_weight(r * (1.0 - 1e-9));
            let b = cs.radial_log_weight(r * (1.0 + 1e-9));
            assert!((a - b).abs() < 1e-7, "r={r}: {a} vs {b}");
        }
        // slope of the potential matches the numerical derivative of ln w
        for r in [0.2f64, 0.35] {
            let h = 1e-6;
            let d = -(cs.radial_log_weight((r.ln() + h).exp()) - cs.radial_log_weight((r.ln() - h).exp())) / (2.0 * h);
            assert!((d - cs.radial_potential_slope(r)).abs() < 1e-7);
        }
    }

    #[test]
    fn degree_from_curvature_mass() {
        for model in [ModelSpace::sphere(2).unwrap(), cusped()] {
            let deg = model.total_curvature_mass().unwrap() / (2.0 * PI);
            assert!((deg - model.bundle_degree().unwrap() as f64).abs() < 1e-8, "{deg}");
        }
    }

    #[test]
    fn area_additivity_and_closed_form() {
        let disk = ModelSpace::punctured_disk();
        let a12 = area_l(&disk, &Region::annulus(0.01, 0.2)).unwrap();
        let a23 = area_l(&disk, &Region::annulus(0.2, 0.6)).unwrap();
        let a13 = area_l(&disk, &Region::annulus(0.01, 0.6)).unwrap();
        assert!(((a12 + a23 - a13) / a13).abs() < 1e-10);
        // closed form 2π (1/|ln r_out²| - 1/|ln r_in²|)
        let cf = |r: f64| 2.0 * PI / (r * r).ln().abs();
        assert!(((a13 - (cf(0.6) - cf(0.01))) / a13).abs() < 1e-10);
        // the punctured disk of radius e^{-1/2} has Poincaré area 2π
        let full = area_l(&disk, &Region::annulus(0.0, (-0.5f64).exp())).unwrap();
        assert!((full - 2.0 * PI).abs() < 1e-9, "{full}");
        let thin = area_l(&disk, &Region::annulus(0.3, 0.3)).unwrap();
        assert_eq!(thin, 0.0);
        let tiny = area_l(&disk, &Region::annulus(0.3, 0.3 + 1e-9)).unwrap();
        assert!(tiny < 1e-7);
    }

    #[test]
    fn sphere_hemisphere_and_cap() {
        let s = ModelSpace::sphere(1).unwrap();
        let h = area_l(&s, &Region::disk(c(0.0, 0.0), 1.0)).unwrap();
        assert!((h - PI).abs() < 1e-10);
        let cap = Region::SphericalCap { center: c(0.0, 0.0), angular_radius: PI / 2.0 };
        assert!((area_l(&s, &cap).unwrap() - PI).abs() < 1e-9);
        // an off-center cap has the same area as the centered one
        let cap2 = Region::SphericalCap { center: c(0.7, 0.4), angular_radius: 0.6 };
        let cap0 = Region::SphericalCap { center: c(0.0, 0.0), angular_radius: 0.6 };
        let (a2, a0) = (area_l(&s, &cap2).unwrap(), area_l(&s, &cap0).unwrap());
        assert!((a2 - a0).abs() < 1e-8, "{a2} {a0}");
        let rect = Region::ChartRectangle { min: c(-0.5, -0.5), max: c(0.5, 0.5) };
        let left = Region::ChartRectangle { min: c(-0.5, -0.5), max: c(0.0, 0.5) };
        let right = Region::ChartRectangle { min: c(0.0, -0.5), max: c(0.5, 0.5) };
        let (t, l, r) = (area_l(&s, &rect).unwrap(), area_l(&s, &left).unwrap(), area_l(&s, &right).unwrap());
        assert!(((l + r - t) / t).abs() < 1e-10);
    }

    #[test]
    fn cap_membership_matches_chart_disk() {
        let cap = Region::SphericalCap { center: c(0.3, -0.8), angular_radius: 0.9 };
        let disk = cap.as_chart_disk().unwrap();
        for i in 0..200 {
            let t = i as f64 * 0.31;
            let z = c(0.3 + 1.5 * t.cos() * (i as f64 / 200.0), -0.8 + 1.5 * t.sin() * (i as f64 / 200.0));
            if disk.boundary_distance(z) > 1e-9 {
                assert_eq!(cap.contains(z), disk.contains(z), "{z}");
            }
        }
    }

    #[test]
    fn region_validation() {
        let disk = ModelSpace::punctured_disk();
        assert!(Region::disk(c(0.0, 0.0), 0.2).validate(&disk).is_err());
        assert!(Region::disk(c(0.5, 0.0), 0.2).validate(&disk).is_ok());
        assert!(Region::annulus(0.0, 0.5).validate(&disk).is_ok());
        assert!(Region::annulus(0.1, 1.0).validate(&disk).is_err());
        assert!(Region::annulus(0.5, 0.1).validate(&disk).is_err());
    }

    #[test]
    fn distance_properties() {
        let disk = ModelSpace::punctured_disk();
        let x = c(0.05, 0.0);
        assert_eq!(local_distance(&disk, x, x).unwrap(), 0.0);
        let y = c(0.2, 0.1);
        let dxy = local_distance(&disk, x, y).unwrap();
        let dyx = local_distance(&disk, y, x).unwrap();
        assert!((dxy - dyx).abs() < 1e-12);
        // radial closed form: (1/√2) |ln(ln r2 / ln r1)|
        let (r1, r2) = (1e-3, 0.3);
        let d = local_distance(&disk, c(r1, 0.0), c(r2, 0.0)).unwrap();
        let exact = (r2.ln() / r1.ln()).ln().abs() / 2f64.sqrt();
        assert!((d - exact).abs() < 1e-6);
        assert!(local_distance(&disk, c(-0.1, 0.0), c(0.1, 0.0)).is_err());
    }

    #[test]
    fn verify_reports() {
        let disk = ModelSpace::punctured_disk();
        let r = verify_conditions(&disk, &ConditionGrid::default_for(&disk)).unwrap();
        assert!(r.pass);
        assert_eq!(r.min_ratio, 1.0);
        let s = ModelSpace::sphere(2).unwrap();
        let r = verify_conditions(&s, &ConditionGrid::default_for(&s)).unwrap();
        assert!(r.pass && r.min_ratio == r.max_ratio);
        let cs = cusped();
        let r = verify_conditions(&cs, &ConditionGrid::default_for(&cs)).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_cusp_deviation.unwrap() < 1e-6);
    }

    #[test]
    fn steep_background_breaks_positivity() {
        // a background scale so large that its slope cannot dominate the cusp slope
        let bad = ModelSpace::cusped_sphere(1, [0.3, 0.31], 5.0, true).unwrap();
        let r = verify_conditions(&bad, &ConditionGrid { r_min: 0.25, r_max: 0.4, n_radial: 200, n_angular: 2 }).unwrap();
        assert!(!r.pass);
        assert!(r.min_ratio < 0.0);
    }

    #[test]
    fn descriptor_round_trip() {
        let cs = cusped();
        let json = serde_json::to_string(&cs).unwrap();
        let back: ModelSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cs);
        assert_eq!(back.epsilon0(), cs.epsilon0());
    }
}
