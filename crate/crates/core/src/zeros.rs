//! Zero sets of sections, zero counting, vanishing orders, divisor pairings,
//! and the quadrature identities that tie zeros to `log |s|`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{RandomSection, SectionBasis};
use crate::models::{ModelKind, ModelSpace, Point, Region};
use crate::poly;
use crate::quad::{self, QuadOptions};

/// Roots closer than this (times `max(1, |z|)`) are merged into one root
/// with multiplicity.
pub const CLUSTER_RADIUS: f64 = 1e-7;
/// Coefficients below this fraction of the coefficient scale count as zero.
pub const COEFFICIENT_THRESHOLD: f64 = 1e-12;
/// Roots closer than this to a region boundary are flagged.
pub const BOUNDARY_FLAG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub z: Point,
    pub multiplicity: u32,
    /// Relative backward error `|f(z)| / Σ|a_k||z|^k`.
    pub residual: f64,
}

/// Zeros of a section on the surface, plus its orders at the punctures and,
/// on sphere models, at infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroSet {
    pub roots: Vec<Root>,
    pub puncture_orders: Vec<(Point, u32)>,
    pub order_at_infinity: u32,
    /// Degree of the frame polynomial's monomial range (`max exponent`).
    pub degree: u32,
    /// Worst root residual.
    pub residual: f64,
}

impl ZeroSet {
    /// Number of zeros on the surface, with multiplicity.
    pub fn total(&self) -> u32 {
        self.roots.iter().map(|r| r.multiplicity).sum()
    }

    /// `Σ multiplicities + puncture orders + order at ∞`, which equals `degree`.
    pub fn accounted(&self) -> u32 {
        self.total() + self.puncture_orders.iter().map(|x| x.1).sum::<u32>() + self.order_at_infinity
    }

    /// CSV with columns `re,im,multiplicity,residual`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("re,im,multiplicity,residual\n");
        for r in &self.roots {
            let _ = writeln!(s, "{:e},{:e},{},{:e}", r.z.re, r.z.im, r.multiplicity, r.residual);
        }
        s
    }
}

/// Normalized size of each frame coefficient: `|a_k| / |T_kk|`, so that the
/// threshold is relative to the coefficient vector, not the basis scaling.
fn normalized_magnitudes(basis: &SectionBasis, poly: &[Complex64]) -> Vec<f64> {
    let mut out = vec![0.0; poly.len()];
    match basis.log_norms() {
        Some(ln) => {
            for (&k, l) in basis.exponents().iter().zip(ln) {
                out[k as usize] = poly[k as usize].norm() * l.exp();
            }
        }
        None => {
            let t = basis.transform_matrix();
            let d = basis.dim();
            for (j, &k) in basis.exponents().iter().enumerate() {
                let tkk = t[j * d + j].norm();
                out[k as usize] = poly[k as usize].norm() / tkk;
            }
        }
    }
    out
}

/// Index of the first and last coefficients above the threshold.
fn significant_range(basis: &SectionBasis, poly: &[Complex64]) -> Result<(usize, usize)> {
    let mags = normalized_magnitudes(basis, poly);
    let scale = mags.iter().cloned().fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::Degenerate("all section coefficients vanish".into()));
    }
    let thr = COEFFICIENT_THRESHOLD * scale;
    let lo = mags.iter().position(|&m| m > thr).unwrap();
    let hi = mags.iter().rposition(|&m| m > thr).unwrap();
    Ok((lo, hi))
}

/// Zeros of `s = Σ η_j S_j` via the roots of its frame polynomial.
pub fn find_zeros(section: &RandomSection) -> Result<ZeroSet> {
    let basis = section.basis();
    let poly = section.frame_polynomial()?;
    let (lo, hi) = significant_range(basis, &poly)?;
    let degree = basis.max_exponent();
    let model = basis.model();
    let (z, residual) = poly::roots(&poly[lo..=hi])?;
    let mut roots: Vec<Root> = poly::cluster(&z, CLUSTER_RADIUS)
        .into_iter()
        .map(|(z, m)| Root { z, multiplicity: m, residual: poly::newton_correction(&poly[lo..=hi], z).1 })
        .collect();
    let origin = Complex64::new(0.0, 0.0);
    let mut puncture_orders = Vec::new();
    if lo > 0 {
        if model.punctures().contains(&origin) {
            puncture_orders.push((origin, lo as u32));
        } else {
            roots.push(Root { z: origin, multiplicity: lo as u32, residual: 0.0 });
        }
    } else if model.punctures().contains(&origin) {
        puncture_orders.push((origin, 0));
    }
    roots.sort_by(|a, b| a.z.norm().total_cmp(&b.z.norm()).then(a.z.arg().total_cmp(&b.z.arg())));
    let order_at_infinity = match model.kind() {
        ModelKind::PuncturedDisk => 0,
        _ => degree - hi as u32,
    };
    let degree = match model.kind() {
        // the truncated disk polynomial has no point at infinity on the surface
        ModelKind::PuncturedDisk => hi as u32,
        _ => degree,
    };
    Ok(ZeroSet { roots, puncture_orders, order_at_infinity, degree, residual })
}

/// Vanishing order at the chart origin: the first significant exponent.
pub fn vanishing_order(section: &RandomSection, puncture: Point) -> Result<u32> {
    if puncture != Complex64::new(0.0, 0.0) {
        return Err(Error::Unsupported("vanishing order is computed at the chart origin only".into()));
    }
    let poly = section.frame_polynomial()?;
    let (lo, _) = significant_range(section.basis(), &poly)?;
    Ok(lo as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroCount {
    pub count: u32,
    /// Roots within `1e-9` of the region boundary.
    pub near_boundary: u32,
}

/// Zeros strictly inside the region, with multiplicity.
pub fn count_zeros_in(zs: &ZeroSet, region: &Region) -> ZeroCount {
    let mut count = 0;
    let mut near = 0;
    for r in &zs.roots {
        if region.contains(r.z) {
            count += r.multiplicity;
        }
        if region.boundary_distance(r.z) < BOUNDARY_FLAG {
            near += r.multiplicity;
        }
    }
    ZeroCount { count, near_boundary: near }
}

/// Winding number of the frame polynomial along one positively oriented
/// circle, by the doubling periodic trapezoid rule.
fn circle_winding(poly: &[Complex64], center: Point, radius: f64, min_nodes: usize) -> Result<f64> {
    let f = |t: f64| -> Complex64 {
        let e = Complex64::from_polar(1.0, t);
        let z = center + e * radius;
        let (p, dp) = poly::eval_scaled(poly, z);
        dp / p * e * radius
    };
    // reject contours passing too close to a zero: the Newton step is a
    // distance estimate
    let n0 = min_nodes.max(64);
    let mut closest = f64::INFINITY;
    for j in 0..4 * n0 {
        let t = 2.0 * PI * j as f64 / (4 * n0) as f64;
        let z = center + Complex64::from_polar(radius, t);
        let (ratio, _) = poly::newton_correction(poly, z);
        closest = closest.min(ratio.norm());
    }
    if closest < 1e-6 {
        return Err(Error::Precondition(format!("contour |z - {center}| = {radius} passes within {closest:.1e} of a zero")));
    }
    let v = quad::integrate_periodic(f, n0, 1e-7, 1 << 20)?;
    Ok(v.value.re / (2.0 * PI))
}

/// Independent zero count in a region from `(1/2πi) ∮ f'/f dz`.
pub fn argument_principle_count(section: &RandomSection, region: &Region, min_nodes: usize) -> Result<i64> {
    let poly = section.frame_polynomial()?;
    let (lo, hi) = significant_range(section.basis(), &poly)?;
    // the factor z^lo only matters for contours around the origin
    let trimmed = &poly[lo..=hi];
    let origin_inside = |c: Point, r: f64| c.norm() < r;
    let winding = |c: Point, r: f64| -> Result<f64> {
        let w = circle_winding(trimmed, c, r, min_nodes)?;
        Ok(if origin_inside(c, r) { w + lo as f64 } else { w })
    };
    let value = match *region {
        Region::ChartDisk { center, radius } => winding(center, radius)?,
        Region::ChartAnnulus { r_inner, r_outer } => {
            let inner = if r_inner > 0.0 { winding(Complex64::new(0.0, 0.0), r_inner)? } else { lo as f64 };
            winding(Complex64::new(0.0, 0.0), r_outer)? - inner
        }
        Region::SphericalCap { .. } => match region.as_chart_disk() {
            Some(Region::ChartDisk { center, radius }) => winding(center, radius)?,
            _ => return Err(Error::Unsupported("caps containing the point at infinity".into())),
        },
        Region::ChartRectangle { .. } => {
            return Err(Error::Unsupported("argument principle on rectangles".into()));
        }
    };
    // zeros at a puncture are not zeros on the surface
    let value = match *region {
        Region::ChartAnnulus { .. } => value,
        _ => {
            let origin = Complex64::new(0.0, 0.0);
            if section.basis().model().punctures().contains(&origin) && region.contains(origin) {
                value - lo as f64
            } else {
                value
            }
        }
    };
    let rounded = value.round();
    if (value - rounded).abs() >= 1e-3 {
        return Err(Error::NonConvergence { worst_residual: (value - rounded).abs() });
    }
    Ok(rounded as i64)
}

/// Smooth test functions on the chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TestFunction {
    /// `exp(1 − 1/(1 − |z−c|²/R²))` inside the disk, 0 outside; equals 1 at `c`.
    Bump { center: Point, radius: f64 },
    /// `(1 + a·(x − cx) + b·(y − cy)) · bump`.
    TiltedBump { center: Point, radius: f64, tilt: [f64; 2] },
    /// Radial plateau: 1 on `|z| ≤ inner`, 0 on `|z| ≥ outer`, smooth between.
    Plateau { inner: f64, outer: f64 },
    /// The constant function.
    Constant { value: f64 },
    /// A multiple of a base function (Laplacian by finite differences).
    Scaled { factor: f64, base: Base },
}

/// Base functions for `Scaled`, kept non-recursive for serialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Base {
    Bump { center: Point, radius: f64 },
    Plateau { inner: f64, outer: f64 },
}

fn bump_parts(z: Point, center: Point, radius: f64) -> Option<(f64, f64, f64, f64)> {
    let d = z - center;
    let s = d.norm_sqr() / (radius * radius);
    if s >= 1.0 {
        return None;
    }
    let u = 1.0 - s;
    let g = (1.0 - 1.0 / u).exp();
    // g'(s) and g''(s)
    let g1 = -g / (u * u);
    let g2 = g * (1.0 / (u * u * u * u) - 2.0 / (u * u * u));
    Some((s, g, g1, g2))
}

fn smooth_step(t: f64) -> f64 {
    // C∞ transition from 1 (t ≤ 0) to 0 (t ≥ 1)
    if t <= 0.0 {
        return 1.0;
    }
    if t >= 1.0 {
        return 0.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    b / (a + b)
}

fn plateau(z: Point, inner: f64, outer: f64) -> f64 {
    smooth_step((z.norm() - inner) / (outer - inner))
}

impl TestFunction {
    pub fn value(&self, z: Point) -> f64 {
        match *self {
            TestFunction::Bump { center, radius } => bump_parts(z, center, radius).map_or(0.0, |b| b.1),
            TestFunction::TiltedBump { center, radius, tilt } => bump_parts(z, center, radius).map_or(0.0, |b| {
                let d = z - center;
                (1.0 + tilt[0] * d.re + tilt[1] * d.im) * b.1
            }),
            TestFunction::Plateau { inner, outer } => plateau(z, inner, outer),
            TestFunction::Constant { value } => value,
            TestFunction::Scaled { factor, base } => {
                factor
                    * match base {
                        Base::Bump { center, radius } => TestFunction::Bump { center, radius }.value(z),
                        Base::Plateau { inner, outer } => plateau(z, inner, outer),
                    }
            }
        }
    }

    /// Planar Laplacian `∂²_x + ∂²_y`: closed form for bumps, finite
    /// differences with one Richardson step otherwise.
    pub fn laplacian(&self, z: Point) -> f64 {
        match *self {
            TestFunction::Bump { center, radius } => bump_parts(z, center, radius)
                .map_or(0.0, |(s, _, g1, g2)| 4.0 / (radius * radius) * (s * g2 + g1)),
            TestFunction::TiltedBump { center, radius, tilt } => {
                bump_parts(z, center, radius).map_or(0.0, |(s, _, g1, g2)| {
                    let d = z - center;
                    let lin = 1.0 + tilt[0] * d.re + tilt[1] * d.im;
                    let lap_g = 4.0 / (radius * radius) * (s * g2 + g1);
                    // 2 ∇lin · ∇g, with ∇g = g'(s) 2 (z − c) / R²
                    let grad = 2.0 * g1 / (radius * radius);
                    lin * lap_g + 2.0 * grad * (tilt[0] * d.re + tilt[1] * d.im)
                })
            }
            TestFunction::Constant { .. } => 0.0,
            _ => finite_difference_laplacian(|w| self.value(w), z, 1e-4),
        }
    }

    /// Closed support in the chart, when compact.
    pub fn support(&self) -> Option<Region> {
        match *self {
            TestFunction::Bump { center, radius } | TestFunction::TiltedBump { center, radius, .. } => {
                Some(Region::ChartDisk { center, radius })
            }
            TestFunction::Plateau { outer, .. } => Some(Region::ChartDisk { center: Complex64::new(0.0, 0.0), radius: outer }),
            TestFunction::Scaled { base, .. } => match base {
                Base::Bump { center, radius } => Some(Region::ChartDisk { center, radius }),
                Base::Plateau { outer, .. } => Some(Region::ChartDisk { center: Complex64::new(0.0, 0.0), radius: outer }),
            },
            TestFunction::Constant { .. } => None,
        }
    }

    /// Value at the point at infinity of the sphere, where defined.
    pub fn value_at_infinity(&self) -> Option<f64> {
        match *self {
            TestFunction::Constant { value } => Some(value),
            _ => Some(0.0),
        }
    }

    /// Whether the function is constant on a neighbourhood of every puncture
    /// of the model. Constants qualify only on punctured models.
    pub fn locally_constant_near_punctures(&self, model: &ModelSpace) -> bool {
        let punctures = model.punctures();
        match *self {
            TestFunction::Constant { .. } => !punctures.is_empty(),
            TestFunction::Plateau { inner, .. } | TestFunction::Scaled { base: Base::Plateau { inner, .. }, .. } => {
                inner > 0.0 && punctures.iter().all(|a| a.norm() < inner || self.support().is_some_and(|s| !s.contains(*a) && s.boundary_distance(*a) > 0.0))
            }
            _ => match self.support() {
                Some(s) => punctures.iter().all(|a| !s.contains(*a) && s.boundary_distance(*a) > 0.0),
                None => false,
            },
        }
    }

    /// `∫ φ c₁(L, h)`, with `c₁` density `curvature_density / 2π`.
    pub fn curvature_integral(&self, model: &ModelSpace) -> Result<f64> {
        let opts = QuadOptions::with_tolerances(1e-13, 1e-11);
        match *self {
            TestFunction::Constant { value } => Ok(value * model.total_curvature_mass()? / (2.0 * PI)),
            _ => {
                let support = self.support().expect("non-constant test functions have compact support");
                let v = match support {
                    Region::ChartDisk { center, radius } if center == Complex64::new(0.0, 0.0) => {
                        // radial integration in ln r copes with a cusp at the origin
                        let hi = radius.ln();
                        quad::integrate_semi_infinite(
                            |s: f64| {
                                let u = hi - s;
                                let r = u.exp();
                                let ang = quad::periodic_trapezoid(|t: f64| self.value(Complex64::from_polar(r, t)), 64);
                                ang * model.log_radial_curvature(u)
                            },
                            0.0,
                            opts,
                        )?
                        .value
                    }
                    _ => crate::models::integrate_over_region(model, &support, |_, z| self.value(z), opts)?,
                };
                Ok(v / (2.0 * PI))
            }
        }
    }
}

/// Five-point Laplacian at steps `h` and `h/2`, combined by Richardson
/// extrapolation.
pub fn finite_difference_laplacian<F: Fn(Point) -> f64>(f: F, z: Point, h: f64) -> f64 {
    let stencil = |h: f64| {
        let c = f(z);
        (f(z + Complex64::new(h, 0.0)) + f(z - Complex64::new(h, 0.0)) + f(z + Complex64::new(0.0, h)) + f(z - Complex64::new(0.0, h)) - 4.0 * c)
            / (h * h)
    };
    (4.0 * stencil(0.5 * h) - stencil(h)) / 3.0
}

/// `(1/p) Σ m φ(root)`, including the order at infinity on sphere models.
pub fn pair_divisor(zs: &ZeroSet, phi: &TestFunction, p: u32) -> f64 {
    let mut s: f64 = zs.roots.iter().map(|r| r.multiplicity as f64 * phi.value(r.z)).sum();
    if zs.order_at_infinity > 0 {
        s += zs.order_at_infinity as f64 * phi.value_at_infinity().unwrap_or(0.0);
    }
    s / p as f64
}

/// `∫_{|z−c|<R} g dA` in polar coordinates around `c`, adaptive in both
/// variables with breaks at the given singular points.
fn disk_polar_integral<G>(center: Point, radius: f64, singular: &[Point], g: G, opts: QuadOptions) -> Result<f64>
where
    G: Fn(Point) -> f64,
{
    let mut rbreaks = vec![0.0];
    for s in singular {
        let d = (s - center).norm();
        if d > 0.0 && d < radius {
            rbreaks.push(d);
        }
    }
    rbreaks.push(radius);
    rbreaks.sort_by(f64::total_cmp);
    rbreaks.dedup();
    let angles: Vec<f64> = singular.iter().map(|s| (s - center).arg()).collect();
    let mut failure = None;
    let v = quad::integrate_with_breaks(
        |rho: f64| {
            if rho == 0.0 {
                return 0.0;
            }
            match angular_integral(|t| g(center + Complex64::from_polar(rho, t)), &angles, opts) {
                Ok(a) => a * rho,
                Err(e) => {
                    failure = Some(e);
                    0.0
                }
            }
        },
        &rbreaks,
        opts,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(v.value)
}

/// `∫_0^{2π} h(θ) dθ` with breaks at the given angles.
fn angular_integral<H: Fn(f64) -> f64>(h: H, angles: &[f64], opts: QuadOptions) -> Result<f64> {
    let mut b: Vec<f64> = angles.iter().map(|a| a.rem_euclid(2.0 * PI)).collect();
    b.push(0.0);
    b.push(2.0 * PI);
    b.sort_by(f64::total_cmp);
    b.dedup_by(|a, c| (*a - *c).abs() < 1e-12);
    Ok(quad::integrate_with_breaks(h, &b, opts)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareLelong {
    /// `Σ m φ(root)`.
    pub divisor_sum: f64,
    /// `(1/2π) ∫ Δφ log|s|_{h^p} dA`.
    pub log_term: f64,
    /// `p ∫ φ c₁(L,h)`.
    pub curvature_term: f64,
    pub residual: f64,
    /// Residual over `max(|curvature_term|, sup|φ|)`.
    pub relative: f64,
}

/// Check `Σ m φ(root) = (1/2π)∫ Δφ log|s|_{h^p} dA + p ∫ φ c₁` for a test
/// function supported away from the punctures.
pub fn poincare_lelong_residual(section: &RandomSection, phi: &TestFunction, rel_tol: f64) -> Result<PoincareLelong> {
    let basis = section.basis();
    let model = basis.model();
    let Some(support) = phi.support() else {
        return Err(Error::Precondition("test function must have compact support".into()));
    };
    support.validate(model)?;
    let Region::ChartDisk { center, radius } = support else {
        return Err(Error::Unsupported("test function support must be a chart disk".into()));
    };
    let zs = find_zeros(section)?;
    let divisor_sum: f64 = zs.roots.iter().map(|r| r.multiplicity as f64 * phi.value(r.z)).sum();
    let singular: Vec<Point> = zs.roots.iter().map(|r| r.z).filter(|z| (z - center).norm() < radius).collect();
    let opts = QuadOptions { abs_tol: 1e-12, rel_tol, max_subdivisions: 4000 };
    let integral = disk_polar_integral(
        center,
        radius,
        &singular,
        |z| {
            let l = phi.laplacian(z);
            if l == 0.0 {
                return 0.0;
            }
            match section.log_norm(z) {
                Ok(v) if v.is_finite() => l * v,
                _ => 0.0,
            }
        },
        opts,
    )?;
    let log_term = integral / (2.0 * PI);
    let curvature_term = basis.p() as f64 * phi.curvature_integral(model)?;
    let residual = (divisor_sum - log_term - curvature_term).abs();
    let scale = curvature_term.abs().max(1.0);
    Ok(PoincareLelong { divisor_sum, log_term, curvature_term, residual, relative: residual / scale })
}

/// `∫_U |log |s|_{h^p}| ω_Σ` over a region whose closure avoids the
/// punctures; near a cusp this integral diverges.
pub fn log_norm_integral(section: &RandomSection, region: &Region, rel_tol: f64) -> Result<f64> {
    let basis = section.basis();
    let model = basis.model();
    region.validate(model)?;
    if let Region::ChartAnnulus { r_inner, .. } = *region {
        if r_inner == 0.0 && !model.punctures().is_empty() {
            return Err(Error::Domain(
                "region touches a puncture, where ∫ |log |s|| ω diverges like ∫₀ |log t| dt / (t log² t)".into(),
            ));
        }
    }
    let zs = find_zeros(section)?;
    let singular: Vec<Point> = zs.roots.iter().map(|r| r.z).collect();
    let opts = QuadOptions { abs_tol: 1e-12, rel_tol, max_subdivisions: 4000 };
    let integrand = |z: Point| -> f64 {
        match (section.log_norm(z), model.volume_density(z)) {
            (Ok(l), Ok(v)) if l.is_finite() => l.abs() * v,
            _ => 0.0,
        }
    };
    match *region {
        Region::ChartAnnulus { r_inner, r_outer } => {
            let (a, b) = (r_inner.ln(), r_outer.ln());
            let mut ub = vec![a];
            for z in &singular {
                let u = z.norm().ln();
                if u > a && u < b {
                    ub.push(u);
                }
            }
            ub.extend(model.log_radial_breaks().into_iter().filter(|x| *x > a && *x < b));
            ub.push(b);
            ub.sort_by(f64::total_cmp);
            ub.dedup();
            let angles: Vec<f64> = singular.iter().map(|z| z.arg()).collect();
            let mut failure = None;
            let v = quad::integrate_with_breaks(
                |u: f64| {
                    let r = u.exp();
                    let vol = model.log_radial_volume(u);
                    let h = |t: f64| match section.log_norm(Complex64::from_polar(r, t)) {
                        Ok(l) if l.is_finite() => l.abs(),
                        _ => 0.0,
                    };
                    match angular_integral(h, &angles, opts) {
                        Ok(a) => a * vol,
                        Err(e) => {
                            failure = Some(e);
                            0.0
                        }
                    }
                },
                &ub,
                opts,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(v.value)
        }
        Region::ChartDisk { center, radius } => disk_polar_integral(center, radius, &singular, integrand, opts),
        Region::SphericalCap { .. } => match region.as_chart_disk() {
            Some(Region::ChartDisk { center, radius }) => disk_polar_integral(center, radius, &singular, integrand, opts),
            _ => Err(Error::Unsupported("caps containing the point at infinity".into())),
        },
        Region::ChartRectangle { min, max } => {
            let mut failure = None;
            let v = quad::integrate(
                |y: f64| {
                    let mut xb = vec![min.re];
                    xb.extend(singular.iter().filter(|z| (z.im - y).abs() < 1e-3 && z.re > min.re && z.re < max.re).map(|z| z.re));
                    xb.push(max.re);
                    xb.sort_by(f64::total_cmp);
                    match quad::integrate_with_breaks(|x: f64| integrand(Complex64::new(x, y)), &xb, opts) {
                        Ok(r) => r.value,
                        Err(e) => {
                            failure = Some(e);
                            0.0
                        }
                    }
                },
                min.im,
                max.im,
                opts,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(v.value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{build_basis, Truncation};

    fn c(re: f64, im: f64) -> Point {
        Complex64::new(re, im)
    }

    /// Coefficients `η` making the frame polynomial equal to `target`.
    fn coeffs_for(basis: &SectionBasis, target: &[Complex64]) -> Vec<Complex64> {
        let ln = basis.log_norms().unwrap();
        basis
            .exponents()
            .iter()
            .zip(ln)
            .map(|(&k, l)| target.get(k as usize).copied().unwrap_or(c(0.0, 0.0)) * l.exp())
            .collect()
    }

    #[test]
    fn engineered_double_root_and_origin() {
        // z²(z − 0.5) on the sphere of degree 1 at p = 3
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 3, None).unwrap();
        let eta = coeffs_for(&b, &[c(0.0, 0.0), c(0.0, 0.0), c(-0.5, 0.0), c(1.0, 0.0)]);
        let sec = RandomSection::new(&b, eta).unwrap();
        let zs = find_zeros(&sec).unwrap();
        assert_eq!(zs.accounted(), 3);
        let origin = zs.roots.iter().find(|r| r.z == c(0.0, 0.0)).unwrap();
        assert_eq!(origin.multiplicity, 2);
        assert!(zs.roots.iter().any(|r| (r.z - c(0.5, 0.0)).norm() < 1e-12 && r.multiplicity == 1));
        assert_eq!(zs.order_at_infinity, 0);
    }

    #[test]
    fn order_at_infinity_on_sphere() {
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 5, None).unwrap();
        let eta = coeffs_for(&b, &[c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let zs = find_zeros(&RandomSection::new(&b, eta).unwrap()).unwrap();
        assert_eq!(zs.order_at_infinity, 3);
        assert_eq!(zs.total(), 2);
        assert_eq!(zs.accounted(), 5);
    }

    #[test]
    fn zero_section_is_degenerate() {
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 3, None).unwrap();
        let sec = RandomSection::new(&b, vec![c(0.0, 0.0); 4]).unwrap();
        assert!(matches!(find_zeros(&sec), Err(Error::Degenerate(_))));
        assert!(matches!(vanishing_order(&sec, c(0.0, 0.0)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn vanishing_orders() {
        let disk = ModelSpace::punctured_disk();
        let b = build_basis(&disk, 4, Some(Truncation::Terms { count: 8 })).unwrap();
        let mut eta = vec![c(0.0, 0.0); 8];
        eta[0] = c(0.3, 0.0);
        eta[4] = c(1.0, 1.0);
        assert_eq!(vanishing_order(&RandomSection::new(&b, eta.clone()).unwrap(), c(0.0, 0.0)).unwrap(), 1);
        eta[0] = c(0.0, 0.0);
        eta[2] = c(2.0, 0.0);
        let sec = RandomSection::new(&b, eta).unwrap();
        assert_eq!(vanishing_order(&sec, c(0.0, 0.0)).unwrap(), 3);
        let zs = find_zeros(&sec).unwrap();
        assert_eq!(zs.puncture_orders, vec![(c(0.0, 0.0), 3)]);
    }

    #[test]
    fn argument_principle_examples() {
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 3, None).unwrap();
        let cube = RandomSection::new(&b, coeffs_for(&b, &[c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)])).unwrap();
        let unit = Region::disk(c(0.0, 0.0), 1.0);
        assert_eq!(argument_principle_count(&cube, &unit, 64).unwrap(), 3);
        let lin = RandomSection::new(&b, coeffs_for(&b, &[c(-2.0, 0.0), c(1.0, 0.0)])).unwrap();
        assert_eq!(argument_principle_count(&lin, &unit, 64).unwrap(), 0);
        let near = RandomSection::new(&b, coeffs_for(&b, &[c(-1.0 - 1e-9, 0.0), c(1.0, 0.0)])).unwrap();
        assert!(argument_principle_count(&near, &unit, 64).is_err());
    }

    #[test]
    fn bump_laplacian_matches_finite_differences() {
        let f = TestFunction::TiltedBump { center: c(0.3, 0.2), radius: 0.4, tilt: [1.5, -0.7] };
        for z in [c(0.35, 0.1), c(0.1, 0.3), c(0.5, 0.45)] {
            let exact = f.laplacian(z);
            let fd = finite_difference_laplacian(|w| f.value(w), z, 1e-3);
            assert!((exact - fd).abs() < 1e-5 * exact.abs().max(1.0), "{exact} {fd}");
        }
    }

    #[test]
    fn log_z_laplacian_is_point_mass() {
        // (1/2π) ∫ Δφ log|z − z0| dA = φ(z0)
        let z0 = c(0.2, -0.1);
        let phi = TestFunction::Bump { center: c(0.25, -0.05), radius: 0.3 };
        let v = disk_polar_integral(
            c(0.25, -0.05),
            0.3,
            &[z0],
            |z| phi.laplacian(z) * (z - z0).norm().ln(),
            QuadOptions::with_tolerances(1e-13, 1e-10),
        )
        .unwrap()
            / (2.0 * PI);
        assert!((v - phi.value(z0)).abs() < 1e-6, "{v} {}", phi.value(z0));
    }

    #[test]
    fn pairing_is_linear() {
        let zs = ZeroSet {
            roots: vec![Root { z: c(0.1, 0.0), multiplicity: 1, residual: 0.0 }, Root { z: c(0.3, 0.1), multiplicity: 2, residual: 0.0 }],
            puncture_orders: vec![],
            order_at_infinity: 0,
            degree: 3,
            residual: 0.0,
        };
        let f = TestFunction::Bump { center: c(0.2, 0.0), radius: 0.3 };
        let g = TestFunction::Scaled { factor: 2.5, base: Base::Bump { center: c(0.2, 0.0), radius: 0.3 } };
        assert!((pair_divisor(&zs, &g, 4) - 2.5 * pair_divisor(&zs, &f, 4)).abs() < 1e-14);
        assert_eq!(pair_divisor(&zs, &TestFunction::Constant { value: 2.0 }, 3), 2.0);
    }

    #[test]
    fn csv_export() {
        let zs = ZeroSet {
            roots: vec![Root { z: c(0.5, -0.25), multiplicity: 2, residual: 1e-16 }],
            puncture_orders: vec![],
            order_at_infinity: 0,
            degree: 2,
            residual: 1e-16,
        };
        let csv = zs.to_csv();
        assert!(csv.starts_with("re,im,multiplicity,residual\n"));
        assert!(csv.contains("5e-1,-2.5e-1,2,1e-16"));
    }

    #[test]
    fn poincare_lelong_on_random_sections() {
        use crate::ensembles::{sample_coefficients, Ensemble, SeedSpec};
        let seed = SeedSpec::new(7);
        let phi = TestFunction::TiltedBump { center: c(0.7, 0.5), radius: 0.8, tilt: [0.5, -0.2] };
        for model in [ModelSpace::sphere(1).unwrap(), ModelSpace::cusped_sphere(2, crate::models::DEFAULT_BLEND, 0.1, true).unwrap()] {
            let b = build_basis(&model, 12, None).unwrap();
            let eta = sample_coefficients(&Ensemble::gaussian(1.0).unwrap(), b.dim(), &seed, 12, 0);
            let sec = RandomSection::new(&b, eta).unwrap();
            let pl = poincare_lelong_residual(&sec, &phi, 1e-10).unwrap();
            assert!(pl.relative < 1e-6, "{pl:?}");
        }
    }

    #[test]
    fn log_norm_integral_rejects_cusp_contact() {
        let model = ModelSpace::cusped_sphere(1, crate::models::DEFAULT_BLEND, 0.1, true).unwrap();
        let b = build_basis(&model, 4, None).unwrap();
        let sec = RandomSection::new(&b, vec![c(1.0, 0.0); b.dim()]).unwrap();
        assert!(matches!(log_norm_integral(&sec, &Region::annulus(0.0, 0.5), 1e-8), Err(Error::Domain(_))));
        let v = log_norm_integral(&sec, &Region::annulus(0.1, 0.5), 1e-8).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }
}
