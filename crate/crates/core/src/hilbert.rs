//! Orthonormal bases of the `L²` holomorphic sections of `L^p`, section
//! evaluation, Bergman kernels and their diagnostics.
//!
//! A section is `s = f · 1^{⊗p}` with `f` holomorphic in the chart, so
//! `|s|²_{h^p} = |f|² w^p` and `‖s‖² = ∫ |f|² w^p dV`. Basis elements are
//! `f_j = Σ_k T_{jk} z^{e_k}`. Because every model is rotation invariant the
//! monomials are mutually orthogonal, so `T` is diagonal after the computed
//! Gram matrix is checked; a Cholesky factor is used otherwise.
//!
//! Values are returned in scaled form `(v, log_scale)` with
//! `f_j(z) w(z)^{p/2} = v_j e^{log_scale}`, which keeps large `p` finite.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::models::{self, ModelDescriptor, ModelKind, ModelSpace, Point};
use crate::quad::{self, QuadOptions};

/// Relative tail of `B_p(x,x)` that a truncated basis may omit.
pub const TRUNCATION_TOLERANCE: f64 = 1e-10;
/// Largest accepted condition number of the (diagonally scaled) Gram matrix.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Off-diagonal size below which a computed scaled Gram matrix counts as diagonal.
const DIAGONAL_SNAP: f64 = 1e-12;
const MAX_TERMS: u32 = 50_000;

/// Truncation request for the infinite-dimensional disk model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Truncation {
    /// Keep the monomials `z¹ … z^count`.
    Terms { count: u32 },
    /// Keep enough terms for the tail to be negligible on `0 < |z| ≤ r_max`.
    Radius { r_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationInfo {
    pub terms: u32,
    /// Kernel values are certified on `0 < |z| ≤ certified_radius`.
    pub certified_radius: f64,
    /// Relative tail bound at the certified radius.
    pub tail_bound: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Transform {
    /// `f_j = z^{e_j} / ‖z^{e_j}‖`, stored as `ln ‖z^{e_j}‖`.
    Diagonal(Vec<f64>),
    /// Row-major lower-triangular `T`.
    Dense(Vec<Complex64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionBasis {
    model: ModelSpace,
    p: u32,
    exponents: Vec<u32>,
    transform: Transform,
    gram_offdiag: f64,
    condition: f64,
    truncation: Option<TruncationInfo>,
}

/// Scaled vector: actual values are `values · e^{log_scale}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub values: Vec<Complex64>,
    pub log_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionValue {
    /// Frame value `f(z)`.
    pub frame: Complex64,
    /// `|s(z)|_{h^p}`.
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    /// Frame-trivialized kernel `Σ_j f_j(x) conj(f_j(y))`.
    pub raw: Complex64,
    /// `|B_p(x,y)|` in the `h^p ⊗ h^{p,*}` norm.
    pub weighted_norm: f64,
}

fn ln_factorial(n: u32) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

/// `ln ‖z^k‖²` on the punctured disk: `2π (p-2)! / k^{p-1}`.
pub fn disk_log_norm_sq(p: u32, k: u32) -> f64 {
    (2.0 * PI).ln() + ln_factorial(p - 2) - (p as f64 - 1.0) * (k as f64).ln()
}

/// `ln ‖z^k‖²` on the Fubini–Study sphere of degree `n`: `2π k!(np-k)!/(np+1)!`.
pub fn sphere_log_norm_sq(n: u32, p: u32, k: u32) -> f64 {
    let m = n * p;
    (2.0 * PI).ln() + ln_factorial(k) + ln_factorial(m - k) - ln_factorial(m + 1)
}

/// `ln` of `r^{2s} w^p` times the log-radial volume at `u = ln r`, i.e. the
/// radial density of `‖z^s‖²` per unit `du dθ`.
fn log_radial_density(model: &ModelSpace, p: u32, s: f64, u: f64) -> f64 {
    2.0 * s * u + p as f64 * model.log_radial_log_weight(u) + model.log_radial_volume(u).ln()
}

/// Interval of `u = ln r` outside which the radial density of `‖z^s‖²` is
/// below `e^{-drop}` of its peak.
fn radial_window(model: &ModelSpace, p: u32, s: f64, drop: f64) -> Result<(f64, f64, f64)> {
    let hi_limit = if model.kind() == ModelKind::PuncturedDisk { -1e-12 } else { 400.0 };
    let lo_limit = -700.0;
    let g = |u: f64| log_radial_density(model, p, s, u);
    // coarse scan for the peak
    let n = 2800;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=n {
        let u = lo_limit + (hi_limit - lo_limit) * i as f64 / n as f64;
        let v = g(u);
        if v > best.0 {
            best = (v, u);
        }
    }
    // refine the peak on a fine local scan
    let h = (hi_limit - lo_limit) / n as f64;
    let (mut gmax, mut umax) = best;
    let m = 400;
    for i in 0..=m {
        let u = (best.1 - h + 2.0 * h * i as f64 / m as f64).min(hi_limit);
        let v = g(u);
        if v > gmax {
            gmax = v;
            umax = u;
        }
    }
    if !gmax.is_finite() {
        return Err(Error::Quadrature { what: format!("radial density of |z^{s}|² has no finite peak"), achieved: f64::NAN });
    }
    let mut step = 0.05f64.max(1e-3 * umax.abs());
    let mut lo = umax;
    while g(lo) > gmax - drop {
        lo -= step;
        step *= 1.2;
        if lo < lo_limit {
            return Err(Error::Quadrature { what: format!("|z^{s}|² is not integrable at the origin for p = {p}"), achieved: f64::INFINITY });
        }
    }
    let mut step = 0.05f64.max(1e-3 * umax.abs());
    let mut hi = umax;
    while hi < hi_limit && g(hi) > gmax - drop {
        hi = (hi + step).min(hi_limit);
        step *= 1.2;
        if hi >= hi_limit && model.kind() != ModelKind::PuncturedDisk {
            return Err(Error::Quadrature { what: format!("|z^{s}|² is not integrable at infinity for p = {p}"), achieved: f64::INFINITY });
        }
    }
    Ok((lo, hi, gmax))
}

/// `ln ∫ r^{2s} w^p dV` over the chart by adaptive quadrature in `u = ln r`.
pub fn log_norm_sq_quadrature(model: &ModelSpace, p: u32, s: f64) -> Result<f64> {
    let (lo, hi, gmax) = radial_window(model, p, s, 80.0)?;
    let mut breaks = vec![lo];
    for b in model.log_radial_breaks() {
        if b > lo && b < hi {
            breaks.push(b);
        }
    }
    breaks.push(hi);
    let v = quad::integrate_with_breaks(
        |u: f64| (log_radial_density(model, p, s, u) - gmax).exp(),
        &breaks,
        QuadOptions::with_tolerances(1e-300, 1e-13),
    )?;
    Ok((2.0 * PI * v.value).ln() + gmax)
}

impl SectionBasis {
    pub fn model(&self) -> &ModelSpace {
        &self.model
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    /// Cardinality `d_p` of the basis.
    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_truncated(&self) -> bool {
        self.truncation.is_some()
    }

    pub fn truncation(&self) -> Option<&TruncationInfo> {
        self.truncation.as_ref()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.transform, Transform::Diagonal(_))
    }

    /// Largest off-diagonal entry of the scaled Gram matrix found at build time.
    pub fn gram_offdiag(&self) -> f64 {
        self.gram_offdiag
    }

    /// Condition number of the diagonally scaled Gram matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn max_exponent(&self) -> u32 {
        self.exponents.iter().copied().max().unwrap_or(0)
    }

    /// Dense transform matrix `T` (row-major, `d_p × d_p`).
    pub fn transform_matrix(&self) -> Vec<Complex64> {
        match &self.transform {
            Transform::Dense(t) => t.clone(),
            Transform::Diagonal(ln) => {
                let d = self.dim();
                let mut t = vec![Complex64::new(0.0, 0.0); d * d];
                for (j, l) in ln.iter().enumerate() {
                    t[j * d + j] = Complex64::new((-l).exp(), 0.0);
                }
                t
            }
        }
    }

    /// `ln ‖z^{e_j}‖` for diagonal bases.
    pub fn log_norms(&self) -> Option<&[f64]> {
        match &self.transform {
            Transform::Diagonal(v) => Some(v),
            Transform::Dense(_) => None,
        }
    }

    /// `f_j(z) w(z)^{p/2}` for every basis element, in scaled form.
    pub fn values(&self, z: Point) -> Result<Scaled> {
        let ln_w = self.model.log_weight(z)?;
        let half = 0.5 * self.p as f64 * ln_w;
        let r = z.norm();
        let theta = z.arg();
        match &self.transform {
            Transform::Diagonal(ln_norm) => {
                let ln_r = r.ln();
                let mut scale = f64::NEG_INFINITY;
                let mags: Vec<f64> = self
                    .exponents
                    .iter()
                    .zip(ln_norm)
                    .map(|(&k, l)| {
                        let m = if k == 0 { -l + half } else { k as f64 * ln_r - l + half };
                        scale = scale.max(m);
                        m
                    })
                    .collect();
                let values = self
                    .exponents
                    .iter()
                    .zip(mags)
                    .map(|(&k, m)| Complex64::from_polar((m - scale).exp(), k as f64 * theta))
                    .collect();
                Ok(Scaled { values, log_scale: scale })
            }
            Transform::Dense(t) => {
                let d = self.dim();
                let mono: Vec<Complex64> = self.exponents.iter().map(|&k| z.powu(k)).collect();
                let values = (0..d)
                    .map(|j| (0..=j).map(|k| t[j * d + k] * mono[k]).sum::<Complex64>())
                    .collect();
                Ok(Scaled { values, log_scale: half })
            }
        }
    }

    fn check_certified(&self, z: Point) -> Result<()> {
        if let Some(info) = &self.truncation {
            if z.norm() > info.certified_radius {
                return Err(Error::Truncation { tail: self.tail_bound_at(z), tolerance: info.tolerance });
            }
        }
        Ok(())
    }

    /// Upper bound on the omitted relative contribution to `B_p(z,z)`; zero
    /// for untruncated bases and `∞` where no bound is available.
    pub fn tail_bound_at(&self, z: Point) -> f64 {
        match &self.truncation {
            None => 0.0,
            Some(info) => disk_relative_tail(self.p, info.terms, -(z.norm_sqr()).ln()),
        }
    }

    /// `B_p(x,x) = Σ_j |f_j(x)|² w(x)^p`.
    pub fn bergman_density(&self, x: Point) -> Result<f64> {
        Ok(self.log_bergman_density(x)?.exp())
    }

    pub fn log_bergman_density(&self, x: Point) -> Result<f64> {
        self.check_certified(x)?;
        let v = self.values(x)?;
        let s: f64 = v.values.iter().map(|c| c.norm_sqr()).sum();
        Ok(s.ln() + 2.0 * v.log_scale)
    }

    pub fn bergman_kernel(&self, x: Point, y: Point) -> Result<KernelValue> {
        self.check_certified(x)?;
        self.check_certified(y)?;
        let vx = self.values(x)?;
        let vy = self.values(y)?;
        let sum: Complex64 = vx.values.iter().zip(&vy.values).map(|(a, b)| a * b.conj()).sum();
        let half = 0.5 * self.p as f64;
        let unweight = vx.log_scale + vy.log_scale
            - half * (self.model.log_weight(x)? + self.model.log_weight(y)?);
        Ok(KernelValue { raw: sum * unweight.exp(), weighted_norm: sum.norm() * (vx.log_scale + vy.log_scale).exp() })
    }

    /// `P_p(x,y) = |B_p(x,y)| / sqrt(B_p(x,x) B_p(y,y))`.
    pub fn normalized_kernel(&self, x: Point, y: Point) -> Result<f64> {
        self.check_certified(x)?;
        self.check_certified(y)?;
        if x == y {
            self.values(x)?;
            return Ok(1.0);
        }
        let vx = self.values(x)?;
        let vy = self.values(y)?;
        let sum: Complex64 = vx.values.iter().zip(&vy.values).map(|(a, b)| a * b.conj()).sum();
        let nx: f64 = vx.values.iter().map(|c| c.norm_sqr()).sum();
        let ny: f64 = vy.values.iter().map(|c| c.norm_sqr()).sum();
        Ok(sum.norm() / (nx.sqrt() * ny.sqrt()))
    }

    /// Dense coefficients `a_0..a_K` of the frame polynomial `Σ_j c_j f_j`.
    pub fn frame_polynomial(&self, coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_dim(coeffs)?;
        let d = self.dim();
        let mut poly = vec![Complex64::new(0.0, 0.0); self.max_exponent() as usize + 1];
        match &self.transform {
            Transform::Diagonal(ln) => {
                for ((&k, c), l) in self.exponents.iter().zip(coeffs).zip(ln) {
                    poly[k as usize] += c * (-l).exp();
                }
            }
            Transform::Dense(t) => {
                for j in 0..d {
                    for k in 0..=j {
                        poly[self.exponents[k] as usize] += coeffs[j] * t[j * d + k];
                    }
                }
            }
        }
        Ok(poly)
    }

    fn check_dim(&self, coeffs: &[Complex64]) -> Result<()> {
        if coeffs.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: coeffs.len() });
        }
        Ok(())
    }

    /// Radial window in `u = ln r` carrying all but `e^{-drop}` of every
    /// basis element's mass.
    pub fn radial_support(&self, drop: f64) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &k in &self.exponents {
            let (a, b, _) = radial_window(&self.model, self.p, k as f64, drop)?;
            lo = lo.min(a);
            hi = hi.max(b);
        }
        Ok((lo, hi))
    }

    /// Gram matrix of the basis by tensor quadrature (adaptive in `ln r`,
    /// trapezoid in the angle), row-major.
    pub fn gram_matrix(&self) -> Result<Vec<Complex64>> {
        let d = self.dim();
        let (lo, hi) = self.radial_support(60.0)?;
        let nang = 2 * self.max_exponent() as usize + 8;
        let mut breaks = vec![lo];
        breaks.extend(self.model.log_radial_breaks().into_iter().filter(|b| *b > lo && *b < hi));
        breaks.push(hi);
        let opts = QuadOptions::with_tolerances(1e-14, 1e-11);
        let mut g = vec![Complex64::new(0.0, 0.0); d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = quad::integrate_with_breaks(
                    |u: f64| {
                        let vol = self.model.log_radial_volume(u);
                        let r = u.exp();
                        quad::periodic_trapezoid(
                            |t: f64| {
                                let z = Complex64::from_polar(r, t);
                                match self.values(z) {
                                    Ok(s) => s.values[i] * s.values[j].conj() * (2.0 * s.log_scale).exp(),
                                    Err(_) => Complex64::new(0.0, 0.0),
                                }
                            },
                            nang,
                        ) * vol
                    },
                    &breaks,
                    opts,
                )?;
                g[i * d + j] = v.value;
                g[j * d + i] = v.value.conj();
            }
        }
        Ok(g)
    }

    /// Max-norm deviation of the quadrature Gram matrix from the identity.
    pub fn gram_deviation(&self) -> Result<f64> {
        let d = self.dim();
        let g = self.gram_matrix()?;
        let mut dev = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((g[i * d + j] - target).norm());
            }
        }
        Ok(dev)
    }
}

/// Relative tail bound `Σ_{k>K} term_k / Σ_{k≤K} term_k` of the disk kernel
/// at `t = -ln|z|²`, where `term_k ∝ k^{p-1} e^{-kt}`.
pub fn disk_relative_tail(p: u32, terms: u32, t: f64) -> f64 {
    if !(t > 0.0) {
        return f64::INFINITY;
    }
    let a = p as f64 - 1.0;
    let kk = terms as f64;
    let ln_term = |k: f64| a * k.ln() - k * t;
    // ratio of consecutive terms beyond K+1 is at most q
    let q = ((kk + 2.0) / (kk + 1.0)).powf(a) * (-t).exp();
    if q >= 1.0 {
        return f64::INFINITY;
    }
    let ln_tail = ln_term(kk + 1.0) - (1.0 - q).ln();
    let mut m = f64::NEG_INFINITY;
    for k in 1..=terms {
        m = m.max(ln_term(k as f64));
    }
    let s: f64 = (1..=terms).map(|k| (ln_term(k as f64) - m).exp()).sum();
    (ln_tail - m - s.ln()).exp()
}

fn certified_t(p: u32, terms: u32, tol: f64) -> f64 {
    // relative tail decreases in t; bisect for the smallest certified t
    let mut hi = 1.0;
    while disk_relative_tail(p, terms, hi) > tol {
        hi *= 2.0;
        if hi > 1e6 {
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    while disk_relative_tail(p, terms, lo) <= tol && lo > 1e-12 {
        lo /= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if disk_relative_tail(p, terms, mid) <= tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Build an orthonormal basis of the degree-`p` section space.
pub fn build_basis(model: &ModelSpace, p: u32, truncation: Option<Truncation>) -> Result<SectionBasis> {
    if p < 2 {
        return Err(Error::Precondition(format!("p must be at least 2 (got {p}); the cusp norms diverge below")));
    }
    match model.descriptor() {
        ModelDescriptor::PuncturedDisk => build_disk(model, p, truncation),
        ModelDescriptor::FubiniStudySphere { degree } => {
            let n = *degree;
            let exponents: Vec<u32> = (0..=n * p).collect();
            let ln: Vec<f64> = exponents.iter().map(|&k| 0.5 * sphere_log_norm_sq(n, p, k)).collect();
            Ok(SectionBasis {
                model: model.clone(),
                p,
                exponents,
                transform: Transform::Diagonal(ln),
                gram_offdiag: 0.0,
                condition: 1.0,
                truncation: None,
            })
        }
        ModelDescriptor::CuspedSphere { degree, cusp_at_origin, .. } => {
            let top = degree * p;
            let exponents: Vec<u32> = if *cusp_at_origin { (1..=top).collect() } else { (0..=top).collect() };
            build_from_gram(model, p, exponents)
        }
    }
}

fn build_disk(model: &ModelSpace, p: u32, truncation: Option<Truncation>) -> Result<SectionBasis> {
    let tol = TRUNCATION_TOLERANCE;
    let terms = match truncation {
        None => return Err(Error::Precondition("the disk model needs a truncation".into())),
        Some(Truncation::Terms { count }) => {
            if count == 0 {
                return Err(Error::Precondition("truncation needs at least one term".into()));
            }
            count
        }
        Some(Truncation::Radius { r_max }) => {
            if !(r_max > 0.0 && r_max < 1.0) {
                return Err(Error::Precondition(format!("truncation radius must lie in (0, 1), got {r_max}")));
            }
            let t = -(r_max * r_max).ln();
            let mut k = (((p as f64 - 1.0) / t).ceil() as u32).max(1);
            while disk_relative_tail(p, k, t) > tol {
                k += 1 + k / 64;
                if k > MAX_TERMS {
                    return Err(Error::Truncation { tail: disk_relative_tail(p, MAX_TERMS, t), tolerance: tol });
                }
            }
            k
        }
    };
    let t_cert = certified_t(p, terms, tol);
    let certified_radius = if t_cert.is_finite() { (-0.5 * t_cert).exp() } else { 0.0 };
    let exponents: Vec<u32> = (1..=terms).collect();
    let ln: Vec<f64> = exponents.iter().map(|&k| 0.5 * disk_log_norm_sq(p, k)).collect();
    // cross-validate the closed form against quadrature on a few exponents
    let mut spots = vec![1, terms.div_ceil(2), terms];
    spots.dedup();
    for k in spots {
        let q = log_norm_sq_quadrature(model, p, k as f64)?;
        let c = disk_log_norm_sq(p, k);
        let rel = (q - c).exp_m1().abs();
        if rel > 1e-8 {
            return Err(Error::Quadrature { what: format!("disk norm of z^{k} at p = {p} disagrees with quadrature"), achieved: rel });
        }
    }
    Ok(SectionBasis {
        model: model.clone(),
        p,
        exponents,
        transform: Transform::Diagonal(ln),
        gram_offdiag: 0.0,
        condition: 1.0,
        truncation: Some(TruncationInfo {
            terms,
            certified_radius,
            tail_bound: if t_cert.is_finite() { disk_relative_tail(p, terms, t_cert) } else { f64::INFINITY },
            tolerance: tol,
        }),
    })
}

/// Gram matrix of the monomials, then orthonormalization. The angular
/// integral is a trapezoid sum, so off-diagonal entries come out at rounding
/// level and are checked rather than assumed to vanish.
fn build_from_gram(model: &ModelSpace, p: u32, exponents: Vec<u32>) -> Result<SectionBasis> {
    let d = exponents.len();
    let kmax = exponents.iter().copied().max().unwrap_or(0);
    let nang = 2 * kmax as usize + 8;
    let h = 2.0 * PI / nang as f64;
    let angular = |m: i64| -> Complex64 {
        (0..nang).map(|l| Complex64::from_polar(1.0, m as f64 * h * l as f64)).sum::<Complex64>() * h
    };
    // radial factors ln ∫ r^{e_i + e_j} w^p dV/dθ, indexed by e_i + e_j
    let mut radial = std::collections::BTreeMap::new();
    for i in 0..d {
        for j in 0..=i {
            let s = exponents[i] + exponents[j];
            if let std::collections::btree_map::Entry::Vacant(e) = radial.entry(s) {
                let v = log_norm_sq_quadrature(model, p, 0.5 * s as f64)? - (2.0 * PI).ln();
                e.insert(v);
            }
        }
    }
    let diag: Vec<f64> = (0..d).map(|i| radial[&(2 * exponents[i])] + (2.0 * PI).ln()).collect();
    let mut scaled = DMatrix::<Complex64>::identity(d, d);
    let mut offdiag = 0.0f64;
    for i in 0..d {
        for j in 0..i {
            let m = exponents[i] as i64 - exponents[j] as i64;
            let lr = radial[&(exponents[i] + exponents[j])];
            let v = angular(m) * (lr - 0.5 * (diag[i] + diag[j])).exp();
            scaled[(i, j)] = v;
            scaled[(j, i)] = v.conj();
            offdiag = offdiag.max(v.norm());
        }
    }
    let condition = scaled_condition(&scaled);
    let degree = model.bundle_degree().unwrap_or(0);
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::Conditioning { p, degree, condition });
    }
    let transform = if offdiag < DIAGONAL_SNAP {
        Transform::Diagonal(diag.iter().map(|l| 0.5 * l).collect())
    } else {
        let chol = nalgebra::linalg::Cholesky::new(scaled.clone()).ok_or(Error::Conditioning { p, degree, condition })?;
        let l = chol.l();
        let linv = l
            .solve_lower_triangular(&DMatrix::<Complex64>::identity(d, d))
            .ok_or(Error::Conditioning { p, degree, condition })?;
        let mut t = vec![Complex64::new(0.0, 0.0); d * d];
        for j in 0..d {
            for k in 0..=j {
                t[j * d + k] = linv[(j, k)] * (-0.5 * diag[k]).exp();
            }
        }
        Transform::Dense(t)
    };
    Ok(SectionBasis { model: model.clone(), p, exponents, transform, gram_offdiag: offdiag, condition, truncation: None })
}

fn scaled_condition(s: &DMatrix<Complex64>) -> f64 {
    let d = s.nrows();
    // Gershgorin bound, exact enough when the matrix is nearly the identity
    let radius = (0..d)
        .map(|i| (0..d).filter(|&j| j != i).map(|j| s[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max);
    if radius < 0.5 {
        return (1.0 + radius) / (1.0 - radius);
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Evaluate `s = Σ c_j S_j` at `z`.
pub fn evaluate_section(basis: &SectionBasis, coeffs: &[Complex64], z: Point) -> Result<SectionValue> {
    basis.check_dim(coeffs)?;
    let v = basis.values(z)?;
    let sum: Complex64 = coeffs.iter().zip(&v.values).map(|(c, f)| c * f).sum();
    let ln_w = basis.model.log_weight(z)?;
    let frame = sum * (v.log_scale - 0.5 * basis.p as f64 * ln_w).exp();
    Ok(SectionValue { frame, norm: sum.norm() * v.log_scale.exp() })
}

/// `ln |s(z)|_{h^p}`, finite for large `p` where the norm itself underflows.
pub fn section_log_norm(basis: &SectionBasis, coeffs: &[Complex64], z: Point) -> Result<f64> {
    basis.check_dim(coeffs)?;
    let v = basis.values(z)?;
    let sum: Complex64 = coeffs.iter().zip(&v.values).map(|(c, f)| c * f).sum();
    Ok(sum.norm().ln() + v.log_scale)
}

/// A coefficient vector bound to a basis.
#[derive(Debug, Clone)]
pub struct RandomSection<'a> {
    basis: &'a SectionBasis,
    coeffs: Vec<Complex64>,
}

impl<'a> RandomSection<'a> {
    pub fn new(basis: &'a SectionBasis, coeffs: Vec<Complex64>) -> Result<Self> {
        basis.check_dim(&coeffs)?;
        Ok(RandomSection { basis, coeffs })
    }

    pub fn basis(&self) -> &'a SectionBasis {
        self.basis
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn evaluate(&self, z: Point) -> Result<SectionValue> {
        evaluate_section(self.basis, &self.coeffs, z)
    }

    pub fn log_norm(&self, z: Point) -> Result<f64> {
        section_log_norm(self.basis, &self.coeffs, z)
    }

    pub fn frame_polynomial(&self) -> Result<Vec<Complex64>> {
        self.basis.frame_polynomial(&self.coeffs)
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub p: u32,
    pub d_p: usize,
    /// `deg_h(L) = ∫ c₁(L,h)`, by quadrature.
    pub degree: f64,
    pub euler_characteristic: i64,
    pub punctures: usize,
    /// `p · deg_h(L) + χ(Σ)`.
    pub formula: f64,
    pub matches: bool,
    /// `p · deg + 1 − g − N`, the count of sections vanishing at every puncture.
    pub riemann_roch: f64,
    pub riemann_roch_matches: bool,
    pub note: String,
}

/// Compare `d_p` with `p · deg_h(L) + χ(Σ)`.
pub fn dimension_check(basis: &SectionBasis) -> Result<DimensionReport> {
    if basis.is_truncated() || basis.model.kind() == ModelKind::PuncturedDisk {
        return Err(Error::Unsupported("dimension check needs an untruncated basis".into()));
    }
    let degree = basis.model.total_curvature_mass()? / (2.0 * PI);
    let chi = basis.model.euler_characteristic().unwrap_or(2);
    let n_punct = basis.model.punctures().len();
    let formula = basis.p as f64 * degree + chi as f64;
    let rr = basis.p as f64 * degree + 1.0 - n_punct as f64;
    let d = basis.dim();
    let matches = (d as f64 - formula).abs() < 0.5;
    let note = if n_punct == 0 {
        "compact sphere: classical dimension p·deg + 1; the punctured-surface formula does not apply".to_string()
    } else if matches {
        String::new()
    } else {
        format!("d_p differs from p·deg + χ by {:.3}; p·deg + 1 − g − N gives {:.3}", d as f64 - formula, rr)
    };
    Ok(DimensionReport {
        p: basis.p,
        d_p: d,
        degree,
        euler_characteristic: chi,
        punctures: n_punct,
        formula,
        matches,
        riemann_roch: rr,
        riemann_roch_matches: (d as f64 - rr).abs() < 0.5,
        note,
    })
}

/// `b` slightly above `sqrt(16 k / ε₀)` and the resulting radius `b sqrt(ln p / p)`.
pub fn gaussian_regime(p: u32, epsilon0: f64, k: u32) -> (f64, f64) {
    let b = (16.0 * k as f64 / epsilon0).sqrt() * (1.0 + 1e-9);
    let pf = p as f64;
    (b, b * (pf.ln() / pf).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearDiagonalRow {
    pub dist: f64,
    pub point: Point,
    pub normalized: f64,
    pub gaussian: f64,
    pub ratio: f64,
    pub rejected: bool,
}

/// Point `x + s·dir` whose chart-segment metric length from `x` is `dist`.
pub fn point_at_distance(model: &ModelSpace, x: Point, dir: Point, dist: f64) -> Result<Point> {
    let dir = dir / dir.norm();
    if dist == 0.0 {
        return Ok(x);
    }
    let unreachable = || Error::Domain(format!("distance {dist} is not reachable from {x} along {dir}"));
    let inside = |s: f64| model.contains(x + dir * s);
    let len = |s: f64| models::local_distance(model, x, x + dir * s);
    let mut hi = dist / model.volume_density(x)?.sqrt();
    let mut lo = 0.0;
    // smallest step known to leave the domain
    let mut out = f64::INFINITY;
    loop {
        if !inside(hi) {
            out = hi;
            hi = 0.5 * (lo + hi);
            if out - lo <= 1e-15 * out {
                return Err(unreachable());
            }
            continue;
        }
        if len(hi)? >= dist {
            break;
        }
        if hi > 1e15 {
            return Err(unreachable());
        }
        lo = hi;
        hi = if out.is_finite() { 0.5 * (lo + out) } else { 2.0 * hi };
    }
    // bracketed secant (Illinois) on the monotone segment length
    let (mut flo, mut fhi) = (-dist, len(hi)? - dist);
    let mut side = 0;
    for _ in 0..200 {
        let s = (lo * fhi - hi * flo) / (fhi - flo);
        let f = len(s)? - dist;
        if f.abs() <= 1e-14 * dist || (hi - lo) <= 1e-15 * hi {
            return Ok(x + dir * s);
        }
        if f > 0.0 {
            hi = s;
            fhi = f;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        } else {
            lo = s;
            flo = f;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        }
    }
    Err(Error::NonConvergence { worst_residual: dist })
}

/// Table of `P_p` against `exp(−a(x) p dist²/4)` along a chart direction.
/// Rows beyond the near-diagonal radius `b sqrt(ln p / p)` are flagged.
pub fn near_diagonal_report(basis: &SectionBasis, x: Point, direction: Point, distances: &[f64], b: f64) -> Result<Vec<NearDiagonalRow>> {
    let a = basis.model.curvature_ratio(x)?;
    let pf = basis.p as f64;
    let limit = b * (pf.ln() / pf).sqrt();
    distances
        .iter()
        .map(|&d| {
            let y = point_at_distance(&basis.model, x, direction, d)?;
            let pn = basis.normalized_kernel(x, y)?;
            let g = (-a * pf * d * d / 4.0).exp();
            Ok(NearDiagonalRow { dist: d, point: y, normalized: pn, gaussian: g, ratio: pn / g, rejected: d > limit * (1.0 + 1e-12) })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReproducingReport {
    /// `∫ B_p(x,y) s(y) dV(y)`, in `h^p` units at `x`.
    pub projected: Complex64,
    /// `s(x)` in the same units.
    pub direct: Complex64,
    pub residual: f64,
}

/// `∫ K_p(x,y) f(y) w(y)^p dV(y) · w(x)^{p/2}` for a frame function `f`.
pub fn project_at<F>(basis: &SectionBasis, f: F, x: Point, rel_tol: f64) -> Result<Complex64>
where
    F: Fn(Point) -> Complex64,
{
    let vx = basis.values(x)?;
    let (lo, hi) = basis.radial_support(60.0)?;
    let mut breaks = vec![lo];
    breaks.extend(basis.model.log_radial_breaks().into_iter().filter(|b| *b > lo && *b < hi));
    breaks.push(hi);
    let nang = 4 * basis.max_exponent() as usize + 16;
    let half = 0.5 * basis.p as f64;
    let v = quad::integrate_with_breaks(
        |u: f64| {
            let r = u.exp();
            let vol = basis.model.log_radial_volume(u);
            quad::periodic_trapezoid(
                |t: f64| {
                    let y = Complex64::from_polar(r, t);
                    let Ok(vy) = basis.values(y) else { return Complex64::new(0.0, 0.0) };
                    let Ok(lw) = basis.model.log_weight(y) else { return Complex64::new(0.0, 0.0) };
                    let k: Complex64 = vx.values.iter().zip(&vy.values).map(|(a, b)| a * b.conj()).sum();
                    // K(x,y) w(x)^{p/2} w(y)^{p/2} · f(y) w(y)^{p/2}
                    k * f(y) * (vx.log_scale + vy.log_scale + half * lw).exp()
                },
                nang,
            ) * vol
        },
        &breaks,
        QuadOptions::with_tolerances(1e-14, rel_tol),
    )?;
    Ok(v.value)
}

/// Reproducing property residual `|∫ B_p(x,·) s − s(x)|` for `s = Σ c_j S_j`.
pub fn reproducing_check(basis: &SectionBasis, coeffs: &[Complex64], x: Point, rel_tol: f64) -> Result<ReproducingReport> {
    basis.check_dim(coeffs)?;
    let half = 0.5 * basis.p as f64;
    let frame = |y: Point| -> Complex64 {
        match evaluate_section(basis, coeffs, y) {
            Ok(v) => v.frame,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    };
    let projected = project_at(basis, frame, x, rel_tol)?;
    let direct = evaluate_section(basis, coeffs, x)?.frame * (half * basis.model.log_weight(x)?).exp();
    Ok(ReproducingReport { projected, direct, residual: (projected - direct).norm() })
}

/// JSON document for basis export and import.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDocument {
    pub model: ModelDescriptor,
    pub p: u32,
    pub exponents: Vec<u32>,
    pub d_p: usize,
    /// Row-major `d_p × d_p` matrix, entries as `[re, im]`.
    pub transform: Vec<[f64; 2]>,
    /// `ln ‖z^{e_j}‖` when the transform is diagonal.
    pub log_norms: Option<Vec<f64>>,
    pub truncated: bool,
    pub truncation: Option<TruncationInfo>,
    pub gram_offdiag: f64,
    pub condition: f64,
}

impl SectionBasis {
    pub fn to_document(&self) -> BasisDocument {
        BasisDocument {
            model: self.model.descriptor().clone(),
            p: self.p,
            exponents: self.exponents.clone(),
            d_p: self.dim(),
            transform: self.transform_matrix().iter().map(|c| [c.re, c.im]).collect(),
            log_norms: self.log_norms().map(|v| v.to_vec()),
            truncated: self.is_truncated(),
            truncation: self.truncation.clone(),
            gram_offdiag: self.gram_offdiag,
            condition: self.condition,
        }
    }

    pub fn from_document(doc: &BasisDocument) -> Result<Self> {
        let model = ModelSpace::from_descriptor(&doc.model)?;
        let d = doc.exponents.len();
        if doc.d_p != d {
            return Err(Error::DimensionMismatch { expected: d, got: doc.d_p });
        }
        if doc.transform.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: doc.transform.len() });
        }
        let transform = match &doc.log_norms {
            Some(ln) if ln.len() == d => Transform::Diagonal(ln.clone()),
            Some(ln) => return Err(Error::DimensionMismatch { expected: d, got: ln.len() }),
            None => Transform::Dense(doc.transform.iter().map(|[a, b]| Complex64::new(*a, *b)).collect()),
        };
        Ok(SectionBasis {
            model,
            p: doc.p,
            exponents: doc.exponents.clone(),
            transform,
            gram_offdiag: doc.gram_offdiag,
            condition: doc.condition,
            truncation: doc.truncation.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: BasisDocument = serde_json::from_str(s)?;
        Self::from_document(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DEFAULT_BACKGROUND_SCALE, DEFAULT_BLEND};

    fn c(re: f64, im: f64) -> Point {
        Complex64::new(re, im)
    }

    fn cusped() -> ModelSpace {
        ModelSpace::cusped_sphere(1, DEFAULT_BLEND, DEFAULT_BACKGROUND_SCALE, true).unwrap()
    }

    #[test]
    fn closed_form_disk_norms() {
        assert!((disk_log_norm_sq(2, 1).exp() - 2.0 * PI).abs() < 1e-12);
        assert!((disk_log_norm_sq(3, 2).exp() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_dimension_and_density() {
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 5, None).unwrap();
        assert_eq!(b.dim(), 6);
        for z in [c(0.0, 0.0), c(0.3, 2.0), c(-7.0, 1.0)] {
            let d = b.bergman_density(z).unwrap();
            assert!((d - 6.0 / (2.0 * PI)).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn p_below_two_rejected() {
        let s = ModelSpace::sphere(1).unwrap();
        assert!(matches!(build_basis(&s, 1, None), Err(Error::Precondition(_))));
        let disk = ModelSpace::punctured_disk();
        assert!(matches!(build_basis(&disk, 3, None), Err(Error::Precondition(_))));
    }

    #[test]
    fn disk_truncation_by_radius() {
        let disk = ModelSpace::punctured_disk();
        let b = build_basis(&disk, 8, Some(Truncation::Radius { r_max: 0.5 })).unwrap();
        let info = b.truncation().unwrap();
        assert!(info.certified_radius >= 0.5);
        assert!(b.tail_bound_at(c(0.5, 0.0)) <= TRUNCATION_TOLERANCE);
        assert!(b.bergman_density(c(0.4, 0.0)).is_ok());
        let near_edge = c(0.99, 0.0);
        assert!(matches!(b.bergman_density(near_edge), Err(Error::Truncation { .. })));
    }

    #[test]
    fn disk_truncation_tail_matches_direct_sum() {
        let (p, k, t) = (6u32, 20u32, 1.5f64);
        let bound = disk_relative_tail(p, k, t);
        let term = |k: u32| (k as f64).powi(p as i32 - 1) * (-(k as f64) * t).exp();
        let head: f64 = (1..=k).map(term).sum();
        let tail: f64 = (k + 1..2000).map(term).sum();
        assert!(tail / head <= bound && bound < 2.0 * tail / head, "{} {}", tail / head, bound);
    }

    #[test]
    fn cusped_basis_is_diagonal_and_orthonormal() {
        let m = cusped();
        let b = build_basis(&m, 4, None).unwrap();
        assert_eq!(b.exponents(), &[1, 2, 3, 4]);
        assert!(b.is_diagonal());
        assert!(b.gram_offdiag() < 1e-14);
        let dev = b.gram_deviation().unwrap();
        assert!(dev < 1e-8, "{dev}");
    }

    #[test]
    fn cusped_without_cusp_is_background_sphere() {
        let m = ModelSpace::cusped_sphere(2, DEFAULT_BLEND, 1.0, false).unwrap();
        let b = build_basis(&m, 3, None).unwrap();
        assert_eq!(b.dim(), 7);
        // the volume form is the curvature form here, so a ≡ 1 and B = (np+1)/(2πn)
        let d = b.bergman_density(c(0.4, -1.1)).unwrap();
        assert!((d - 7.0 / (4.0 * PI)).abs() < 1e-9, "{d}");
    }

    #[test]
    fn sphere_gram_quadrature() {
        let s = ModelSpace::sphere(2).unwrap();
        let b = build_basis(&s, 3, None).unwrap();
        assert!(b.gram_deviation().unwrap() < 1e-9);
    }

    #[test]
    fn dimension_reports() {
        let s = ModelSpace::sphere(1).unwrap();
        let r = dimension_check(&build_basis(&s, 7, None).unwrap()).unwrap();
        assert_eq!(r.d_p, 8);
        assert!(!r.matches);
        assert!((r.formula - 9.0).abs() < 1e-8);
        let m = cusped();
        let r4 = dimension_check(&build_basis(&m, 4, None).unwrap()).unwrap();
        let r5 = dimension_check(&build_basis(&m, 5, None).unwrap()).unwrap();
        assert!(((r5.d_p as f64 - r4.d_p as f64) - r4.degree).abs() < 0.5);
        assert!(r4.riemann_roch_matches);
        let disk = ModelSpace::punctured_disk();
        let b = build_basis(&disk, 3, Some(Truncation::Terms { count: 5 })).unwrap();
        assert!(matches!(dimension_check(&b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn kernel_symmetries() {
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 9, None).unwrap();
        let (x, y) = (c(0.3, 0.1), c(-0.5, 0.8));
        let kxy = b.bergman_kernel(x, y).unwrap();
        let kyx = b.bergman_kernel(y, x).unwrap();
        assert_eq!(kxy.raw, kyx.raw.conj());
        assert_eq!(b.normalized_kernel(x, x).unwrap(), 1.0);
        let pxy = b.normalized_kernel(x, y).unwrap();
        assert!((pxy - b.normalized_kernel(y, x).unwrap()).abs() < 1e-15);
        assert!(pxy <= 1.0 + 1e-10);
        // closed form on the sphere: P = cos(θ/2)^{np}
        let ax = [2.0 * x.re, 2.0 * x.im, x.norm_sqr() - 1.0].map(|v| v / (1.0 + x.norm_sqr()));
        let ay = [2.0 * y.re, 2.0 * y.im, y.norm_sqr() - 1.0].map(|v| v / (1.0 + y.norm_sqr()));
        let theta = (ax[0] * ay[0] + ax[1] * ay[1] + ax[2] * ay[2]).acos();
        assert!((pxy - (theta / 2.0).cos().powi(9)).abs() < 1e-12);
    }

    #[test]
    fn log_domain_values_at_large_p() {
        let disk = ModelSpace::punctured_disk();
        let b = build_basis(&disk, 64, Some(Truncation::Radius { r_max: 0.6 })).unwrap();
        let x = c((-32.0f64).exp(), 0.0);
        let d = b.bergman_density(x).unwrap();
        assert!(d.is_finite() && d > 0.0);
        let ratio = d / (64.0 / (2.0 * PI)).powf(1.5);
        assert!(ratio > 0.8 && ratio < 1.2, "{ratio}");
    }

    #[test]
    fn near_diagonal_zero_row() {
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 16, None).unwrap();
        let (bb, _) = gaussian_regime(16, 1.0, 1);
        let rows = near_diagonal_report(&b, c(0.2, 0.0), c(1.0, 0.0), &[0.0, 0.1, 1.8], bb).unwrap();
        assert_eq!(rows[0].ratio, 1.0);
        assert!(!rows[1].rejected);
        assert!(rows[2].rejected);
        assert!(point_at_distance(&s, c(0.2, 0.0), c(1.0, 0.0), 5.0).is_err());
    }

    #[test]
    fn distance_solver() {
        let s = ModelSpace::sphere(1).unwrap();
        let y = point_at_distance(&s, c(0.0, 0.0), c(1.0, 0.0), 0.5).unwrap();
        // radial sphere distance from 0 is sqrt(2) atan r
        assert!((2f64.sqrt() * y.re.atan() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reproducing_property() {
        let s = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&s, 4, None).unwrap();
        let coeffs: Vec<Complex64> = (0..b.dim()).map(|j| c(0.3 * j as f64 - 0.5, 0.2 + 0.1 * j as f64)).collect();
        let r = reproducing_check(&b, &coeffs, c(0.4, -0.3), 1e-10).unwrap();
        let norm = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(r.residual < 1e-6 * norm, "{r:?}");
    }

    #[test]
    fn projection_drops_missing_monomial() {
        let disk = ModelSpace::punctured_disk();
        let b = build_basis(&disk, 3, Some(Truncation::Terms { count: 6 })).unwrap();
        let x = c(0.05, 0.0);
        let v = project_at(&b, |y| y.powu(9), x, 1e-10).unwrap();
        assert!(v.norm() < 1e-10, "{v}");
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        for b in [
            build_basis(&cusped(), 3, None).unwrap(),
            build_basis(&ModelSpace::punctured_disk(), 4, Some(Truncation::Terms { count: 12 })).unwrap(),
        ] {
            let json = b.to_json().unwrap();
            let back = SectionBasis::from_json(&json).unwrap();
            assert_eq!(back, b);
            assert_eq!(back.to_json().unwrap(), json);
        }
    }
}
