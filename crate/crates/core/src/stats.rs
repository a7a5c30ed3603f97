//! Monte Carlo experiments on random sections: sup norms, the variance
//! identity, zero equidistribution, hole probabilities and test-function
//! large deviations, with the estimators and decay fits they report.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::ensembles::{sample_coefficients, Accumulator, Ensemble, SeedSpec};
use crate::error::{Error, Result};
use crate::hilbert::{build_basis, RandomSection, SectionBasis, Truncation};
use crate::models::{area_l, ModelKind, ModelSpace, Point, Region};
use crate::zeros::{count_zeros_in, find_zeros, pair_divisor, vanishing_order, TestFunction};

const Z95: f64 = 1.959_963_984_540_054;

/// A Monte Carlo mean (or proportion) with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_trials: u64,
    pub ci95: (f64, f64),
    /// Set for probabilities.
    pub n_events: Option<u64>,
    /// One-sided 95% upper bound `3/n`, set when no event was seen.
    pub rule_of_three: Option<f64>,
}

impl McEstimate {
    pub fn from_accumulator(acc: &Accumulator) -> Self {
        let mean = acc.mean();
        let se = acc.std_error();
        McEstimate {
            mean,
            std_error: se,
            n_trials: acc.count(),
            ci95: (mean - Z95 * se, mean + Z95 * se),
            n_events: None,
            rule_of_three: None,
        }
    }

    /// Binomial proportion with an exact Clopper–Pearson interval.
    pub fn proportion(events: u64, n: u64) -> Self {
        assert!(n > 0 && events <= n);
        let mean = events as f64 / n as f64;
        McEstimate {
            mean,
            std_error: (mean * (1.0 - mean) / n as f64).sqrt(),
            n_trials: n,
            ci95: clopper_pearson(events, n, 0.95),
            n_events: Some(events),
            rule_of_three: (events == 0).then(|| 3.0 / n as f64),
        }
    }

    pub fn ci_half_width(&self) -> f64 {
        0.5 * (self.ci95.1 - self.ci95.0)
    }
}

/// Exact two-sided binomial confidence interval.
pub fn clopper_pearson(k: u64, n: u64, level: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 { 0.0 } else { Beta::new(kf, nf - kf + 1.0).unwrap().inverse_cdf(alpha / 2.0) };
    let hi = if k == n { 1.0 } else { Beta::new(kf + 1.0, nf - kf).unwrap().inverse_cdf(1.0 - alpha / 2.0) };
    (lo, hi)
}

/// Whether a curve of probabilities is nonincreasing up to confidence
/// interval overlap: every later lower limit stays below every earlier upper
/// limit.
pub fn nonincreasing_within_ci(curve: &[McEstimate]) -> bool {
    curve.iter().enumerate().all(|(i, a)| curve[i + 1..].iter().all(|b| b.ci95.0 <= a.ci95.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Abscissa {
    P,
    PSquared,
    PLogP,
}

impl Abscissa {
    pub const ALL: [Abscissa; 3] = [Abscissa::P, Abscissa::PSquared, Abscissa::PLogP];

    pub fn at(self, p: f64) -> f64 {
        match self {
            Abscissa::P => p,
            Abscissa::PSquared => p * p,
            Abscissa::PLogP => p * p.ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub p: u32,
    pub probability: f64,
    pub n_events: u64,
    pub n_trials: u64,
}

impl DecayPoint {
    pub fn from_estimate(p: u32, e: &McEstimate) -> Self {
        DecayPoint { p, probability: e.mean, n_events: e.n_events.unwrap_or(0), n_trials: e.n_trials }
    }
}

/// Weighted least-squares fit of `log P` against an abscissa in `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub abscissa: Abscissa,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(p, log P)` of the points used.
    pub points: Vec<(u32, f64)>,
    /// Values of `p` left out for having fewer than 5 events.
    pub excluded: Vec<u32>,
}

pub const MIN_EVENTS: u64 = 5;

pub fn fit_decay(points: &[DecayPoint], abscissa: Abscissa) -> Result<DecayFit> {
    let (used, excluded): (Vec<&DecayPoint>, Vec<&DecayPoint>) = points.iter().partition(|q| q.n_events >= MIN_EVENTS);
    if used.len() < 3 {
        return Err(Error::Precondition(format!(
            "decay fit needs at least 3 points with {MIN_EVENTS} or more events, got {}",
            used.len()
        )));
    }
    // var(log P̂) ≈ (1 − P) / (n P)
    let rows: Vec<(f64, f64, f64)> = used
        .iter()
        .map(|q| {
            let pr = q.probability;
            let var = (1.0 - pr).max(1.0 / q.n_trials as f64) / (q.n_trials as f64 * pr);
            (abscissa.at(q.p as f64), pr.ln(), 1.0 / var)
        })
        .collect();
    let sw: f64 = rows.iter().map(|r| r.2).sum();
    let xm = rows.iter().map(|r| r.2 * r.0).sum::<f64>() / sw;
    let ym = rows.iter().map(|r| r.2 * r.1).sum::<f64>() / sw;
    let sxx: f64 = rows.iter().map(|r| r.2 * (r.0 - xm).powi(2)).sum();
    let sxy: f64 = rows.iter().map(|r| r.2 * (r.0 - xm) * (r.1 - ym)).sum();
    let syy: f64 = rows.iter().map(|r| r.2 * (r.1 - ym).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = rows.iter().map(|r| r.2 * (r.1 - intercept - slope * r.0).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(DecayFit {
        abscissa,
        slope,
        intercept,
        r_squared,
        points: used.iter().map(|q| (q.p, q.probability.ln())).collect(),
        excluded: excluded.iter().map(|q| q.p).collect(),
    })
}

/// Fits against all three abscissae side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitComparison {
    pub fits: Vec<DecayFit>,
    /// Why no fit could be made, when so.
    pub unavailable: Option<String>,
}

impl FitComparison {
    pub fn get(&self, a: Abscissa) -> Option<&DecayFit> {
        self.fits.iter().find(|f| f.abscissa == a)
    }
}

pub fn compare_fits(points: &[DecayPoint]) -> FitComparison {
    let mut fits = Vec::new();
    for a in Abscissa::ALL {
        match fit_decay(points, a) {
            Ok(f) => fits.push(f),
            Err(e) => return FitComparison { fits: Vec::new(), unavailable: Some(e.to_string()) },
        }
    }
    FitComparison { fits, unavailable: None }
}

/// Trials per work unit. Fixed, so that the reduction order, and hence every
/// floating-point result, is independent of the worker count.
pub const CHUNK: u64 = 256;

/// Worker pool running independent trials with an ordered reduction.
#[derive(Clone)]
pub struct Runner {
    workers: usize,
    pool: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for Runner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runner").field("workers", &self.workers).finish()
    }
}

impl Runner {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Validation("worker count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
        Ok(Runner { workers, pool: Arc::new(pool) })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Fold trials `0..n` into per-chunk states, then merge the states in
    /// chunk order.
    pub fn fold<A, I, F, M>(&self, n: u64, init: I, step: F, mut merge: M) -> Result<A>
    where
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, u64) -> Result<()> + Sync,
        M: FnMut(&mut A, A),
    {
        let chunks = n.div_ceil(CHUNK);
        let parts: Vec<A> = self.pool.install(|| {
            (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut a = init();
                    for t in c * CHUNK..((c + 1) * CHUNK).min(n) {
                        step(&mut a, t)?;
                    }
                    Ok(a)
                })
                .collect::<Result<Vec<A>>>()
        })?;
        let mut acc = init();
        for part in parts {
            merge(&mut acc, part);
        }
        Ok(acc)
    }
}

/// Grid resolution: metric spacing `spacing / √p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { spacing: 0.25 }
    }
}

/// Largest allowed grid spacing factor: a quarter of the kernel scale.
pub const MAX_GRID_SPACING: f64 = 0.25;
const MAX_GRID_POINTS: usize = 4_000_000;

impl GridSpec {
    pub fn metric_step(&self, p: u32) -> Result<f64> {
        if !(self.spacing > 0.0 && self.spacing <= MAX_GRID_SPACING) {
            return Err(Error::Precondition(format!(
                "grid spacing {} does not resolve the kernel scale (need 0 < spacing <= {MAX_GRID_SPACING})",
                self.spacing
            )));
        }
        Ok(self.spacing / (p as f64).sqrt())
    }
}

/// Place `n` nodes at equal increments of `∫ g` over `[a, b]`, returning
/// the node positions.
fn equal_length_nodes<G: Fn(f64) -> f64>(g: G, a: f64, b: f64, step: f64) -> Vec<f64> {
    const FINE: usize = 4000;
    let xs: Vec<f64> = (0..=FINE).map(|i| a + (b - a) * i as f64 / FINE as f64).collect();
    let gs: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let mut cum = vec![0.0; FINE + 1];
    for i in 0..FINE {
        // the larger endpoint keeps the spacing conservative
        cum[i + 1] = cum[i] + gs[i].max(gs[i + 1]) * (xs[i + 1] - xs[i]);
    }
    let total = cum[FINE];
    let n = ((total / step).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let s = (i as f64 + 0.5) * total / n as f64;
        while j + 1 < FINE && cum[j + 1] < s {
            j += 1;
        }
        let w = if cum[j + 1] > cum[j] { (s - cum[j]) / (cum[j + 1] - cum[j]) } else { 0.0 };
        out.push(xs[j] + w * (xs[j + 1] - xs[j]));
    }
    out
}

/// Points of the region whose metric spacing is at most `step`.
pub fn region_grid(model: &ModelSpace, region: &Region, step: f64) -> Result<Vec<Point>> {
    region.validate(model)?;
    let mut pts = Vec::new();
    let push_ring = |pts: &mut Vec<Point>, center: Point, rho: f64, circumference: f64, phase: f64| -> Result<()> {
        let n = ((circumference / step).ceil() as usize).max(3);
        if pts.len() + n > MAX_GRID_POINTS {
            return Err(Error::Precondition(format!("grid exceeds {MAX_GRID_POINTS} points")));
        }
        for j in 0..n {
            pts.push(center + Complex64::from_polar(rho, 2.0 * PI * (j as f64 + phase) / n as f64));
        }
        Ok(())
    };
    let disk = |pts: &mut Vec<Point>, center: Point, radius: f64| -> Result<()> {
        let g = |rho: f64| -> f64 {
            (0..32)
                .map(|j| {
                    let z = center + Complex64::from_polar(rho, 2.0 * PI * j as f64 / 32.0);
                    model.volume_density(z).map(f64::sqrt).unwrap_or(f64::INFINITY)
                })
                .fold(0.0, f64::max)
                * 1.05
        };
        pts.push(center);
        for (i, rho) in equal_length_nodes(g, 0.0, radius, step).into_iter().enumerate() {
            push_ring(pts, center, rho, 2.0 * PI * rho * g(rho), 0.5 * (i % 2) as f64)?;
        }
        Ok(())
    };
    match *region {
        Region::ChartAnnulus { r_inner, r_outer } => {
            if r_inner == 0.0 {
                if !model.punctures().is_empty() {
                    return Err(Error::Domain("cannot grid an annulus reaching the puncture".into()));
                }
                disk(&mut pts, Complex64::new(0.0, 0.0), r_outer)?;
            } else {
                // in u = ln r the metric is conformal with factor √(r² · volume density)
                let f = |u: f64| model.log_radial_volume(u).max(0.0).sqrt();
                for (i, u) in equal_length_nodes(f, r_inner.ln(), r_outer.ln(), step).into_iter().enumerate() {
                    push_ring(&mut pts, Complex64::new(0.0, 0.0), u.exp(), 2.0 * PI * f(u), 0.5 * (i % 2) as f64)?;
                }
            }
        }
        Region::ChartDisk { center, radius } => disk(&mut pts, center, radius)?,
        Region::SphericalCap { .. } => match region.as_chart_disk() {
            Some(Region::ChartDisk { center, radius }) => disk(&mut pts, center, radius)?,
            _ => return Err(Error::Unsupported("caps containing the point at infinity".into())),
        },
        Region::ChartRectangle { min, max } => {
            let mut gmax: f64 = 0.0;
            for i in 0..=64 {
                for j in 0..=64 {
                    let z = Complex64::new(
                        min.re + (max.re - min.re) * i as f64 / 64.0,
                        min.im + (max.im - min.im) * j as f64 / 64.0,
                    );
                    gmax = gmax.max(model.volume_density(z)?.sqrt());
                }
            }
            let h = step / (1.05 * gmax);
            let nx = ((max.re - min.re) / h).ceil() as usize;
            let ny = ((max.im - min.im) / h).ceil() as usize;
            if nx * ny > MAX_GRID_POINTS {
                return Err(Error::Precondition(format!("grid exceeds {MAX_GRID_POINTS} points")));
            }
            for i in 0..nx {
                for j in 0..ny {
                    pts.push(Complex64::new(
                        min.re + (max.re - min.re) * (i as f64 + 0.5) / nx as f64,
                        min.im + (max.im - min.im) * (j as f64 + 0.5) / ny as f64,
                    ));
                }
            }
        }
    }
    pts.retain(|z| region.contains(*z));
    Ok(pts)
}

/// Basis values at grid points, so that each trial costs one dot product
/// per point.
struct GridValues {
    dim: usize,
    values: Vec<Complex64>,
    log_scale: Vec<f64>,
}

impl GridValues {
    fn new(basis: &SectionBasis, pts: &[Point]) -> Result<Self> {
        if let Some(info) = basis.truncation() {
            if let Some(z) = pts.iter().find(|z| z.norm() > info.certified_radius) {
                return Err(Error::Truncation { tail: basis.tail_bound_at(*z), tolerance: info.tolerance });
            }
        }
        let dim = basis.dim();
        let mut values = Vec::with_capacity(pts.len() * dim);
        let mut log_scale = Vec::with_capacity(pts.len());
        for &z in pts {
            let s = basis.values(z)?;
            values.extend_from_slice(&s.values);
            log_scale.push(s.log_scale);
        }
        Ok(GridValues { dim, values, log_scale })
    }

    /// `max_x log |s(x)|_{h^p}`.
    fn log_max(&self, coeffs: &[Complex64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for (row, ls) in self.values.chunks_exact(self.dim).zip(&self.log_scale) {
            let v: Complex64 = row.iter().zip(coeffs).map(|(a, b)| a * b).sum();
            best = best.max(0.5 * v.norm_sqr().ln() + ls);
        }
        best
    }
}

/// Everything an experiment needs besides its own parameters.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: ModelSpace,
    pub ensemble: Ensemble,
    pub seed: SeedSpec,
    pub truncation: Option<Truncation>,
    pub runner: Runner,
}

impl Setup {
    pub fn basis(&self, p: u32) -> Result<SectionBasis> {
        build_basis(&self.model, p, self.truncation)
    }

    fn check_ps(&self, ps: &[u32]) -> Result<()> {
        if ps.is_empty() || ps.iter().any(|&p| p < 2) {
            return Err(Error::Validation("every p must be at least 2".into()));
        }
        Ok(())
    }

    fn coefficients(&self, basis: &SectionBasis, trial: u64) -> Vec<Complex64> {
        sample_coefficients(&self.ensemble, basis.dim(), &self.seed, basis.p(), trial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupnormRow {
    pub p: u32,
    pub d_p: usize,
    pub grid_points: usize,
    /// `E[𝓜]` with `𝓜` the grid maximum of `|s|_{h^p}`, a lower bound on
    /// the supremum.
    pub expectation: McEstimate,
    /// `log E[𝓜] / log p`.
    pub log_ratio: f64,
    pub in_bracket: bool,
    /// `P(|log 𝓜| ≥ δp)`.
    pub tail: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub p: u32,
    pub spacing: f64,
    pub grid_points: usize,
    pub mean_max: f64,
    /// Relative change against the finest grid.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupnormReport {
    pub delta: f64,
    pub rows: Vec<SupnormRow>,
    pub tail_fits: FitComparison,
    pub refinement: Vec<RefinementRow>,
}

/// Lower end of the expectation bracket `p^{-2} ≲ E[𝓜] ≲ p^{9/4}`.
pub const SUPNORM_BRACKET: (f64, f64) = (-2.0, 2.25);

pub fn supnorm_experiment(
    setup: &Setup,
    ps: &[u32],
    region: &Region,
    grid: GridSpec,
    n_trials: u64,
    delta: f64,
    refinement_trials: u64,
) -> Result<SupnormReport> {
    setup.check_ps(ps)?;
    if n_trials == 0 {
        return Err(Error::Validation("n_trials must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut refinement = Vec::new();
    for &p in ps {
        let basis = setup.basis(p)?;
        let pts = region_grid(&setup.model, region, grid.metric_step(p)?)?;
        let gv = GridValues::new(&basis, &pts)?;
        let (acc, tail) = setup.runner.fold(
            n_trials,
            || (Accumulator::default(), 0u64),
            |a, t| {
                let lm = gv.log_max(&setup.coefficients(&basis, t));
                a.0.push(lm.exp());
                if lm.abs() >= delta * p as f64 {
                    a.1 += 1;
                }
                Ok(())
            },
            |a, b| {
                a.0.merge(&b.0);
                a.1 += b.1;
            },
        )?;
        let expectation = McEstimate::from_accumulator(&acc);
        let log_ratio = expectation.mean.ln() / (p as f64).ln();
        rows.push(SupnormRow {
            p,
            d_p: basis.dim(),
            grid_points: pts.len(),
            expectation,
            log_ratio,
            in_bracket: log_ratio >= SUPNORM_BRACKET.0 && log_ratio <= SUPNORM_BRACKET.1,
            tail: McEstimate::proportion(tail, n_trials),
        });
        // the same trials on three successively halved grids
        let m = refinement_trials.min(n_trials);
        if m > 0 {
            let mut level = Vec::new();
            for k in 0..3 {
                let spacing = grid.spacing / f64::powi(2.0, k);
                let pts = region_grid(&setup.model, region, GridSpec { spacing }.metric_step(p)?)?;
                let gv = GridValues::new(&basis, &pts)?;
                let acc = setup.runner.fold(
                    m,
                    Accumulator::default,
                    |a, t| {
                        a.push(gv.log_max(&setup.coefficients(&basis, t)).exp());
                        Ok(())
                    },
                    |a, b| a.merge(&b),
                )?;
                level.push((spacing, pts.len(), acc.mean()));
            }
            let finest = level[2].2;
            for (spacing, n, mean) in level {
                refinement.push(RefinementRow { p, spacing, grid_points: n, mean_max: mean, drift: (finest - mean) / finest });
            }
        }
    }
    let points: Vec<DecayPoint> = rows.iter().map(|r| DecayPoint::from_estimate(r.p, &r.tail)).collect();
    Ok(SupnormReport { delta, tail_fits: compare_fits(&points), rows, refinement })
}

/// Grid maximum of `|s|_{h^p}` for a fixed coefficient vector.
pub fn grid_sup_norm(basis: &SectionBasis, coeffs: &[Complex64], region: &Region, grid: GridSpec) -> Result<f64> {
    if coeffs.len() != basis.dim() {
        return Err(Error::DimensionMismatch { expected: basis.dim(), got: coeffs.len() });
    }
    let pts = region_grid(basis.model(), region, grid.metric_step(basis.p())?)?;
    Ok(GridValues::new(basis, &pts)?.log_max(coeffs).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub p: u32,
    pub point: Point,
    pub empirical: McEstimate,
    /// `σ_p² B_p(x, x)`.
    pub analytic: f64,
    pub z_score: f64,
}

/// Compare the empirical `E|s_p(x)|²_{h^p}` with `σ_p² B_p(x,x)`.
pub fn variance_identity_check(setup: &Setup, basis: &SectionBasis, x: Point, n_trials: u64) -> Result<VarianceReport> {
    if !setup.model.contains(x) {
        return Err(Error::Domain(format!("{x} is not a point of the surface")));
    }
    if n_trials < 2 {
        return Err(Error::Validation("variance check needs at least 2 trials".into()));
    }
    let v = basis.values(x)?;
    let scale = (2.0 * v.log_scale).exp();
    let acc = setup.runner.fold(
        n_trials,
        Accumulator::default,
        |a, t| {
            let c = setup.coefficients(basis, t);
            let s: Complex64 = v.values.iter().zip(&c).map(|(a, b)| a * b).sum();
            a.push(s.norm_sqr() * scale);
            Ok(())
        },
        |a, b| a.merge(&b),
    )?;
    let empirical = McEstimate::from_accumulator(&acc);
    let analytic = setup.ensemble.variance(basis.dim()) * basis.bergman_density(x)?;
    Ok(VarianceReport { p: basis.p(), point: x, empirical, analytic, z_score: (empirical.mean - analytic).abs() / empirical.std_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquidistributionRow {
    pub p: u32,
    pub d_p: usize,
    /// Mean of `𝓝^U_p / p`.
    pub normalized_count: McEstimate,
    /// `P(|𝓝/p − Area^L/2π| > δ)`.
    pub deviation: McEstimate,
    /// `P(𝓝 = 0)`, from the same trials.
    pub hole: McEstimate,
    /// Zeros found within `1e-9` of the region boundary.
    pub boundary_flags: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquidistributionReport {
    pub delta: f64,
    /// `Area^L(U) / 2π`.
    pub target: f64,
    pub rows: Vec<EquidistributionRow>,
    pub deviation_fits: FitComparison,
    pub deviation_nonincreasing: bool,
}

#[derive(Default)]
struct CountState {
    acc: Accumulator,
    deviations: u64,
    holes: u64,
    flags: u64,
}

impl CountState {
    fn merge(&mut self, o: CountState) {
        self.acc.merge(&o.acc);
        self.deviations += o.deviations;
        self.holes += o.holes;
        self.flags += o.flags;
    }
}

pub fn equidistribution_experiment(setup: &Setup, ps: &[u32], region: &Region, delta: f64, n_trials: u64) -> Result<EquidistributionReport> {
    setup.check_ps(ps)?;
    if n_trials == 0 || !(delta > 0.0) {
        return Err(Error::Validation("need n_trials > 0 and delta > 0".into()));
    }
    let target = area_l(&setup.model, region)? / (2.0 * PI);
    let mut rows = Vec::new();
    for &p in ps {
        let basis = setup.basis(p)?;
        check_certified_region(&basis, region)?;
        let st = setup.runner.fold(
            n_trials,
            CountState::default,
            |a, t| {
                let sec = RandomSection::new(&basis, setup.coefficients(&basis, t))?;
                let c = count_zeros_in(&find_zeros(&sec)?, region);
                let x = c.count as f64 / p as f64;
                a.acc.push(x);
                a.deviations += ((x - target).abs() > delta) as u64;
                a.holes += (c.count == 0) as u64;
                a.flags += c.near_boundary as u64;
                Ok(())
            },
            CountState::merge,
        )?;
        rows.push(EquidistributionRow {
            p,
            d_p: basis.dim(),
            normalized_count: McEstimate::from_accumulator(&st.acc),
            deviation: McEstimate::proportion(st.deviations, n_trials),
            hole: McEstimate::proportion(st.holes, n_trials),
            boundary_flags: st.flags,
        });
    }
    let points: Vec<DecayPoint> = rows.iter().map(|r| DecayPoint::from_estimate(r.p, &r.deviation)).collect();
    let curve: Vec<McEstimate> = rows.iter().map(|r| r.deviation).collect();
    Ok(EquidistributionReport {
        delta,
        target,
        deviation_fits: compare_fits(&points),
        deviation_nonincreasing: nonincreasing_within_ci(&curve),
        rows,
    })
}

fn check_certified_region(basis: &SectionBasis, region: &Region) -> Result<()> {
    if let Some(info) = basis.truncation() {
        if region.outer_radius() > info.certified_radius {
            return Err(Error::Truncation {
                tail: basis.tail_bound_at(Complex64::new(region.outer_radius(), 0.0)),
                tolerance: info.tolerance,
            });
        }
    }
    Ok(())
}

/// Gaussian lower bound on the hole probability from a comparison section
/// `τ = S_j` without zeros in the region: the hole event contains
/// `{|η_j| ≥ σ} ∩ {|η_k| ≤ σ t √(d/(d−1)) for k ≠ j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleLowerBound {
    /// Monomial exponent leading the comparison element.
    pub element: u32,
    /// `b = −log inf_U |τ|_{h^p}`.
    pub b: f64,
    /// `sup_U (B_p − |τ|²)^{1/2}`.
    pub remainder_sup: f64,
    pub t: f64,
    /// `ln(e^{-1} (t²/2)^{d−1})`.
    pub ln_bound: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleRow {
    pub p: u32,
    pub d_p: usize,
    pub probability: McEstimate,
    pub lower_bound: Option<HoleLowerBound>,
    /// `ci_high ≥ bound`, checked when at least 5 holes were seen.
    pub bound_consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleReport {
    pub area_fraction: f64,
    pub rows: Vec<HoleRow>,
    pub fits: FitComparison,
    /// Set when no hole was seen at any `p`; only rule-of-three bounds are
    /// meaningful then.
    pub no_events: bool,
}

/// Metric step used to locate `inf |τ|` and `sup (B − |τ|²)`.
const BOUND_GRID_STEP: f64 = 0.02;

pub fn hole_lower_bound(basis: &SectionBasis, region: &Region) -> Result<Option<HoleLowerBound>> {
    let pts = region_grid(basis.model(), region, BOUND_GRID_STEP)?;
    let d = basis.dim();
    let mut m = vec![f64::INFINITY; d];
    let mut s = vec![0.0f64; d];
    for &z in &pts {
        let v = basis.values(z)?;
        let scale = v.log_scale.exp();
        let sq: Vec<f64> = v.values.iter().map(|c| c.norm_sqr()).collect();
        let b: f64 = sq.iter().sum();
        for j in 0..d {
            m[j] = m[j].min(sq[j].sqrt() * scale);
            s[j] = s[j].max((b - sq[j]).max(0.0).sqrt() * scale);
        }
    }
    let mut best: Option<HoleLowerBound> = None;
    for j in 0..d {
        if !(m[j] > 0.0) {
            continue;
        }
        let t = if s[j] > 0.0 { (m[j] / (s[j] * (d as f64).sqrt())).min(1.0) } else { 1.0 };
        let ln_bound = -1.0 + (d as f64 - 1.0) * (0.5 * t * t).ln();
        if best.as_ref().is_some_and(|b| b.ln_bound >= ln_bound) {
            continue;
        }
        if !basis.is_diagonal() {
            let mut e = vec![Complex64::new(0.0, 0.0); d];
            e[j] = Complex64::new(1.0, 0.0);
            if count_zeros_in(&find_zeros(&RandomSection::new(basis, e)?)?, region).count > 0 {
                continue;
            }
        }
        best = Some(HoleLowerBound {
            element: basis.exponents()[j],
            b: -m[j].ln(),
            remainder_sup: s[j],
            t,
            ln_bound,
            bound: ln_bound.exp(),
        });
    }
    Ok(best)
}

pub fn hole_experiment(setup: &Setup, ps: &[u32], region: &Region, n_trials: u64) -> Result<HoleReport> {
    setup.check_ps(ps)?;
    if n_trials == 0 {
        return Err(Error::Validation("n_trials must be positive".into()));
    }
    let area_fraction = area_l(&setup.model, region)? / (2.0 * PI);
    let mut rows = Vec::new();
    for &p in ps {
        let basis = setup.basis(p)?;
        check_certified_region(&basis, region)?;
        let holes = setup.runner.fold(
            n_trials,
            || 0u64,
            |a, t| {
                let sec = RandomSection::new(&basis, setup.coefficients(&basis, t))?;
                *a += (count_zeros_in(&find_zeros(&sec)?, region).count == 0) as u64;
                Ok(())
            },
            |a, b| *a += b,
        )?;
        let probability = McEstimate::proportion(holes, n_trials);
        let lower_bound = if setup.ensemble.is_gaussian() { hole_lower_bound(&basis, region)? } else { None };
        let bound_consistent = match &lower_bound {
            Some(lb) if holes >= MIN_EVENTS => Some(probability.ci95.1 >= lb.bound),
            _ => None,
        };
        rows.push(HoleRow { p, d_p: basis.dim(), probability, lower_bound, bound_consistent });
    }
    let points: Vec<DecayPoint> = rows.iter().map(|r| DecayPoint::from_estimate(r.p, &r.probability)).collect();
    let no_events = rows.iter().all(|r| r.probability.n_events == Some(0));
    Ok(HoleReport { area_fraction, fits: compare_fits(&points), rows, no_events })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingRow {
    pub p: u32,
    pub d_p: usize,
    /// Mean of `((1/p)[Div s_p], φ)`.
    pub pairing: McEstimate,
    /// `P(|pairing − ∫φc₁| > δ)`.
    pub deviation: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub test_function: TestFunction,
    pub delta: f64,
    /// `∫ φ c₁(L, h)`.
    pub target: f64,
    pub rows: Vec<PairingRow>,
    pub deviation_fits: FitComparison,
}

pub fn test_function_ld_experiment(setup: &Setup, ps: &[u32], phi: &TestFunction, delta: f64, n_trials: u64) -> Result<PairingReport> {
    setup.check_ps(ps)?;
    if !phi.locally_constant_near_punctures(&setup.model) {
        return Err(Error::Validation("the test function must be locally constant near every puncture".into()));
    }
    if n_trials == 0 || !(delta > 0.0) {
        return Err(Error::Validation("need n_trials > 0 and delta > 0".into()));
    }
    let target = phi.curvature_integral(&setup.model)?;
    let mut rows = Vec::new();
    for &p in ps {
        let basis = setup.basis(p)?;
        if let Some(support) = phi.support() {
            check_certified_region(&basis, &support)?;
        }
        let (acc, dev) = setup.runner.fold(
            n_trials,
            || (Accumulator::default(), 0u64),
            |a, t| {
                let sec = RandomSection::new(&basis, setup.coefficients(&basis, t))?;
                let x = pair_divisor(&find_zeros(&sec)?, phi, p);
                a.0.push(x);
                a.1 += ((x - target).abs() > delta) as u64;
                Ok(())
            },
            |a, b| {
                a.0.merge(&b.0);
                a.1 += b.1;
            },
        )?;
        rows.push(PairingRow {
            p,
            d_p: basis.dim(),
            pairing: McEstimate::from_accumulator(&acc),
            deviation: McEstimate::proportion(dev, n_trials),
        });
    }
    let points: Vec<DecayPoint> = rows.iter().map(|r| DecayPoint::from_estimate(r.p, &r.deviation)).collect();
    Ok(PairingReport { test_function: *phi, delta, target, deviation_fits: compare_fits(&points), rows })
}

/// Frequency table of the vanishing order at the chart origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderTable {
    pub p: u32,
    pub n_trials: u64,
    /// `(order, count)` for every order seen.
    pub counts: Vec<(u32, u64)>,
    pub max_order: u32,
}

pub fn vanishing_order_table(setup: &Setup, p: u32, n_trials: u64) -> Result<OrderTable> {
    if setup.model.kind() == ModelKind::FubiniStudySphere {
        return Err(Error::Unsupported("the compact sphere has no puncture".into()));
    }
    let origin = Complex64::new(0.0, 0.0);
    if !setup.model.punctures().contains(&origin) {
        return Err(Error::Unsupported("no puncture at the chart origin".into()));
    }
    let basis = setup.basis(p)?;
    let hist = setup.runner.fold(
        n_trials,
        Vec::<u64>::new,
        |h, t| {
            let sec = RandomSection::new(&basis, setup.coefficients(&basis, t))?;
            let k = vanishing_order(&sec, origin)? as usize;
            if h.len() <= k {
                h.resize(k + 1, 0);
            }
            h[k] += 1;
            Ok(())
        },
        |a, b| {
            if a.len() < b.len() {
                a.resize(b.len(), 0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        },
    )?;
    let counts: Vec<(u32, u64)> = hist.iter().enumerate().filter(|x| *x.1 > 0).map(|(k, &c)| (k as u32, c)).collect();
    Ok(OrderTable { p, n_trials, max_order: counts.last().map_or(0, |c| c.0), counts })
}

/// CSV curve with columns `p,estimate,ci_low,ci_high,n_trials,n_events`.
pub fn curve_csv(rows: &[(u32, McEstimate)]) -> String {
    let mut s = String::from("p,estimate,ci_low,ci_high,n_trials,n_events\n");
    for (p, e) in rows {
        let events = e.n_events.map(|n| n.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{p},{},{},{},{},{events}", e.mean, e.ci95.0, e.ci95.1, e.n_trials);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::RadiusRule;

    fn setup(model: ModelSpace, ensemble: Ensemble, workers: usize) -> Setup {
        Setup { model, ensemble, seed: SeedSpec::new(2024), truncation: None, runner: Runner::new(workers).unwrap() }
    }

    /// Binomial tail by direct summation.
    fn binom_cdf(k: u64, n: u64, q: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..=k {
            let ln = statrs::function::factorial::ln_binomial(n, i) + i as f64 * q.ln() + (n - i) as f64 * (1.0 - q).ln();
            total += ln.exp();
        }
        total
    }

    fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if (f(a) < 0.0) == (f(m) < 0.0) {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn clopper_pearson_matches_binomial_tails() {
        for (k, n) in [(5u64, 100u64), (1, 30), (17, 40)] {
            let (lo, hi) = clopper_pearson(k, n, 0.95);
            // P(X ≥ k | lo) = 0.025 and P(X ≤ k | hi) = 0.025
            let lo_ref = bisect(|q| 1.0 - binom_cdf(k - 1, n, q) - 0.025, 1e-9, 1.0 - 1e-9);
            let hi_ref = bisect(|q| binom_cdf(k, n, q) - 0.025, 1e-9, 1.0 - 1e-9);
            assert!((lo - lo_ref).abs() < 1e-7, "{lo} {lo_ref}");
            assert!((hi - hi_ref).abs() < 1e-7, "{hi} {hi_ref}");
        }
        let (lo, hi) = clopper_pearson(0, 1000, 0.95);
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - 0.025f64.powf(1.0 / 1000.0))).abs() < 1e-9);
        let e = McEstimate::proportion(0, 1000);
        assert_eq!(e.rule_of_three, Some(0.003));
    }

    #[test]
    fn exact_gaussian_decay_is_recovered() {
        let pts: Vec<DecayPoint> = (1..=4)
            .map(|p| {
                let pr = (-2.0 * (p * p) as f64).exp();
                DecayPoint { p, probability: pr, n_events: 1000, n_trials: (1000.0 / pr) as u64 }
            })
            .collect();
        let f = fit_decay(&pts, Abscissa::PSquared).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-6);
        assert!((f.r_squared - 1.0).abs() < 1e-9);
        let lin: Vec<DecayPoint> = (1..=6)
            .map(|p| DecayPoint { p, probability: (-(p as f64)).exp(), n_events: 1000, n_trials: (1000.0 * (p as f64).exp()) as u64 })
            .collect();
        let a = fit_decay(&lin, Abscissa::P).unwrap();
        let b = fit_decay(&lin, Abscissa::PSquared).unwrap();
        assert!(b.r_squared < a.r_squared);
    }

    #[test]
    fn sparse_points_are_excluded() {
        let mut pts: Vec<DecayPoint> =
            (2..=5).map(|p| DecayPoint { p, probability: 0.1 / p as f64, n_events: 100, n_trials: 1000 * p as u64 }).collect();
        pts.push(DecayPoint { p: 6, probability: 4e-6, n_events: 4, n_trials: 1_000_000 });
        let f = fit_decay(&pts, Abscissa::P).unwrap();
        assert_eq!(f.excluded, vec![6]);
        assert_eq!(f.points.len(), 4);
        assert!(fit_decay(&pts[..2], Abscissa::P).is_err());
    }

    #[test]
    fn runner_is_independent_of_worker_count() {
        let r1 = Runner::new(1).unwrap();
        let r4 = Runner::new(4).unwrap();
        let f = |r: &Runner| {
            r.fold(
                10_000,
                Accumulator::default,
                |a, t| {
                    a.push(((t as f64) * 0.37).sin() * 1e3 + 1e-9 * t as f64);
                    Ok(())
                },
                |a, b| a.merge(&b),
            )
            .unwrap()
        };
        let (a, b) = (f(&r1), f(&r4));
        assert_eq!(a.mean().to_bits(), b.mean().to_bits());
        assert_eq!(a.variance().to_bits(), b.variance().to_bits());
    }

    #[test]
    fn grid_respects_metric_spacing() {
        let model = ModelSpace::punctured_disk();
        let region = Region::annulus((-6.0f64).exp(), (-1.0f64).exp());
        let step = 0.1;
        let pts = region_grid(&model, &region, step).unwrap();
        assert!(pts.iter().all(|z| region.contains(*z)));
        // every point of the region lies within one step of a grid point
        let probe = [Complex64::from_polar(0.01, 1.0), Complex64::from_polar(0.3, -2.0), Complex64::from_polar(0.003, 0.2)];
        for z in probe {
            let best = pts
                .iter()
                .map(|w| crate::models::local_distance(&model, z, *w).unwrap_or(f64::INFINITY))
                .fold(f64::INFINITY, f64::min);
            assert!(best < step, "{z}: {best}");
        }
        assert!(GridSpec { spacing: 0.3 }.metric_step(4).is_err());
    }

    #[test]
    fn variance_identity_sphere() {
        let s = setup(ModelSpace::sphere(1).unwrap(), Ensemble::gaussian(1.0).unwrap(), 1);
        let b = s.basis(6).unwrap();
        let r = variance_identity_check(&s, &b, Complex64::new(0.4, -0.2), 20_000).unwrap();
        assert!(r.z_score <= 4.0, "{r:?}");
        let r2 = variance_identity_check(&s, &b, Complex64::new(0.4, -0.2), 40_000).unwrap();
        let ratio = r.empirical.std_error / r2.empirical.std_error;
        assert!((ratio - 2f64.sqrt()).abs() < 0.2 * 2f64.sqrt(), "{ratio}");
    }

    #[test]
    fn single_element_sup_norm_is_reproducible() {
        let model = ModelSpace::sphere(1).unwrap();
        let b = build_basis(&model, 8, None).unwrap();
        let mut e = vec![Complex64::new(0.0, 0.0); b.dim()];
        e[3] = Complex64::new(1.0, 0.0);
        let region = Region::disk(Complex64::new(0.0, 0.0), 1.0);
        let a = grid_sup_norm(&b, &e, &region, GridSpec::default()).unwrap();
        let c = grid_sup_norm(&b, &e, &region, GridSpec::default()).unwrap();
        assert_eq!(a.to_bits(), c.to_bits());
        // |z^3| w^{4} / ‖z^3‖ peaks on |z|² = 3/5, inside the unit disk
        let peak = ((0.6f64).powi(3) / 1.6f64.powi(8)).sqrt() / (0.5 * crate::hilbert::sphere_log_norm_sq(1, 8, 3)).exp();
        assert!(a <= peak * (1.0 + 1e-12) && a > 0.98 * peak, "{a} {peak}");
    }

    #[test]
    fn holes_are_deviations_on_the_same_trials() {
        let s = setup(ModelSpace::sphere(1).unwrap(), Ensemble::gaussian(1.0).unwrap(), 2);
        let region = Region::disk(Complex64::new(0.0, 0.0), 0.5);
        let target = area_l(&s.model, &region).unwrap() / (2.0 * PI);
        let eq = equidistribution_experiment(&s, &[2, 4], &region, 0.9 * target, 2000).unwrap();
        let holes = hole_experiment(&s, &[2, 4], &region, 2000).unwrap();
        for (r, h) in eq.rows.iter().zip(&holes.rows) {
            assert_eq!(r.hole.n_events, h.probability.n_events);
            assert!(r.deviation.n_events.unwrap() >= h.probability.n_events.unwrap());
            assert!(h.lower_bound.is_some());
        }
    }

    #[test]
    fn uniform_disk_has_no_lower_bound_curve() {
        let e = Ensemble::uniform_disk(RadiusRule::Constant { value: 1.0 }).unwrap();
        let s = setup(ModelSpace::sphere(1).unwrap(), e, 1);
        let r = hole_experiment(&s, &[2], &Region::disk(Complex64::new(0.0, 0.0), 0.3), 300).unwrap();
        assert!(r.rows[0].lower_bound.is_none());
    }

    #[test]
    fn pairing_rejects_functions_not_constant_near_cusps() {
        let model = ModelSpace::cusped_sphere(1, crate::models::DEFAULT_BLEND, 0.1, true).unwrap();
        let s = setup(model, Ensemble::gaussian(1.0).unwrap(), 1);
        let bump = TestFunction::Bump { center: Complex64::new(0.0, 0.0), radius: 0.5 };
        assert!(matches!(test_function_ld_experiment(&s, &[3], &bump, 0.1, 10), Err(Error::Validation(_))));
        let one = TestFunction::Constant { value: 1.0 };
        let r = test_function_ld_experiment(&s, &[3], &one, 0.5, 50).unwrap();
        // all zeros on the surface: (p − ord₀ − ...)/p ≤ 1 − 1/p
        assert!(r.rows[0].pairing.mean <= 1.0 - 1.0 / 3.0 + 1e-12);
        let compact = setup(ModelSpace::sphere(1).unwrap(), Ensemble::gaussian(1.0).unwrap(), 1);
        assert!(test_function_ld_experiment(&compact, &[3], &one, 0.1, 10).is_err());
    }

    #[test]
    fn csv_schema() {
        let csv = curve_csv(&[(4, McEstimate::proportion(3, 10))]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("p,estimate,ci_low,ci_high,n_trials,n_events"));
        assert!(lines.next().unwrap().starts_with("4,0.3,"));
    }
}
