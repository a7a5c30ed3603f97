//! Coefficient ensembles, reproducible random streams, moment checks and the
//! marginal-density bound.

use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Radius `r_p` of the uniform-disk ensemble as a function of `d_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum RadiusRule {
    Constant { value: f64 },
    /// `r_p = min(d_p, value)`.
    MinDp { value: f64 },
}

impl RadiusRule {
    pub fn radius(&self, d_p: usize) -> f64 {
        match *self {
            RadiusRule::Constant { value } => value,
            RadiusRule::MinDp { value } => value.min(d_p as f64),
        }
    }

    /// Smallest radius over all `d_p ≥ 1`.
    fn min_radius(&self) -> f64 {
        match *self {
            RadiusRule::Constant { value } => value,
            RadiusRule::MinDp { value } => value.min(1.0),
        }
    }

    fn value(&self) -> f64 {
        match *self {
            RadiusRule::Constant { value } | RadiusRule::MinDp { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnsembleKind {
    /// `η = σ ξ` with `ξ` standard complex Gaussian (`E|ξ|² = 1`).
    ComplexGaussian { sigma: f64 },
    /// Uniform on the disk of radius `r_p`.
    UniformDisk { radius: RadiusRule },
}

/// A centered i.i.d. coefficient law with its density, variance and moment
/// constants `M₀, c₀, C₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub kind: EnsembleKind,
    /// Uniform bound on the coefficient density.
    pub m0: f64,
    /// Uniform lower bound on `E|η|²`.
    pub c0: f64,
    /// Constant in `E|η|^{d} ≤ C₀ d^d`.
    pub moment_constant: f64,
}

/// Largest `d` for which the Gaussian moment constant is tabulated.
const MOMENT_DEGREE_LIMIT: usize = 4096;

impl Ensemble {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!("Gaussian σ must be positive, got {sigma}")));
        }
        // sup_d σ^d Γ(d/2 + 1) / d^d, attained at small d
        let ln_c0 = (1..=MOMENT_DEGREE_LIMIT)
            .map(|d| {
                let df = d as f64;
                df * sigma.ln() + ln_gamma(df / 2.0 + 1.0) - df * df.ln()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Ensemble {
            kind: EnsembleKind::ComplexGaussian { sigma },
            m0: 1.0 / (PI * sigma * sigma),
            c0: sigma * sigma,
            moment_constant: ln_c0.exp(),
        })
    }

    pub fn uniform_disk(radius: RadiusRule) -> Result<Self> {
        let v = radius.value();
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Validation(format!("uniform-disk radius must be positive, got {v}")));
        }
        let rmin = radius.min_radius();
        Ok(Ensemble {
            kind: EnsembleKind::UniformDisk { radius },
            m0: 1.0 / (PI * rmin * rmin),
            c0: rmin * rmin / 2.0,
            // 2 r^d / (d + 2) ≤ d^d whenever r ≤ d
            moment_constant: 1.0,
        })
    }

    pub fn from_kind(kind: EnsembleKind) -> Result<Self> {
        match kind {
            EnsembleKind::ComplexGaussian { sigma } => Self::gaussian(sigma),
            EnsembleKind::UniformDisk { radius } => Self::uniform_disk(radius),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, EnsembleKind::ComplexGaussian { .. })
    }

    /// `σ_p² = E|η|²` at dimension `d_p`.
    pub fn variance(&self, d_p: usize) -> f64 {
        match self.kind {
            EnsembleKind::ComplexGaussian { sigma } => sigma * sigma,
            EnsembleKind::UniformDisk { radius } => {
                let r = radius.radius(d_p);
                r * r / 2.0
            }
        }
    }

    /// Exact `E|η|^d` at dimension `d_p`.
    pub fn abs_moment(&self, d_p: usize, d: f64) -> f64 {
        match self.kind {
            EnsembleKind::ComplexGaussian { sigma } => (d * sigma.ln() + ln_gamma(d / 2.0 + 1.0)).exp(),
            EnsembleKind::UniformDisk { radius } => 2.0 * radius.radius(d_p).powf(d) / (d + 2.0),
        }
    }

    /// Supremum of the coefficient density at dimension `d_p`.
    pub fn density_sup(&self, d_p: usize) -> f64 {
        match self.kind {
            EnsembleKind::ComplexGaussian { sigma } => 1.0 / (PI * sigma * sigma),
            EnsembleKind::UniformDisk { radius } => {
                let r = radius.radius(d_p);
                1.0 / (PI * r * r)
            }
        }
    }

    /// Check the density, variance and moment conditions at every dimension
    /// an experiment will use.
    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        for &d in dims {
            if d == 0 {
                return Err(Error::Validation("section space has dimension zero".into()));
            }
            if self.density_sup(d) > self.m0 * (1.0 + 1e-12) {
                return Err(Error::Validation(format!("density bound M0 = {} fails at d_p = {d}", self.m0)));
            }
            if self.variance(d) < self.c0 * (1.0 - 1e-12) {
                return Err(Error::Validation(format!("variance bound c0 = {} fails at d_p = {d}", self.c0)));
            }
            if let EnsembleKind::UniformDisk { radius } = self.kind {
                let r = radius.radius(d);
                if r > d as f64 {
                    return Err(Error::Validation(format!("uniform-disk radius {r} exceeds d_p = {d}")));
                }
            }
            let df = d as f64;
            let ln_moment = self.abs_moment(d, df).ln();
            if ln_moment > self.moment_constant.ln() + df * df.ln() + 1e-9 {
                return Err(Error::Validation(format!("moment bound E|η|^d ≤ C0 d^d fails at d = {d}")));
            }
        }
        Ok(())
    }

    /// Draw one coefficient.
    pub fn sample_one<R: Rng + ?Sized>(&self, d_p: usize, rng: &mut R) -> Complex64 {
        match self.kind {
            EnsembleKind::ComplexGaussian { sigma } => {
                let s = sigma * std::f64::consts::FRAC_1_SQRT_2;
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(s * re, s * im)
            }
            EnsembleKind::UniformDisk { radius } => {
                let r = radius.radius(d_p);
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                Complex64::from_polar(r * u.sqrt(), 2.0 * PI * v)
            }
        }
    }

    /// Fill `out` with i.i.d. coefficients for a space of dimension `out.len()`.
    pub fn sample_into<R: Rng + ?Sized>(&self, out: &mut [Complex64], rng: &mut R) {
        let d = out.len();
        for c in out.iter_mut() {
            *c = self.sample_one(d, rng);
        }
    }
}

/// Purpose tag of a random stream; keeps unrelated draws independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamTag {
    Coefficients = 0,
    Moments = 1,
    Subspace = 2,
    Marginal = 3,
}

/// Master seed; every `(tag, p, trial)` maps to its own ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRIAL_BITS: u32 = 40;

impl SeedSpec {
    pub fn new(master: u64) -> Self {
        SeedSpec { master }
    }

    fn key(&self) -> [u8; 32] {
        let mut state = self.master;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        key
    }

    /// Independent stream for `(tag, p, trial)`; `p < 2^16`, `trial < 2^40`.
    pub fn stream(&self, tag: StreamTag, p: u32, trial: u64) -> ChaCha8Rng {
        assert!(p < (1 << 16), "p too large for the stream layout");
        assert!(trial < (1 << TRIAL_BITS), "trial index too large for the stream layout");
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(((tag as u64) << 56) | ((p as u64) << TRIAL_BITS) | trial);
        rng
    }
}

/// The coefficient vector of trial `trial` at power `p`.
pub fn sample_coefficients(ensemble: &Ensemble, d_p: usize, seed: &SeedSpec, p: u32, trial: u64) -> Vec<Complex64> {
    let mut rng = seed.stream(StreamTag::Coefficients, p, trial);
    let mut out = vec![Complex64::new(0.0, 0.0); d_p];
    ensemble.sample_into(&mut out, &mut rng);
    out
}

/// Running mean and variance with compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    n: u64,
    sum: f64,
    comp: f64,
    sum_sq: f64,
    comp_sq: f64,
}

fn neumaier(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        neumaier(&mut self.sum, &mut self.comp, x);
        neumaier(&mut self.sum_sq, &mut self.comp_sq, x * x);
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.n += other.n;
        neumaier(&mut self.sum, &mut self.comp, other.sum);
        neumaier(&mut self.sum, &mut self.comp, other.comp);
        neumaier(&mut self.sum_sq, &mut self.comp_sq, other.sum_sq);
        neumaier(&mut self.sum_sq, &mut self.comp_sq, other.comp_sq);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        (self.sum + self.comp) / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let m = self.mean();
        (((self.sum_sq + self.comp_sq) - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub empirical: f64,
    pub std_error: f64,
    /// Closed-form value when known.
    pub analytic: Option<f64>,
    /// `|empirical − analytic| / std_error`.
    pub z_score: Option<f64>,
}

fn entry(acc: &Accumulator, analytic: Option<f64>) -> MomentEntry {
    let e = acc.mean();
    let se = acc.std_error();
    MomentEntry {
        empirical: e,
        std_error: se,
        analytic,
        z_score: analytic.map(|a| if se > 0.0 { (e - a).abs() / se } else if e == a { 0.0 } else { f64::INFINITY }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub d_p: usize,
    pub n_samples: usize,
    /// `E|η|²`, per coordinate.
    pub second: MomentEntry,
    /// `E|η|^{d_p}`, per coordinate.
    pub d_moment: MomentEntry,
    /// `E‖η‖²`.
    pub norm_sq: MomentEntry,
    /// `E‖η‖^{d_p}`.
    pub norm_d: MomentEntry,
    /// `C₀ d_p^{d_p}`.
    pub moment_bound: f64,
    /// `E|η|^{d_p} ≤ C₀ d_p^{d_p}` (empirical value).
    pub moment_bound_ok: bool,
    /// `E‖η‖² ≥ c₀ d_p` within four standard errors.
    pub variance_bound_ok: bool,
    /// `E‖η‖² = d_p σ_p²` within four standard errors.
    pub norm_identity_ok: bool,
}

/// Empirical coefficient moments against their closed forms and bounds.
pub fn moment_report(ensemble: &Ensemble, d_p: usize, n_samples: usize, seed: &SeedSpec) -> Result<MomentReport> {
    if n_samples < 1000 {
        return Err(Error::Precondition(format!("moment report needs at least 1000 samples, got {n_samples}")));
    }
    if d_p == 0 {
        return Err(Error::Precondition("dimension must be at least 1".into()));
    }
    let dd = d_p as f64;
    let mut second = Accumulator::default();
    let mut dmom = Accumulator::default();
    let mut nsq = Accumulator::default();
    let mut nd = Accumulator::default();
    let mut buf = vec![Complex64::new(0.0, 0.0); d_p];
    for i in 0..n_samples {
        let mut rng = seed.stream(StreamTag::Moments, d_p.min(65535) as u32, i as u64);
        ensemble.sample_into(&mut buf, &mut rng);
        let mut s = 0.0;
        for c in &buf {
            let a2 = c.norm_sqr();
            second.push(a2);
            dmom.push(a2.powf(dd / 2.0));
            s += a2;
        }
        nsq.push(s);
        nd.push(s.powf(dd / 2.0));
    }
    let sigma2 = ensemble.variance(d_p);
    // E‖η‖^{d} for the Gaussian: σ^d Γ(d + d/2) / Γ(d)
    let norm_d_exact = match ensemble.kind {
        EnsembleKind::ComplexGaussian { sigma } => {
            Some((dd * sigma.ln() + ln_gamma(dd + dd / 2.0) - ln_gamma(dd)).exp())
        }
        EnsembleKind::UniformDisk { .. } => None,
    };
    let second = entry(&second, Some(sigma2));
    let d_moment = entry(&dmom, Some(ensemble.abs_moment(d_p, dd)));
    let norm_sq = entry(&nsq, Some(dd * sigma2));
    let norm_d = entry(&nd, norm_d_exact);
    let moment_bound = ensemble.moment_constant * dd.powf(dd);
    Ok(MomentReport {
        d_p,
        n_samples,
        moment_bound_ok: d_moment.empirical <= moment_bound,
        variance_bound_ok: norm_sq.empirical + 4.0 * norm_sq.std_error >= ensemble.c0 * dd,
        norm_identity_ok: norm_sq.z_score.is_some_and(|z| z <= 4.0),
        second,
        d_moment,
        norm_sq,
        norm_d,
        moment_bound,
    })
}

fn binomial_exact(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// `M₀ⁿ · binom(d, n)`, the bound on the density of any `n`-dimensional
/// projection of the coefficient vector.
pub fn marginal_bound(d_p: usize, n: usize, m0: f64) -> Result<f64> {
    if n > d_p {
        return Err(Error::Domain(format!("projection dimension {n} exceeds d_p = {d_p}")));
    }
    if d_p <= 60 {
        Ok(m0.powi(n as i32) * binomial_exact(d_p as u64, n as u64) as f64)
    } else {
        let lb = ln_gamma(d_p as f64 + 1.0) - ln_gamma(n as f64 + 1.0) - ln_gamma((d_p - n) as f64 + 1.0);
        Ok((n as f64 * m0.ln() + lb).exp())
    }
}

/// Complex subspace `V ⊂ ℂ^{d}` given by orthonormal rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Subspace {
    /// Span of the listed coordinate axes.
    Axes { axes: Vec<usize> },
    /// Explicit rows, orthonormalized before use.
    Rows { rows: Vec<Vec<Complex64>> },
    /// Haar-random `n`-dimensional subspace drawn from the seed.
    Random { n: usize },
}

fn orthonormalize(rows: &mut [Vec<Complex64>]) -> Result<()> {
    for i in 0..rows.len() {
        for j in 0..i {
            let (a, b) = rows.split_at_mut(i);
            let proj: Complex64 = b[0].iter().zip(&a[j]).map(|(x, y)| x * y.conj()).sum();
            for (x, y) in b[0].iter_mut().zip(&a[j]) {
                *x -= proj * y;
            }
        }
        let nrm = rows[i].iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if nrm < 1e-12 {
            return Err(Error::Degenerate("subspace rows are linearly dependent".into()));
        }
        for x in rows[i].iter_mut() {
            *x /= nrm;
        }
    }
    Ok(())
}

impl Subspace {
    pub fn resolve(&self, d: usize, seed: &SeedSpec) -> Result<Vec<Vec<Complex64>>> {
        let mut rows = match self {
            Subspace::Axes { axes } => axes
                .iter()
                .map(|&a| {
                    if a >= d {
                        return Err(Error::Domain(format!("axis {a} out of range for d = {d}")));
                    }
                    let mut v = vec![Complex64::new(0.0, 0.0); d];
                    v[a] = Complex64::new(1.0, 0.0);
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?,
            Subspace::Rows { rows } => {
                if rows.iter().any(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch { expected: d, got: rows.iter().map(|r| r.len()).find(|&l| l != d).unwrap_or(0) });
                }
                rows.clone()
            }
            Subspace::Random { n } => {
                let mut rng = seed.stream(StreamTag::Subspace, d as u32, *n as u64);
                let g = Ensemble::gaussian(1.0)?;
                (0..*n)
                    .map(|_| {
                        let mut v = vec![Complex64::new(0.0, 0.0); d];
                        g.sample_into(&mut v, &mut rng);
                        v
                    })
                    .collect()
            }
        };
        orthonormalize(&mut rows)?;
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalProbe {
    pub d_p: usize,
    pub n: usize,
    pub n_samples: usize,
    pub bin_width: f64,
    /// Largest histogram density estimate.
    pub estimate: f64,
    pub bound: f64,
    /// `estimate ≤ bound · (1 + 0.2)`.
    pub pass: bool,
}

/// Relative slack allowed for histogram estimation noise.
pub const MARGINAL_TOLERANCE: f64 = 0.2;
/// Expected count in a bin at the density bound.
const TARGET_BIN_COUNT: f64 = 2000.0;

/// Histogram estimate of the sup of the density of the projection of `η`
/// onto `V` (identified with `ℂⁿ = ℝ^{2n}`).
pub fn marginal_density_probe(ensemble: &Ensemble, d_p: usize, subspace: &Subspace, n_samples: usize, seed: &SeedSpec) -> Result<MarginalProbe> {
    if d_p == 0 || d_p > 4 {
        return Err(Error::Precondition(format!("marginal probe supports 1 ≤ d_p ≤ 4, got {d_p}")));
    }
    let rows = subspace.resolve(d_p, seed)?;
    let n = rows.len();
    if n == 0 || n > 2 {
        return Err(Error::Precondition(format!("marginal probe supports 1 ≤ n ≤ 2, got {n}")));
    }
    let bound = marginal_bound(d_p, n, ensemble.m0)?;
    let dim = 2 * n;
    let cell = TARGET_BIN_COUNT / (n_samples as f64 * bound);
    let h = cell.powf(1.0 / dim as f64);
    // a meaningful estimate needs many bins across the bulk of the law
    let spread = ensemble.variance(d_p).sqrt();
    if n_samples < 10_000 || h > spread {
        return Err(Error::Precondition(format!(
            "{n_samples} samples are too few for a histogram in dimension {dim} (bin width {h:.3} vs spread {spread:.3})"
        )));
    }
    let mut counts: HashMap<[i64; 4], u64> = HashMap::new();
    let mut buf = vec![Complex64::new(0.0, 0.0); d_p];
    for i in 0..n_samples {
        let mut rng = seed.stream(StreamTag::Marginal, d_p as u32, i as u64);
        ensemble.sample_into(&mut buf, &mut rng);
        let mut key = [0i64; 4];
        for (a, row) in rows.iter().enumerate() {
            let proj: Complex64 = buf.iter().zip(row).map(|(x, y)| x * y.conj()).sum();
            key[2 * a] = (proj.re / h).floor() as i64;
            key[2 * a + 1] = (proj.im / h).floor() as i64;
        }
        *counts.entry(key).or_insert(0) += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    let estimate = max as f64 / (n_samples as f64 * cell);
    Ok(MarginalProbe { d_p, n, n_samples, bin_width: h, estimate, bound, pass: estimate <= bound * (1.0 + MARGINAL_TOLERANCE) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants() {
        let g = Ensemble::gaussian(2.0).unwrap();
        assert!((g.m0 - 1.0 / (4.0 * PI)).abs() < 1e-15);
        assert_eq!(g.c0, 4.0);
        let u = Ensemble::uniform_disk(RadiusRule::Constant { value: 1.0 }).unwrap();
        assert!((u.m0 - 1.0 / PI).abs() < 1e-15);
        assert!(Ensemble::gaussian(0.0).is_err());
        assert!(Ensemble::uniform_disk(RadiusRule::Constant { value: -1.0 }).is_err());
    }

    #[test]
    fn validator_enforces_radius_rule() {
        let u = Ensemble::uniform_disk(RadiusRule::Constant { value: 5.0 }).unwrap();
        assert!(u.validate(&[3]).is_err());
        assert!(u.validate(&[5, 9]).is_ok());
        let m = Ensemble::uniform_disk(RadiusRule::MinDp { value: 5.0 }).unwrap();
        assert!(m.validate(&[1, 2, 3, 10]).is_ok());
        assert!(Ensemble::gaussian(1.0).unwrap().validate(&[1, 10, 100]).is_ok());
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let s = SeedSpec::new(42);
        let g = Ensemble::gaussian(1.0).unwrap();
        let a = sample_coefficients(&g, 8, &s, 5, 17);
        assert_eq!(a, sample_coefficients(&g, 8, &s, 5, 17));
        assert_ne!(a, sample_coefficients(&g, 8, &s, 5, 18));
        assert_ne!(a, sample_coefficients(&g, 8, &s, 6, 17));
        assert_ne!(a, sample_coefficients(&g, 8, &SeedSpec::new(43), 5, 17));
    }

    #[test]
    fn uniform_support() {
        let u = Ensemble::uniform_disk(RadiusRule::Constant { value: 1.0 }).unwrap();
        let s = SeedSpec::new(1);
        for t in 0..200 {
            assert!(sample_coefficients(&u, 10, &s, 3, t).iter().all(|c| c.norm() <= 1.0));
        }
    }

    #[test]
    fn marginal_bound_examples() {
        assert!((marginal_bound(3, 1, 1.0 / PI).unwrap() - 3.0 / PI).abs() < 1e-15);
        assert_eq!(marginal_bound(7, 0, 3.3).unwrap(), 1.0);
        assert_eq!(marginal_bound(5, 5, 2.0).unwrap(), 32.0);
        assert!(marginal_bound(3, 4, 1.0).is_err());
        let big = marginal_bound(100, 3, 1.0).unwrap();
        assert!((big - 161_700.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_second_moment() {
        let g = Ensemble::gaussian(1.0).unwrap();
        let r = moment_report(&g, 4, 20_000, &SeedSpec::new(9)).unwrap();
        assert!(r.second.z_score.unwrap() < 4.0);
        assert!(r.norm_identity_ok && r.variance_bound_ok && r.moment_bound_ok);
        assert!(r.norm_d.z_score.unwrap() < 4.0);
    }

    #[test]
    fn probe_rejects_small_samples() {
        let g = Ensemble::gaussian(1.0).unwrap();
        let r = marginal_density_probe(&g, 2, &Subspace::Axes { axes: vec![0] }, 500, &SeedSpec::new(1));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn accumulator_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() + 1e8).collect();
        let mut a = Accumulator::default();
        xs.iter().for_each(|&x| a.push(x));
        let mut b = Accumulator::default();
        let mut c = Accumulator::default();
        xs[..400].iter().for_each(|&x| b.push(x));
        xs[400..].iter().for_each(|&x| c.push(x));
        b.merge(&c);
        assert!((a.mean() - b.mean()).abs() < 1e-7);
        assert_eq!(a.count(), b.count());
    }
}
