//! One-dimensional adaptive quadrature.
//!
//! Globally adaptive Gauss–Kronrod (7/15) with the interval of largest error
//! bisected first, plus the variable maps used for semi-infinite and
//! doubly-infinite ranges. Periodic integrands over a full period use the
//! trapezoid rule with doubling, which converges geometrically for analytic
//! integrands.

use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.000_000_000_000_000_000_000_000_000_000_000,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Values that can be integrated: reals and complex numbers.
pub trait QuadValue:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
    fn zero() -> Self;
    fn magnitude(&self) -> f64;
    fn is_finite_value(&self) -> bool;
}

impl QuadValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl QuadValue for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
    fn is_finite_value(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            abs_tol: 1e-13,
            rel_tol: 1e-11,
            max_subdivisions: 2000,
        }
    }
}

impl QuadOptions {
    pub fn with_tolerances(abs_tol: f64, rel_tol: f64) -> Self {
        QuadOptions {
            abs_tol,
            rel_tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult<T> {
    pub value: T,
    pub error: f64,
    pub evaluations: usize,
}

struct Panel<T> {
    a: f64,
    b: f64,
    value: T,
    error: f64,
}

impl<T> PartialEq for Panel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<T> Eq for Panel<T> {}
impl<T> PartialOrd for Panel<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Panel<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<T: QuadValue, F: FnMut(f64) -> T>(f: &mut F, a: f64, b: f64) -> (T, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod = kronrod + s * WGK[j];
        if j % 2 == 1 {
            gauss = gauss + s * WG[j / 2];
        }
    }
    let k = kronrod * h;
    let g = gauss * h;
    (k, (k - g).magnitude())
}

/// Integrate `f` over `[a, b]` with the given interior break points as the
/// initial partition (singular points of the integrand belong there).
pub fn integrate_with_breaks<T, F>(
    mut f: F,
    breaks: &[f64],
    opts: QuadOptions,
) -> Result<QuadResult<T>>
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    if breaks.len() < 2 {
        return Err(Error::Precondition("quadrature needs at least one interval".into()));
    }
    let mut heap = BinaryHeap::new();
    let mut total = T::zero();
    let mut total_err = 0.0;
    let mut evaluations = 0usize;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b == a {
            continue;
        }
        let (v, e) = gk15(&mut f, a, b);
        evaluations += 15;
        total = total + v;
        total_err += e;
        heap.push(Panel { a, b, value: v, error: e });
    }
    if !total.is_finite_value() {
        return Err(Error::Quadrature {
            what: "non-finite integrand value".into(),
            achieved: f64::INFINITY,
        });
    }
    let mut subdivisions = heap.len();
    // panels too narrow to split further keep their error
    let mut frozen_err = 0.0;
    let mut frozen_value = T::zero();
    loop {
        let target = opts.abs_tol.max(opts.rel_tol * total.magnitude());
        if total_err + frozen_err <= target {
            break;
        }
        let Some(worst) = heap.pop() else { break };
        let mid = 0.5 * (worst.a + worst.b);
        if (worst.b - worst.a).abs() <= 64.0 * f64::EPSILON * (worst.a.abs().max(worst.b.abs()).max(1e-300))
            || mid == worst.a
            || mid == worst.b
        {
            frozen_err += worst.error;
            frozen_value = frozen_value + worst.value;
            total_err -= worst.error;
            continue;
        }
        if subdivisions >= opts.max_subdivisions {
            heap.push(worst);
            return Err(Error::Quadrature {
                what: format!("subdivision limit {} reached", opts.max_subdivisions),
                achieved: total_err + frozen_err,
            });
        }
        let (v1, e1) = gk15(&mut f, worst.a, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.b);
        evaluations += 30;
        subdivisions += 1;
        total = total - worst.value + v1 + v2;
        total_err += e1 + e2 - worst.error;
        if !total.is_finite_value() {
            return Err(Error::Quadrature {
                what: "non-finite integrand value".into(),
                achieved: f64::INFINITY,
            });
        }
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
    }
    // recompute from panels to shed accumulated cancellation in the running sum
    let mut value = frozen_value;
    let mut error = frozen_err;
    for p in heap.iter() {
        value = value + p.value;
        error += p.error;
    }
    Ok(QuadResult { value, error, evaluations })
}

/// Integrate `f` over the finite interval `[a, b]`.
pub fn integrate<T, F>(f: F, a: f64, b: f64, opts: QuadOptions) -> Result<QuadResult<T>>
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    integrate_with_breaks(f, &[a, b], opts)
}

/// Integrate `f` over `[a, ∞)` through the map `x = a + t / (1 - t)`.
pub fn integrate_semi_infinite<T, F>(mut f: F, a: f64, opts: QuadOptions) -> Result<QuadResult<T>>
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    integrate(
        move |t: f64| {
            let s = 1.0 - t;
            let x = a + t / s;
            let v = f(x);
            if v.magnitude() == 0.0 {
                v
            } else {
                v * (1.0 / (s * s))
            }
        },
        0.0,
        1.0,
        opts,
    )
}

/// Integrate `f` over the whole real line through `x = t / (1 - t^2)`.
pub fn integrate_real_line<T, F>(mut f: F, opts: QuadOptions) -> Result<QuadResult<T>>
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    integrate_with_breaks(
        move |t: f64| {
            let s = 1.0 - t * t;
            let x = t / s;
            let v = f(x);
            if v.magnitude() == 0.0 {
                v
            } else {
                v * ((1.0 + t * t) / (s * s))
            }
        },
        &[-1.0, 0.0, 1.0],
        opts,
    )
}

/// Trapezoid rule with `n` equispaced nodes over one period `[0, 2π)`.
pub fn periodic_trapezoid<T, F>(mut f: F, n: usize) -> T
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    let h = 2.0 * PI / n as f64;
    let mut acc = T::zero();
    for j in 0..n {
        acc = acc + f(h * j as f64);
    }
    acc * h
}

/// Integrate a smooth `2π`-periodic function over one period, doubling the
/// trapezoid node count from `start` until two successive values agree.
pub fn integrate_periodic<T, F>(mut f: F, start: usize, tol: f64, max_nodes: usize) -> Result<QuadResult<T>>
where
    T: QuadValue,
    F: FnMut(f64) -> T,
{
    let mut n = start.max(4);
    let mut prev = periodic_trapezoid(&mut f, n);
    let mut evaluations = n;
    while n < max_nodes {
        // only the new midpoints need evaluating
        let h = 2.0 * PI / (2 * n) as f64;
        let mut mids = T::zero();
        for j in 0..n {
            mids = mids + f(h * (2 * j + 1) as f64);
        }
        evaluations += n;
        let next = prev * 0.5 + mids * h;
        let diff = (next - prev).magnitude();
        n *= 2;
        prev = next;
        if diff <= tol.max(tol * prev.magnitude()) {
            return Ok(QuadResult { value: prev, error: diff, evaluations });
        }
    }
    Err(Error::Quadrature {
        what: format!("periodic trapezoid did not settle within {max_nodes} nodes"),
        achieved: f64::NAN,
    })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// three-term recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}
