//! Dense complex polynomials: evaluation with error bounds and simultaneous
//! root finding.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 200;
/// Relative backward error accepted for a refined root.
pub const ROOT_TOLERANCE: f64 = 1e-10;

/// Newton correction `p(z)/p'(z)` together with the relative backward error
/// `|p(z)| / Σ |a_k| |z|^k`. Uses the reversed polynomial for `|z| > 1` so
/// that high degrees do not overflow.
pub fn newton_correction(a: &[Complex64], z: Complex64) -> (Complex64, f64) {
    let n = a.len() - 1;
    if z.norm() <= 1.0 {
        let mut p = a[n];
        let mut dp = Complex64::new(0.0, 0.0);
        let mut e = a[n].norm();
        let r = z.norm();
        for k in (0..n).rev() {
            dp = dp * z + p;
            p = p * z + a[k];
            e = e * r + a[k].norm();
        }
        (p / dp, p.norm() / e)
    } else {
        let y = 1.0 / z;
        let r = y.norm();
        let mut q = a[0];
        let mut dq = Complex64::new(0.0, 0.0);
        let mut e = a[0].norm();
        for k in 1..=n {
            dq = dq * y + q;
            q = q * y + a[k];
            e = e * r + a[k].norm();
        }
        (z * q / (q * n as f64 - y * dq), q.norm() / e)
    }
}

/// `(p(z), p'(z))` scaled by a common positive factor, which leaves `p'/p`
/// and the zero set unchanged.
pub fn eval_scaled(a: &[Complex64], z: Complex64) -> (Complex64, Complex64) {
    let n = a.len() - 1;
    if z.norm() <= 1.0 {
        let mut p = a[n];
        let mut dp = Complex64::new(0.0, 0.0);
        for k in (0..n).rev() {
            dp = dp * z + p;
            p = p * z + a[k];
        }
        (p, dp)
    } else {
        // p(z) = z^n q(1/z); divide both values by |z|^n
        let y = 1.0 / z;
        let mut q = a[0];
        let mut dq = Complex64::new(0.0, 0.0);
        for k in 1..=n {
            dq = dq * y + q;
            q = q * y + a[k];
        }
        let phase = z / z.norm();
        let ph_n = phase.powu(n as u32);
        let p = ph_n * q;
        let dp = ph_n / z * (q * n as f64 - y * dq);
        (p, dp)
    }
}

/// Starting points on circles read off the upper convex hull of
/// `(k, ln |a_k|)`.
fn initial_guesses(a: &[Complex64]) -> Vec<Complex64> {
    let pts: Vec<(f64, f64)> = a
        .iter()
        .enumerate()
        .filter(|(_, c)| c.norm() > 0.0)
        .map(|(k, c)| (k as f64, c.norm().ln()))
        .collect();
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &pt in &pts {
        while hull.len() >= 2 {
            let (x1, y1) = hull[hull.len() - 2];
            let (x2, y2) = hull[hull.len() - 1];
            // drop the middle point unless it lies strictly above the chord
            if (x2 - x1) * (pt.1 - y1) - (y2 - y1) * (pt.0 - x1) >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(pt);
    }
    let mut z = Vec::with_capacity(a.len() - 1);
    for (e, w) in hull.windows(2).enumerate() {
        let m = (w[1].0 - w[0].0) as usize;
        let radius = ((w[0].1 - w[1].1) / m as f64).exp();
        let offset = 0.7 + 1.3 * e as f64;
        for j in 0..m {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / m as f64 + offset / m as f64;
            z.push(Complex64::from_polar(radius, theta));
        }
    }
    z
}

fn aberth(a: &[Complex64], z: &mut [Complex64], max_iter: usize) -> bool {
    let n = z.len();
    let mut done = vec![false; n];
    for _ in 0..max_iter {
        let mut all = true;
        for i in 0..n {
            if done[i] {
                continue;
            }
            let (ratio, backward) = newton_correction(a, z[i]);
            if backward <= 4.0 * n as f64 * f64::EPSILON || !ratio.is_finite() {
                done[i] = ratio.is_finite() || backward.is_finite();
                continue;
            }
            all = false;
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..n {
                if j != i {
                    s += 1.0 / (z[i] - z[j]);
                }
            }
            let w = ratio / (1.0 - ratio * s);
            if w.is_finite() {
                z[i] -= w;
            } else {
                z[i] -= ratio;
            }
        }
        if all {
            return true;
        }
    }
    done.iter().all(|&d| d)
}

fn companion_roots(a: &[Complex64]) -> Option<Vec<Complex64>> {
    let n = a.len() - 1;
    let lead = a[n];
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for i in 1..n {
        m[(i, i - 1)] = Complex64::new(1.0, 0.0);
    }
    for i in 0..n {
        m[(i, n - 1)] = -a[i] / lead;
    }
    let schur = nalgebra::linalg::Schur::try_new(m, f64::EPSILON, 10_000)?;
    let ev = schur.eigenvalues()?;
    Some(ev.iter().copied().collect())
}

fn polish(a: &[Complex64], z: &mut [Complex64]) {
    for zi in z.iter_mut() {
        for _ in 0..3 {
            let (ratio, be) = newton_correction(a, *zi);
            if !ratio.is_finite() || be == 0.0 {
                break;
            }
            let cand = *zi - ratio;
            let (_, be2) = newton_correction(a, cand);
            if be2 < be {
                *zi = cand;
            } else {
                break;
            }
        }
    }
}

/// All roots of `Σ a_k z^k` (with `a_0 ≠ 0`, `a_n ≠ 0`) and the worst
/// relative backward error.
pub fn roots(a: &[Complex64]) -> Result<(Vec<Complex64>, f64)> {
    let n = a.len().saturating_sub(1);
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if a[0].norm() == 0.0 || a[n].norm() == 0.0 {
        return Err(Error::Precondition("strip zero end coefficients before root finding".into()));
    }
    if n == 1 {
        let z = -a[0] / a[1];
        return Ok((vec![z], newton_correction(a, z).1));
    }
    let mut z = initial_guesses(a);
    let ok = aberth(a, &mut z, MAX_ITERATIONS);
    let worst = |z: &[Complex64]| z.iter().map(|&x| newton_correction(a, x).1).fold(0.0, f64::max);
    if !ok || z.iter().any(|x| !x.is_finite()) {
        if let Some(mut c) = companion_roots(a) {
            aberth(a, &mut c, 20);
            z = c;
        }
    }
    polish(a, &mut z);
    let w = worst(&z);
    if !(w <= ROOT_TOLERANCE) || z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonConvergence { worst_residual: w });
    }
    Ok((z, w))
}

/// Group roots closer than `1e-7 · max(1, |z|)`; returns `(centroid, multiplicity)`.
pub fn cluster(z: &[Complex64], rel_radius: f64) -> Vec<(Complex64, u32)> {
    let n = z.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut j = i;
        while p[j] != r {
            let next = p[j];
            p[j] = r;
            j = next;
        }
        r
    }
    for i in 0..n {
        for j in 0..i {
            let tol = rel_radius * z[i].norm().max(z[j].norm()).max(1.0);
            if (z[i] - z[j]).norm() <= tol {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: Vec<(usize, Complex64, u32)> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        match groups.iter_mut().find(|g| g.0 == r) {
            Some(g) => {
                g.1 += z[i];
                g.2 += 1;
            }
            None => groups.push((r, z[i], 1)),
        }
    }
    groups.into_iter().map(|(_, s, m)| (s / m as f64, m)).collect()
}
