//! Shared helpers for integration tests: random martingale instances and an
//! independently assembled constraint system.

#![allow(dead_code)]

use ibmot::coupling::Coupling;
use ibmot::measures::EmpiricalMeasure;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// A random martingale coupling with strictly positive entries. Columns are
/// sorted random atoms; each row mixes a random Dirichlet-like law with a
/// two-point law on the extreme atoms so that its mean equals the row atom.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    l: usize,
    m: usize,
) -> (EmpiricalMeasure, EmpiricalMeasure, Coupling) {
    loop {
        let mut ys: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        ys.sort_by(|a, b| a.total_cmp(b));
        if ys.windows(2).any(|w| w[1] - w[0] < 0.15) {
            continue;
        }
        let (lo, hi) = (ys[0], ys[m - 1]);
        let mut xs: Vec<f64> = (0..l)
            .map(|_| lo + (hi - lo) * rng.random_range(0.3..0.7))
            .collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        if xs.windows(2).any(|w| w[1] - w[0] < 0.05) {
            continue;
        }
        let row_mass: Vec<f64> = (0..l).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = row_mass.iter().sum();
        let mut p = DMatrix::zeros(l, m);
        for i in 0..l {
            let q: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
            let qs: f64 = q.iter().sum();
            let q: Vec<f64> = q.iter().map(|v| v / qs).collect();
            let mean_q: f64 = q.iter().zip(&ys).map(|(a, b)| a * b).sum();
            let mut lam = 0.6;
            let z = loop {
                let z = (xs[i] - lam * mean_q) / (1.0 - lam);
                if z > lo && z < hi {
                    break z;
                }
                lam *= 0.5;
            };
            let r_hi = (z - lo) / (hi - lo);
            for j in 0..m {
                let mut v = lam * q[j];
                if j == 0 {
                    v += (1.0 - lam) * (1.0 - r_hi);
                }
                if j == m - 1 {
                    v += (1.0 - lam) * r_hi;
                }
                p[(i, j)] = v * row_mass[i] / total;
            }
        }
        let mu = EmpiricalMeasure::new(xs, p.column_sum().iter().cloned().collect()).unwrap();
        let nu = EmpiricalMeasure::new(ys, p.row_sum().iter().cloned().collect()).unwrap();
        let c = Coupling::new(p, &mu, &nu).unwrap();
        return (mu, nu, c);
    }
}

/// Equality constraints `A vec(P) = b` (row-major `vec`): row marginals,
/// column marginals, and row-wise martingale conditions.
pub fn constraints(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> (DMatrix<f64>, DVector<f64>) {
    let (l, m) = (mu.len(), nu.len());
    let mut a = DMatrix::zeros(2 * l + m, l * m);
    let mut b = DVector::zeros(2 * l + m);
    for i in 0..l {
        for j in 0..m {
            a[(i, i * m + j)] = 1.0;
            a[(l + j, i * m + j)] = 1.0;
            a[(l + m + i, i * m + j)] = nu.atoms()[j] - mu.atoms()[i];
        }
        b[i] = mu.weights()[i];
    }
    for j in 0..m {
        b[l + j] = nu.weights()[j];
    }
    (a, b)
}

/// Least-distance point to `p` on `{C x = d}` via the SVD pseudo-inverse.
pub fn affine_project(c: &DMatrix<f64>, d: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
    let gram = c * c.transpose();
    let pinv = gram.pseudo_inverse(1e-12).expect("svd converges");
    p - c.transpose() * (pinv * (c * p - d))
}

/// Restricts `(A, b)` to `x_k = 0` for every `k` in `zeros`.
pub fn with_zeros(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    zeros: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.ncols();
    let mut c = DMatrix::zeros(a.nrows() + zeros.len(), n);
    c.rows_mut(0, a.nrows()).copy_from(a);
    let mut d = DVector::zeros(a.nrows() + zeros.len());
    d.rows_mut(0, a.nrows()).copy_from(b);
    for (r, &k) in zeros.iter().enumerate() {
        c[(a.nrows() + r, k)] = 1.0;
    }
    (c, d)
}

/// Exact Euclidean projection onto the polytope by enumerating zero sets:
/// the projection is the closest feasible point among the affine projections
/// onto every face.
pub fn qp_projection(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (l, m) = (mu.len(), nu.len());
    let n = l * m;
    assert!(n <= 16, "enumeration oracle is for small instances");
    let (a, b) = constraints(mu, nu);
    let x0 = DVector::from_iterator(n, p.transpose().iter().cloned());
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << n) {
        let zeros: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
        let (c, d) = with_zeros(&a, &b, &zeros);
        let x = affine_project(&c, &d, &x0);
        if (&c * &x - &d).amax() > 1e-10 || x.min() < -1e-12 {
            continue;
        }
        let dist = (&x - &x0).norm();
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((dist, x));
        }
    }
    let x = best.expect("polytope is nonempty").1;
    DMatrix::from_row_slice(l, m, x.as_slice())
}

/// All vertices of the polytope (basic feasible solutions).
pub fn vertices(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<DVector<f64>> {
    let n = mu.len() * nu.len();
    let (a, b) = constraints(mu, nu);
    let mut out: Vec<DVector<f64>> = Vec::new();
    for mask in 0u32..(1 << n) {
        let zeros: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
        let (c, d) = with_zeros(&a, &b, &zeros);
        if c.clone().svd(false, false).rank(1e-10) < n {
            continue;
        }
        let x = affine_project(&c, &d, &DVector::zeros(n));
        if (&c * &x - &d).amax() > 1e-10 || x.min() < -1e-12 {
            continue;
        }
        if out.iter().all(|v| (v - &x).norm() > 1e-9) {
            out.push(x);
        }
    }
    out
}

pub fn sym(a: f64) -> EmpiricalMeasure {
    EmpiricalMeasure::uniform(vec![-a, a]).unwrap()
}
