//! The martingale-coupling polytope of two discrete marginals.
//!
//! A coupling is an `l × m` matrix `p` on the product of the supports. It is a
//! martingale coupling of `(mu, nu)` when it is nonnegative, has row sums
//! `w_mu`, column sums `w_nu`, and every row satisfies
//! `Σ_j p_ij (y_j - x_i) = 0`. The equality constraints are stacked into one
//! linear system `A vec(p) = b` (row-major vectorization). Euclidean projection
//! onto the polytope uses Dykstra's alternating projections between the affine
//! set (closed form through a pseudo-inverse of `A Aᵀ`, factored once) and
//! the nonnegative orthant.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{convex_order_check, EmpiricalMeasure, CONVEX_ORDER_TOL};

pub const DYKSTRA_TOL: f64 = 1e-10;
pub const DYKSTRA_MAX_ITER: usize = 50_000;

/// Relative eigenvalue cutoff when pseudo-inverting `A Aᵀ`.
const RANK_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// Joint probabilities, rows indexed by `mu` atoms, columns by `nu` atoms.
    pub p: DMatrix<f64>,
    pub row_support: Vec<f64>,
    pub col_support: Vec<f64>,
}

impl Coupling {
    pub fn new(p: DMatrix<f64>, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Self> {
        if p.shape() != (mu.len(), nu.len()) {
            return Err(Error::Shape {
                expected: (mu.len(), nu.len()),
                got: p.shape(),
            });
        }
        if let Some(idx) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { idx, value: p[idx] });
        }
        Ok(Self {
            p,
            row_support: mu.atoms().to_vec(),
            col_support: nu.atoms().to_vec(),
        })
    }

    pub fn nrows(&self) -> usize {
        self.p.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.p.ncols()
    }

    /// Frobenius distance to another coupling of the same shape.
    pub fn distance(&self, other: &Coupling) -> f64 {
        (&self.p - &other.p).norm()
    }

    /// Writes the long CSV form `i,j,x,y,p`, one line per entry.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "j", "x", "y", "p"])?;
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                w.write_record(&[
                    i.to_string(),
                    j.to_string(),
                    format!("{:?}", self.row_support[i]),
                    format!("{:?}", self.col_support[j]),
                    format!("{:?}", self.p[(i, j)]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the long CSV form. Missing `(i, j)` entries are zero.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            i: usize,
            j: usize,
            x: f64,
            y: f64,
            p: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::Empty);
        }
        let l = rows.iter().map(|r| r.i).max().unwrap() + 1;
        let m = rows.iter().map(|r| r.j).max().unwrap() + 1;
        let mut xs = vec![f64::NAN; l];
        let mut ys = vec![f64::NAN; m];
        let mut p = DMatrix::zeros(l, m);
        for r in &rows {
            xs[r.i] = r.x;
            ys[r.j] = r.y;
            p[(r.i, r.j)] = r.p;
        }
        if xs.iter().chain(&ys).chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parse(
                "coupling CSV has missing or non-finite entries".into(),
            ));
        }
        Ok(Self {
            p,
            row_support: xs,
            col_support: ys,
        })
    }
}

/// Maximum constraint violations of a candidate coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingResiduals {
    /// `max(0, -min p_ij)`.
    pub negativity: f64,
    pub row_marginal: f64,
    pub col_marginal: f64,
    /// Largest conditional-mean gap `|Σ_j p_ij (y_j - x_i)| / w_mu_i`.
    pub martingale: f64,
}

impl CouplingResiduals {
    pub fn max(&self) -> f64 {
        self.negativity
            .max(self.row_marginal)
            .max(self.col_marginal)
            .max(self.martingale)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Product coupling `p_ij = w_mu_i · w_nu_j` (generally not a martingale).
pub fn independent_coupling(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Coupling {
    let p = DMatrix::from_fn(mu.len(), nu.len(), |i, j| mu.weights()[i] * nu.weights()[j]);
    Coupling {
        p,
        row_support: mu.atoms().to_vec(),
        col_support: nu.atoms().to_vec(),
    }
}

pub fn validate_coupling(
    p: &DMatrix<f64>,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<CouplingResiduals> {
    let (l, m) = (mu.len(), nu.len());
    if p.shape() != (l, m) {
        return Err(Error::Shape {
            expected: (l, m),
            got: p.shape(),
        });
    }
    let (xs, ys) = (mu.atoms(), nu.atoms());
    let mut res = CouplingResiduals {
        negativity: (-p.min()).max(0.0),
        row_marginal: 0.0,
        col_marginal: 0.0,
        martingale: 0.0,
    };
    for (i, (&x, &w)) in xs.iter().zip(mu.weights()).enumerate() {
        let row = p.row(i);
        res.row_marginal = res.row_marginal.max((row.sum() - w).abs());
        let drift: f64 = row.iter().zip(ys).map(|(p, y)| p * (y - x)).sum();
        res.martingale = res.martingale.max(drift.abs() / w);
    }
    for j in 0..m {
        res.col_marginal = res
            .col_marginal
            .max((p.column(j).sum() - nu.weights()[j]).abs());
    }
    Ok(res)
}

/// Outcome of one Dykstra projection.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coupling: Coupling,
    pub sweeps: usize,
    /// Frobenius norm of the last iterate change.
    pub last_step: f64,
    /// Euclidean norm of the (scaled) equality residual at the output.
    pub equality_residual: f64,
}

/// Prefactored Euclidean projector onto the martingale-coupling polytope of
/// a fixed pair of marginals. Immutable once built.
#[derive(Debug, Clone)]
pub struct MartingaleProjector {
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    /// Martingale-row scaling `1 / (1 + |x_i| + max_j |y_j|)`.
    scale: Vec<f64>,
    /// Right-hand side: `w_mu`, `w_nu`, zeros.
    rhs: DVector<f64>,
    /// Pseudo-inverse of `A Aᵀ`.
    gram_pinv: DMatrix<f64>,
    rank: usize,
}

impl MartingaleProjector {
    pub fn new(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Self> {
        let report = convex_order_check(mu, nu, CONVEX_ORDER_TOL);
        if !report.ordered {
            return Err(Error::NotConvexOrder {
                min_q: report.min_q,
                q_at_1: report.q_at_1,
            });
        }
        let (l, m) = (mu.len(), nu.len());
        let ymax = nu.atoms().iter().fold(0.0_f64, |a, y| a.max(y.abs()));
        let scale: Vec<f64> = mu
            .atoms()
            .iter()
            .map(|x| 1.0 / (1.0 + x.abs() + ymax))
            .collect();

        let k = 2 * l + m;
        let mut a = DMatrix::<f64>::zeros(k, l * m);
        for i in 0..l {
            for j in 0..m {
                let c = i * m + j;
                a[(i, c)] = 1.0;
                a[(l + j, c)] = 1.0;
                a[(l + m + i, c)] = scale[i] * (nu.atoms()[j] - mu.atoms()[i]);
            }
        }
        let gram = &a * a.transpose();
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let mut inv_diag = DVector::zeros(k);
        let mut rank = 0;
        for (d, &ev) in inv_diag.iter_mut().zip(eig.eigenvalues.iter()) {
            if ev > RANK_TOL * top {
                *d = 1.0 / ev;
                rank += 1;
            }
        }
        let v = &eig.eigenvectors;
        let gram_pinv = v * DMatrix::from_diagonal(&inv_diag) * v.transpose();

        let mut rhs = DVector::zeros(k);
        rhs.rows_mut(0, l).copy_from_slice(mu.weights());
        rhs.rows_mut(l, m).copy_from_slice(nu.weights());

        Ok(Self {
            mu: mu.clone(),
            nu: nu.clone(),
            scale,
            rhs,
            gram_pinv,
            rank,
        })
    }

    pub fn mu(&self) -> &EmpiricalMeasure {
        &self.mu
    }

    pub fn nu(&self) -> &EmpiricalMeasure {
        &self.nu
    }

    /// Dimension of the affine hull of the polytope, `l·m - rank(A)`.
    pub fn dimension(&self) -> usize {
        self.mu.len() * self.nu.len() - self.rank
    }

    pub fn constraint_rank(&self) -> usize {
        self.rank
    }

    fn apply_a(&self, p: &DMatrix<f64>) -> DVector<f64> {
        let (l, m) = p.shape();
        let (xs, ys) = (self.mu.atoms(), self.nu.atoms());
        let mut out = DVector::zeros(2 * l + m);
        for i in 0..l {
            let mut rs = 0.0;
            let mut drift = 0.0;
            for j in 0..m {
                let v = p[(i, j)];
                rs += v;
                drift += v * (ys[j] - xs[i]);
                out[l + j] += v;
            }
            out[i] = rs;
            out[l + m + i] = self.scale[i] * drift;
        }
        out
    }

    fn apply_at(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        let (l, m) = (self.mu.len(), self.nu.len());
        let (xs, ys) = (self.mu.atoms(), self.nu.atoms());
        DMatrix::from_fn(l, m, |i, j| {
            lambda[i] + lambda[l + j] + lambda[l + m + i] * self.scale[i] * (ys[j] - xs[i])
        })
    }

    pub fn equality_residual(&self, p: &DMatrix<f64>) -> f64 {
        (self.apply_a(p) - &self.rhs).norm()
    }

    /// Closed-form projection onto the affine set `{A vec(p) = b}`.
    pub fn project_affine(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.apply_a(p) - &self.rhs;
        p - self.apply_at(&(&self.gram_pinv * r))
    }

    /// Orthogonal projection onto the null space of the equality constraints.
    pub fn project_tangent(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.apply_a(d);
        d - self.apply_at(&(&self.gram_pinv * r))
    }

    /// Dykstra's alternating projections onto the affine set and the
    /// nonnegative orthant. Stops once successive orthant iterates differ by
    /// less than `tol` in Frobenius norm and the orthant iterate meets the
    /// (scaled) equality constraints to `tol`. The orthant iterate can stall
    /// for a sweep while the affine correction is still moving, so the step
    /// test alone is not enough.
    pub fn project(&self, p: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<Projection> {
        let shape = (self.mu.len(), self.nu.len());
        if p.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                got: p.shape(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("projection input is not finite".into()));
        }
        let mut x = p.clone();
        let mut corr_affine = DMatrix::<f64>::zeros(shape.0, shape.1);
        let mut corr_orthant = DMatrix::<f64>::zeros(shape.0, shape.1);
        let mut last_step = f64::INFINITY;
        for sweep in 1..=max_iter {
            let shifted = &x + &corr_affine;
            let y = self.project_affine(&shifted);
            corr_affine = shifted - &y;

            let shifted = &y + &corr_orthant;
            let x_new = shifted.map(|v| v.max(0.0));
            corr_orthant = shifted - &x_new;

            last_step = (&x_new - &x).norm();
            x = x_new;
            if last_step < tol && self.equality_residual(&x) < tol {
                let equality_residual = self.equality_residual(&x);
                return Ok(Projection {
                    coupling: Coupling {
                        p: x,
                        row_support: self.mu.atoms().to_vec(),
                        col_support: self.nu.atoms().to_vec(),
                    },
                    sweeps: sweep,
                    last_step,
                    equality_residual,
                });
            }
        }
        Err(Error::ProjectionStalled {
            iterations: max_iter,
            step: last_step,
            residual: self.equality_residual(&x),
        })
    }

    pub fn project_default(&self, p: &DMatrix<f64>) -> Result<Coupling> {
        Ok(self.project(p, DYKSTRA_TOL, DYKSTRA_MAX_ITER)?.coupling)
    }

    /// Projection of the independent coupling; the solver's starting point.
    pub fn anchor(&self) -> Result<Coupling> {
        self.project_default(&independent_coupling(&self.mu, &self.nu).p)
    }

    /// Upper bound on the polytope diameter: `‖π1 - π2‖² <= ‖π1‖² + ‖π2‖²`
    /// for nonnegative matrices and `‖π‖² <= max_ij π_ij <= min(max w_mu, max w_nu)`.
    pub fn diameter_bound(&self) -> f64 {
        (2.0 * self.mu.max_weight().min(self.nu.max_weight())).sqrt()
    }

    /// A random feasible coupling: the anchor displaced along a random tangent
    /// direction of random length up to the diameter bound, then projected.
    pub fn sample_feasible<R: Rng + ?Sized>(
        &self,
        anchor: &Coupling,
        rng: &mut R,
    ) -> Result<Coupling> {
        let (l, m) = (self.mu.len(), self.nu.len());
        if self.dimension() == 0 {
            return Ok(anchor.clone());
        }
        let raw = DMatrix::from_fn(l, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dir = self.project_tangent(&raw);
        let norm = dir.norm();
        if norm == 0.0 {
            return Ok(anchor.clone());
        }
        let radius = self.diameter_bound() * rng.random::<f64>();
        self.project_default(&(&anchor.p + dir * (radius / norm)))
    }
}

pub fn project_to_martingale(
    p: &DMatrix<f64>,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    tol: f64,
    max_iter: usize,
) -> Result<Coupling> {
    Ok(MartingaleProjector::new(mu, nu)?
        .project(p, tol, max_iter)?
        .coupling)
}

/// A feasible point plus an orthonormal basis of the null space of the
/// equality constraints.
#[derive(Debug, Clone)]
pub struct PolytopeBasis {
    pub anchor: Coupling,
    pub directions: Vec<DMatrix<f64>>,
}

impl PolytopeBasis {
    pub fn dimension(&self) -> usize {
        self.directions.len()
    }

    /// `anchor + Σ c_k d_k` (may leave the orthant).
    pub fn point(&self, coords: &[f64]) -> DMatrix<f64> {
        let mut p = self.anchor.p.clone();
        for (c, d) in coords.iter().zip(&self.directions) {
            p += d * *c;
        }
        p
    }
}

/// Builds the basis by Gram–Schmidt over tangent projections of the unit
/// matrices. Cost is cubic in `l·m`; meant for small instances and oracles.
pub fn polytope_basis(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<PolytopeBasis> {
    let projector = MartingaleProjector::new(mu, nu)?;
    let anchor = projector.anchor()?;
    let (l, m) = (mu.len(), nu.len());
    let dim = projector.dimension();
    let mut directions: Vec<DMatrix<f64>> = Vec::with_capacity(dim);
    for c in 0..l * m {
        if directions.len() == dim {
            break;
        }
        let mut e = DMatrix::zeros(l, m);
        e[(c / m, c % m)] = 1.0;
        let mut v = projector.project_tangent(&e);
        for _ in 0..2 {
            for d in &directions {
                let dot = v.dot(d);
                v -= d * dot;
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            directions.push(v / n);
        }
    }
    Ok(PolytopeBasis { anchor, directions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn sym(a: f64) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(vec![-a, a]).unwrap()
    }

    #[test]
    fn independent_examples() {
        let c = independent_coupling(&sym(1.0), &sym(1.0));
        assert!(c.p.iter().all(|&v| v == 0.25));
        let c = independent_coupling(&EmpiricalMeasure::dirac(0.0).unwrap(), &sym(2.0));
        assert_eq!(c.p, dmatrix![0.5, 0.5]);
        let nu3 = EmpiricalMeasure::uniform(vec![0.0, 1.0, 2.0]).unwrap();
        let c = independent_coupling(&sym(1.0), &nu3);
        assert!(c.p.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-16));
    }

    #[test]
    fn forced_two_by_two() {
        let want = dmatrix![0.375, 0.125; 0.125, 0.375];
        for start in [
            dmatrix![0.25, 0.25; 0.25, 0.25],
            dmatrix![1.0, -3.0; 0.0, 2.0],
            DMatrix::zeros(2, 2),
        ] {
            let c = project_to_martingale(&start, &sym(1.0), &sym(2.0), 1e-12, 10_000).unwrap();
            assert_abs_diff_eq!((&c.p - &want).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_row_forced() {
        let d0 = EmpiricalMeasure::dirac(0.0).unwrap();
        let c = project_to_martingale(&dmatrix![0.9, 0.1], &d0, &sym(1.0), 1e-12, 10_000).unwrap();
        assert_abs_diff_eq!(c.p[(0, 0)], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(c.p[(0, 1)], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn feasible_point_is_fixed() {
        let p = dmatrix![0.375, 0.125; 0.125, 0.375];
        let c = project_to_martingale(&p, &sym(1.0), &sym(2.0), 1e-12, 100).unwrap();
        assert_abs_diff_eq!((&c.p - &p).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn residual_examples() {
        let mu = EmpiricalMeasure::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(mu.weights()));
        let r = validate_coupling(&diag, &mu, &mu).unwrap();
        assert_eq!(r.max(), 0.0);

        let ind = independent_coupling(&sym(1.0), &sym(2.0));
        let r = validate_coupling(&ind.p, &sym(1.0), &sym(2.0)).unwrap();
        assert_abs_diff_eq!(r.martingale, 1.0);
        assert_eq!(r.row_marginal, 0.0);
        assert_eq!(r.col_marginal, 0.0);

        let r =
            validate_coupling(&dmatrix![0.375, 0.125; 0.125, 0.375], &sym(1.0), &sym(2.0)).unwrap();
        assert_eq!(r.max(), 0.0);

        assert!(validate_coupling(&DMatrix::zeros(3, 3), &sym(1.0), &sym(2.0)).is_err());
    }

    #[test]
    fn infeasible_pair_rejected() {
        assert!(matches!(
            MartingaleProjector::new(&sym(2.0), &sym(1.0)),
            Err(Error::NotConvexOrder { .. })
        ));
    }

    #[test]
    fn stall_is_reported() {
        let mu = sym(1.0);
        let nu = EmpiricalMeasure::uniform(vec![-3.0, -1.0, 1.0, 3.0]).unwrap();
        let proj = MartingaleProjector::new(&mu, &nu).unwrap();
        let far = DMatrix::from_fn(2, 4, |i, j| if (i + j) % 2 == 0 { 5.0 } else { -5.0 });
        assert!(matches!(
            proj.project(&far, 1e-14, 2),
            Err(Error::ProjectionStalled { iterations: 2, .. })
        ));
    }

    #[test]
    fn basis_dimensions() {
        let b = polytope_basis(&sym(1.0), &sym(2.0)).unwrap();
        assert_eq!(b.dimension(), 0);

        let nu4 = EmpiricalMeasure::uniform(vec![-3.0, -1.0, 1.0, 3.0]).unwrap();
        let b = polytope_basis(&sym(1.0), &nu4).unwrap();
        assert_eq!(b.dimension(), 2);

        let nu3 = EmpiricalMeasure::uniform(vec![-2.0, 0.0, 2.0]).unwrap();
        let b = polytope_basis(&sym(1.0), &nu3).unwrap();
        assert_eq!(b.dimension(), 1);

        let d0 = EmpiricalMeasure::dirac(0.0).unwrap();
        let nu =
            EmpiricalMeasure::new(vec![-1.0, 0.0, 0.5, 2.0], vec![0.2, 0.3, 0.3, 0.2]).unwrap();
        let nu = nu.shifted(-nu.mean());
        let b = polytope_basis(&d0, &nu).unwrap();
        assert_eq!(b.dimension(), 0);
        assert_abs_diff_eq!(
            (b.anchor.p.row(0).transpose() - DVector::from_column_slice(nu.weights())).norm(),
            0.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn basis_directions_are_orthonormal_null_vectors() {
        let mu = EmpiricalMeasure::uniform(vec![-1.0, 0.0, 1.0]).unwrap();
        let nu = EmpiricalMeasure::uniform(vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let proj = MartingaleProjector::new(&mu, &nu).unwrap();
        let b = polytope_basis(&mu, &nu).unwrap();
        assert_eq!(b.dimension(), 2 * 3);
        for (k, d) in b.directions.iter().enumerate() {
            assert!(proj.apply_a(d).norm() < 1e-12);
            for (k2, d2) in b.directions.iter().enumerate() {
                let want = if k == k2 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(d.dot(d2), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let c = Coupling::new(dmatrix![0.375, 0.125; 0.125, 0.375], &sym(1.0), &sym(2.0)).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,j,x,y,p\n0,0,-1.0,-2.0,0.375\n"));
        let back = Coupling::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert!(Coupling::read_csv("i,j,x,y,p\n".as_bytes()).is_err());
        assert!(Coupling::read_csv("i,j,x,y,p\n1,1,0,0,0.5\n".as_bytes()).is_err());
    }
}
