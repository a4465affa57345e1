//! Quadrature evaluation of the IB-MOT objective and its gradient.
//!
//! For a coupling `p` the objective is
//! `K(p) = ∫ w(t) S(p, t) dt` with
//! `S(p, t) = Σ_u Σ_q p_uq E_z[(y_q - M_t(x_u, g0 x_u + g1 y_q + sqrt(v) z))²]`.
//! Each row's contribution to `S` is homogeneous of degree one in the row and
//! the posterior mean is the pointwise minimizer of the squared error, so the
//! partial derivative in `p_uh` is the `(u, h)` inner integral itself. The
//! value and gradient therefore come out of one pass:
//! `K = Σ p_uh ∂K/∂p_uh`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::coupling::{validate_coupling, Coupling};
use crate::error::{Error, Result};
use crate::fam::{RapConfig, RowPosterior, LOG_PRUNE};
use crate::measures::EmpiricalMeasure;
use crate::quadrature::{gauss_hermite, NoiseRule, QuadratureSpec};

/// Constraint slack accepted by the functions that require a feasible
/// coupling.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct NodeDiagnostic {
    pub t: f64,
    pub quad_weight: f64,
    pub kernel: f64,
    pub inner_error: f64,
    pub inner_variance: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `∫ w(t) S(p, t) dt`.
    pub value: f64,
    /// Same integral with the conditional variance in place of the squared
    /// error.
    pub variance_form: f64,
    pub gradient: DMatrix<f64>,
    pub nodes: Vec<NodeDiagnostic>,
}

struct NodeTerms {
    /// `E_z[(y_q - M)²]` per `(u, q)`.
    err: DMatrix<f64>,
    /// `Σ_q p_uq E_z[Var]` per row.
    var: Vec<f64>,
}

fn check_input(p: &Coupling) -> Result<()> {
    if let Some(idx) = p.p.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            idx,
            value: p.p[idx],
        });
    }
    if p.p.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("coupling has negative entries".into()));
    }
    for u in 0..p.nrows() {
        if p.p.row(u).sum() <= 0.0 {
            return Err(Error::Domain(format!("row {u} has no mass")));
        }
    }
    Ok(())
}

fn node_terms(p: &Coupling, rap: &RapConfig, quad: &QuadratureSpec, t: f64) -> Result<NodeTerms> {
    let v = rap.variance(t);
    if !(v > 0.0) {
        return Err(Error::Numerical(format!("noise variance {v} at t = {t}")));
    }
    let c = rap.g1(t) / v.sqrt();
    let (l, m) = (p.nrows(), p.ncols());
    let mut err = DMatrix::zeros(l, m);
    let mut var = vec![0.0; l];
    let mut row = Vec::with_capacity(m);
    let mut err_row = vec![0.0; m];
    for u in 0..l {
        row.clear();
        row.extend(p.p.row(u).iter());
        err_row.iter_mut().for_each(|e| *e = 0.0);
        var[u] = match quad.noise {
            NoiseRule::Panels { width, cutoff, .. } => {
                panel_row(&row, &p.col_support, c, width, cutoff, quad, &mut err_row)
            }
            NoiseRule::Hermite { .. } => {
                hermite_row(&row, &p.col_support, c, quad, &mut err_row)
                    .ok_or_else(|| Error::Domain(format!("row {u} has no mass")))?
            }
        };
        for (q, e) in err_row.iter().enumerate() {
            err[(u, q)] = *e;
        }
    }
    Ok(NodeTerms { err, var })
}

/// Per-target Hermite rule: `E_z[(y_q - M(z + c y_q))²]` for every `q`;
/// returns `Σ_q p_q E_z[Var]`.
fn hermite_row(
    row: &[f64],
    ys: &[f64],
    c: f64,
    quad: &QuadratureSpec,
    err: &mut [f64],
) -> Option<f64> {
    let post = RowPosterior::new(row, ys, c)?;
    let mut var = 0.0;
    for (q, e) in err.iter_mut().enumerate() {
        let shift = c * ys[q];
        let (mut e_acc, mut v_acc) = (0.0, 0.0);
        for (z, wz) in quad.z.iter().zip(&quad.wz) {
            let (_, mean, m2) = post.moments(z + shift);
            let d = ys[q] - mean;
            e_acc += wz * d * d;
            v_acc += wz * (m2 - mean * mean).max(0.0);
        }
        *e = e_acc;
        var += row[q] * v_acc;
    }
    Some(var)
}

/// Shared-grid rule in the standardized observation `s`. With
/// `φ_j(s) = φ(s - c y_j)` the row integrands are
/// `err_h = ∫ φ_h(s) (y_h - M(s))² ds` and `∫ D(s) Var(s) ds` where
/// `D = Σ_j p_j φ_j`; at every node `Σ_h p_h φ_h (y_h - M)² = D Var`.
/// Returns the variance integral. Caller guarantees positive row mass.
fn panel_row(
    row: &[f64],
    ys: &[f64],
    c: f64,
    width: f64,
    cutoff: f64,
    quad: &QuadratureSpec,
    err: &mut [f64],
) -> f64 {
    let m = ys.len();
    let cy: Vec<f64> = ys.iter().map(|y| c * y).collect();
    let lnp: Vec<f64> = row
        .iter()
        .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let lnp_max = lnp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for &x in &cy {
        let (lo, hi) = (x - cutoff, x + cutoff);
        match intervals.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => intervals.push((lo, hi)),
        }
    }

    let mut var_acc = 0.0;
    for (lo, hi) in intervals {
        let panels = ((hi - lo) / width).ceil().max(1.0) as usize;
        let pw = (hi - lo) / panels as f64;
        for k in 0..panels {
            let mid = lo + (k as f64 + 0.5) * pw;
            for (x, wx) in quad.z.iter().zip(&quad.wz) {
                let s = mid + 0.5 * pw * x;
                let omega = 0.5 * pw * wx;

                // Posterior over atoms, scanning outward from s; atoms whose
                // best-case log-weight is PRUNE below the running top are cut.
                let k0 = cy.partition_point(|&v| v < s);
                let yref = ys[k0.min(m - 1)];
                let mut acc = LogAccumulator::new();
                for h in k0..m {
                    let q = -0.5 * (s - cy[h]).powi(2);
                    if q + lnp_max < acc.top - LOG_PRUNE {
                        break;
                    }
                    acc.add(lnp[h] + q, ys[h] - yref);
                }
                for h in (0..k0).rev() {
                    let q = -0.5 * (s - cy[h]).powi(2);
                    if q + lnp_max < acc.top - LOG_PRUNE {
                        break;
                    }
                    acc.add(lnp[h] + q, ys[h] - yref);
                }
                let (lse, d1, d2) = acc.finish();
                let mean = yref + d1;
                let var = (d2 - d1 * d1).max(0.0);
                var_acc += omega * (lse - LN_SQRT_2PI).exp() * var;

                let a = cy.partition_point(|&v| v < s - cutoff);
                let b = cy.partition_point(|&v| v <= s + cutoff);
                for h in a..b {
                    let phi = (-0.5 * (s - cy[h]).powi(2) - LN_SQRT_2PI).exp();
                    let d = ys[h] - mean;
                    err[h] += omega * phi * d * d;
                }
            }
        }
    }
    var_acc
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Streaming log-sum-exp with first and second moments of an offset.
struct LogAccumulator {
    top: f64,
    z: f64,
    m1: f64,
    m2: f64,
}

impl LogAccumulator {
    fn new() -> Self {
        Self {
            top: f64::NEG_INFINITY,
            z: 0.0,
            m1: 0.0,
            m2: 0.0,
        }
    }

    #[inline]
    fn add(&mut self, e: f64, y: f64) {
        if e == f64::NEG_INFINITY {
            return;
        }
        if e > self.top {
            let r = (self.top - e).exp();
            self.z *= r;
            self.m1 *= r;
            self.m2 *= r;
            self.top = e;
        }
        let d = e - self.top;
        if d > -LOG_PRUNE {
            let w = d.exp();
            self.z += w;
            self.m1 += w * y;
            self.m2 += w * y * y;
        }
    }

    /// `(log Σ e^e, mean offset, second moment of offset)`.
    fn finish(&self) -> (f64, f64, f64) {
        (self.top + self.z.ln(), self.m1 / self.z, self.m2 / self.z)
    }
}

/// Value, variance form, gradient and per-node diagnostics in one pass.
/// Feasibility is not required; rows need nonnegative entries and positive
/// mass.
pub fn evaluate(p: &Coupling, rap: &RapConfig, quad: &QuadratureSpec) -> Result<Evaluation> {
    check_input(p)?;
    let per_node: Vec<Result<NodeTerms>> = quad
        .t
        .par_iter()
        .map(|&t| node_terms(p, rap, quad, t))
        .collect();

    let (l, m) = (p.nrows(), p.ncols());
    let mut gradient = DMatrix::zeros(l, m);
    let mut variance_form = 0.0;
    let mut nodes = Vec::with_capacity(quad.t.len());
    for ((terms, &t), &wt) in per_node.into_iter().zip(&quad.t).zip(&quad.wt) {
        let terms = terms?;
        let kernel = rap.weight_unchecked(t);
        if !(kernel.is_finite() && kernel > 0.0) {
            return Err(Error::Numerical(format!(
                "weight kernel is {kernel} at t = {t}"
            )));
        }
        let inner_error = p.p.dot(&terms.err);
        let inner_variance: f64 = terms.var.iter().sum();
        gradient += &terms.err * (wt * kernel);
        variance_form += wt * kernel * inner_variance;
        nodes.push(NodeDiagnostic {
            t,
            quad_weight: wt,
            kernel,
            inner_error,
            inner_variance,
        });
    }
    let value = p.p.dot(&gradient);
    if !value.is_finite() || !variance_form.is_finite() {
        return Err(Error::Numerical("objective is not finite".into()));
    }
    Ok(Evaluation {
        value,
        variance_form,
        gradient,
        nodes,
    })
}

/// `S(p, t)`: the expected squared filtering error at one interior time.
pub fn inner_error(p: &Coupling, rap: &RapConfig, t: f64, quad: &QuadratureSpec) -> Result<f64> {
    check_input(p)?;
    if !(t > rap.t0 && t < rap.t1) {
        return Err(Error::Domain(format!(
            "time {t} not inside ({}, {})",
            rap.t0, rap.t1
        )));
    }
    Ok(p.p.dot(&node_terms(p, rap, quad, t)?.err))
}

/// The objective without a feasibility check, as a plain function of the
/// matrix entries.
pub fn integrated_error(p: &Coupling, rap: &RapConfig, quad: &QuadratureSpec) -> Result<f64> {
    Ok(evaluate(p, rap, quad)?.value)
}

fn require_feasible(p: &Coupling, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    let res = validate_coupling(&p.p, mu, nu)?;
    if res.within(FEASIBILITY_TOL) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "coupling is not a martingale coupling (max residual {:.3e})",
            res.max()
        )))
    }
}

/// `K(p)` for a feasible coupling of `(mu, nu)`.
pub fn k_objective(
    p: &Coupling,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    rap: &RapConfig,
    quad: &QuadratureSpec,
) -> Result<f64> {
    require_feasible(p, mu, nu)?;
    integrated_error(p, rap, quad)
}

/// `∫ w(t) E[Var[X1 | X0, I_t]] dt` for a feasible coupling.
pub fn k_variance_form(
    p: &Coupling,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    rap: &RapConfig,
    quad: &QuadratureSpec,
) -> Result<f64> {
    require_feasible(p, mu, nu)?;
    Ok(evaluate(p, rap, quad)?.variance_form)
}

/// Gradient of the objective in the matrix entries.
pub fn k_gradient(p: &Coupling, rap: &RapConfig, quad: &QuadratureSpec) -> Result<DMatrix<f64>> {
    Ok(evaluate(p, rap, quad)?.gradient)
}

/// Per-row term `-2 Σ_q p_uq ∫ w(t) E_z[(y_q - M)² φ(a)/D]` with
/// `D = Σ_j p_uj φ(a + g1 (y_q - y_j))`, the extra contribution obtained by
/// differentiating the posterior normalizer on its own. It does not depend on
/// the column, so it is orthogonal to every feasible direction and leaves
/// projected steps unchanged. The noise integral uses an `n_hermite`-point
/// Hermite rule and the time nodes of `quad`.
pub fn row_normalizer_term(
    p: &Coupling,
    rap: &RapConfig,
    quad: &QuadratureSpec,
    n_hermite: usize,
) -> Result<Vec<f64>> {
    check_input(p)?;
    let (hz, hw) = gauss_hermite(n_hermite)?;
    let ys = &p.col_support;
    let (l, m) = (p.nrows(), p.ncols());
    let mut out = vec![0.0; l];
    let mut row = Vec::with_capacity(m);
    for (&t, &wt) in quad.t.iter().zip(&quad.wt) {
        let c = rap.g1(t) / rap.variance(t).sqrt();
        let kernel = rap.weight_unchecked(t);
        for (u, acc) in out.iter_mut().enumerate() {
            row.clear();
            row.extend(p.p.row(u).iter());
            let post = RowPosterior::new(&row, ys, c)
                .ok_or_else(|| Error::Domain(format!("row {u} has no mass")))?;
            for q in 0..m {
                if row[q] == 0.0 {
                    continue;
                }
                let shift = c * ys[q];
                let mut s_acc = 0.0;
                for (z, wz) in hz.iter().zip(&hw) {
                    let s = z + shift;
                    let (lse, mean, _) = post.moments(s);
                    let ratio = (-0.5 * z * z + 0.5 * s * s - lse).exp();
                    s_acc += wz * ratio * (ys[q] - mean).powi(2);
                }
                *acc -= 2.0 * wt * kernel * row[q] * s_acc;
            }
        }
    }
    Ok(out)
}

/// `sqrt((t1 - t0) (m2(nu) - m2(mu)))`, an upper bound on the objective over
/// all martingale couplings.
pub fn upper_bound(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, rap: &RapConfig) -> f64 {
    (rap.span() * (nu.second_moment() - mu.second_moment()).max(0.0)).sqrt()
}
