//! Randomized arcade process configuration and the filtered arcade martingale
//! (FAM) of a discrete coupling.
//!
//! Given `X0 = x_u` the information process is `I_t = g0 x_u + g1 X1 + A_t`
//! with `A_t ~ N(0, v(t))`. Conditioning on `I_t` turns row `u` of the
//! coupling into a posterior over the target atoms:
//! `post_j ∝ p_uj · φ(I_t - g0 x_u - g1 y_j; v(t))`. Everything is evaluated
//! in log-space with a shared normalizer, since `v(t)` vanishes at both ends.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::coupling::Coupling;
use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Posterior terms further than this below the largest log-weight are dropped
/// (relative contribution below `e^-50`).
pub(crate) const LOG_PRUNE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Driver {
    Brownian,
    GaussMarkov,
}

/// One-arc randomized arcade process on `[t0, t1]`.
///
/// The driver is a centered Gauss–Markov process with covariance
/// `H1(s) H2(t)` for `s <= t`; the noise `A_t` is its bridge between the two
/// dates, and `g0`, `g1` are the matching interpolating coefficients.
#[derive(Clone)]
pub struct RapConfig {
    pub t0: f64,
    pub t1: f64,
    pub driver: Driver,
    g0: ScalarFn,
    g1: ScalarFn,
    v: ScalarFn,
    h1: ScalarFn,
    h2: ScalarFn,
    dh1: ScalarFn,
    dh2: ScalarFn,
}

impl fmt::Debug for RapConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RapConfig")
            .field("t0", &self.t0)
            .field("t1", &self.t1)
            .field("driver", &self.driver)
            .finish_non_exhaustive()
    }
}

fn check_interval(t0: f64, t1: f64) -> Result<()> {
    if t0.is_finite() && t1.is_finite() && t0 < t1 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "need finite t0 < t1 (got {t0}, {t1})"
        )))
    }
}

impl RapConfig {
    /// The standard randomized Brownian bridge.
    pub fn brownian(t0: f64, t1: f64) -> Result<Self> {
        check_interval(t0, t1)?;
        let span = t1 - t0;
        Ok(Self {
            t0,
            t1,
            driver: Driver::Brownian,
            g0: Arc::new(move |t| (t1 - t) / span),
            g1: Arc::new(move |t| (t - t0) / span),
            v: Arc::new(move |t| ((t1 - t) * (t - t0) / span).max(0.0)),
            h1: Arc::new(|t| t),
            h2: Arc::new(|_| 1.0),
            dh1: Arc::new(|_| 1.0),
            dh2: Arc::new(|_| 0.0),
        })
    }

    /// Arcade process of a centered Gauss–Markov driver with covariance
    /// `H1(min(s,t)) H2(max(s,t))`. The interpolating coefficients and the
    /// bridge variance follow from Gaussian conditioning on the driver at
    /// `t0` and `t1`; when the driver is pinned at `t0` (zero variance there)
    /// only `t1` is conditioned on and `g0 = 1 - g1`.
    pub fn gauss_markov(
        t0: f64,
        t1: f64,
        h1: ScalarFn,
        h2: ScalarFn,
        dh1: ScalarFn,
        dh2: ScalarFn,
    ) -> Result<Self> {
        check_interval(t0, t1)?;
        let (k1, k2) = (h1.clone(), h2.clone());
        let cov = move |s: f64, t: f64| {
            let (a, b) = if s <= t { (s, t) } else { (t, s) };
            k1(a) * k2(b)
        };
        let c00 = cov(t0, t0);
        let c01 = cov(t0, t1);
        let c11 = cov(t1, t1);
        if !(c11 > 0.0) || !c00.is_finite() || !c01.is_finite() {
            return Err(Error::Domain(
                "driver variance must be positive at t1".into(),
            ));
        }
        let det = c00 * c11 - c01 * c01;
        let pinned = c00 <= 1e-14 * c11;
        if !pinned && !(det > 1e-14 * c00 * c11) {
            return Err(Error::Domain(
                "driver values at t0 and t1 are degenerate".into(),
            ));
        }
        let coeffs = Arc::new(move |t: f64| -> (f64, f64, f64) {
            let (ct0, ct1, ctt) = (cov(t, t0), cov(t, t1), cov(t, t));
            if pinned {
                let g1 = ct1 / c11;
                (1.0 - g1, g1, (ctt - ct1 * ct1 / c11).max(0.0))
            } else {
                let g0 = (ct0 * c11 - ct1 * c01) / det;
                let g1 = (c00 * ct1 - c01 * ct0) / det;
                (g0, g1, (ctt - g0 * ct0 - g1 * ct1).max(0.0))
            }
        });
        let (a, b, c) = (coeffs.clone(), coeffs.clone(), coeffs);
        Ok(Self {
            t0,
            t1,
            driver: Driver::GaussMarkov,
            g0: Arc::new(move |t| a(t).0),
            g1: Arc::new(move |t| b(t).1),
            v: Arc::new(move |t| c(t).2),
            h1,
            h2,
            dh1,
            dh2,
        })
    }

    pub fn span(&self) -> f64 {
        self.t1 - self.t0
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t.is_finite() && t >= self.t0 && t <= self.t1 {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "time {t} outside [{}, {}]",
                self.t0, self.t1
            )))
        }
    }

    fn check_interior(&self, t: f64) -> Result<()> {
        if t.is_finite() && t > self.t0 && t < self.t1 {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "time {t} not inside ({}, {})",
                self.t0, self.t1
            )))
        }
    }

    pub fn g0(&self, t: f64) -> f64 {
        (self.g0)(t)
    }

    pub fn g1(&self, t: f64) -> f64 {
        (self.g1)(t)
    }

    /// Noise variance `v(t) = Var[A_t]`.
    pub fn variance(&self, t: f64) -> f64 {
        (self.v)(t)
    }

    pub fn h1(&self, t: f64) -> f64 {
        (self.h1)(t)
    }

    pub fn h2(&self, t: f64) -> f64 {
        (self.h2)(t)
    }

    /// Weight kernel without domain checks; callers stay inside `(t0, t1)`.
    pub(crate) fn weight_unchecked(&self, t: f64) -> f64 {
        let num = (self.dh1)(t) * self.h2(t) - self.h1(t) * (self.dh2)(t);
        let den = self.h1(self.t1) * self.h2(t) - self.h1(t) * self.h2(self.t1);
        num.max(0.0).sqrt() / den
    }
}

/// `sqrt(v(t))`.
pub fn noise_std(rap: &RapConfig, t: f64) -> Result<f64> {
    rap.check_time(t)?;
    Ok(rap.variance(t).sqrt())
}

/// `sqrt(H1' H2 - H1 H2') / (H1(t1) H2(t) - H1(t) H2(t1))`; `1 / (t1 - t)` for
/// the Brownian driver.
pub fn weight_fn(rap: &RapConfig, t: f64) -> Result<f64> {
    rap.check_interior(t)?;
    let w = rap.weight_unchecked(t);
    if w.is_finite() && w > 0.0 {
        Ok(w)
    } else {
        Err(Error::Numerical(format!("weight kernel is {w} at t = {t}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamPosterior {
    pub u: usize,
    pub q: usize,
    pub a: f64,
    pub t: f64,
    pub post_weights: Vec<f64>,
    pub mean: f64,
    pub var: f64,
}

/// Log-space view of one coupling row, reused across conditioning values.
///
/// With standardized signal `c = g1 / sqrt(v)` and standardized observation
/// `s = (I - g0 x_u) / sqrt(v)`, the log-posterior of atom `j` is, up to a
/// constant, `ln p_uj + c s y_j - c² y_j² / 2`.
#[derive(Debug, Clone)]
pub(crate) struct RowPosterior<'a> {
    ys: &'a [f64],
    /// Indices of atoms with positive mass.
    support: Vec<usize>,
    /// `ln p_uj - c² y_j² / 2` on the support.
    base: Vec<f64>,
    c: f64,
}

impl<'a> RowPosterior<'a> {
    pub(crate) fn new(row: &[f64], ys: &'a [f64], c: f64) -> Option<Self> {
        let support: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let base = support
            .iter()
            .map(|&j| row[j].ln() - 0.5 * c * c * ys[j] * ys[j])
            .collect();
        Some(Self {
            ys,
            support,
            base,
            c,
        })
    }

    /// Log-normalizer shift, first and second posterior moments at `s`.
    /// Returns `(lse, mean, second_moment)` where `lse` is the log of
    /// `Σ_j p_uj exp(c s y_j - c² y_j² / 2)`.
    #[inline]
    pub(crate) fn moments(&self, s: f64) -> (f64, f64, f64) {
        let slope = self.c * s;
        let mut top = f64::NEG_INFINITY;
        for (k, &j) in self.support.iter().enumerate() {
            let e = self.base[k] + slope * self.ys[j];
            if e > top {
                top = e;
            }
        }
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (k, &j) in self.support.iter().enumerate() {
            let d = self.base[k] + slope * self.ys[j] - top;
            if d > -LOG_PRUNE {
                let e = d.exp();
                let y = self.ys[j];
                z += e;
                m1 += e * y;
                m2 += e * y * y;
            }
        }
        (top + z.ln(), m1 / z, m2 / z)
    }

    /// Full posterior weights at `s`.
    pub(crate) fn weights(&self, s: f64) -> Vec<f64> {
        let slope = self.c * s;
        let logs: Vec<f64> = self
            .support
            .iter()
            .enumerate()
            .map(|(k, &j)| self.base[k] + slope * self.ys[j])
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        let mut out = vec![0.0; self.ys.len()];
        for (k, &j) in self.support.iter().enumerate() {
            out[j] = (logs[k] - top).exp() / z;
        }
        out
    }
}

struct Conditioning<'a> {
    row: RowPosterior<'a>,
    /// Standardized observation `s = z + c y_q`.
    s: f64,
    /// `a / sqrt(v)`.
    z: f64,
}

fn condition<'a>(
    p: &'a Coupling,
    rap: &RapConfig,
    u: usize,
    q: usize,
    a: f64,
    t: f64,
    row_buf: &'a mut Vec<f64>,
) -> Result<Conditioning<'a>> {
    if u >= p.nrows() || q >= p.ncols() {
        return Err(Error::Domain(format!(
            "index ({u}, {q}) outside a {}x{} coupling",
            p.nrows(),
            p.ncols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::Domain(format!("noise coordinate {a} is not finite")));
    }
    rap.check_interior(t)?;
    let v = rap.variance(t);
    if !(v > 0.0) {
        return Err(Error::Numerical(format!("noise variance {v} at t = {t}")));
    }
    let sd = v.sqrt();
    let c = rap.g1(t) / sd;
    *row_buf = p.p.row(u).iter().cloned().collect();
    if row_buf.iter().any(|&x| x < 0.0) {
        return Err(Error::Domain(format!("row {u} has negative entries")));
    }
    let row = RowPosterior::new(row_buf, &p.col_support, c)
        .ok_or_else(|| Error::Domain(format!("row {u} has no mass")))?;
    let z = a / sd;
    Ok(Conditioning {
        s: z + c * p.col_support[q],
        z,
        row,
    })
}

/// Posterior of `X1` given `X0 = x_u` and `I_t = g0 x_u + g1 y_q + a`.
pub fn posterior_at(
    p: &Coupling,
    rap: &RapConfig,
    u: usize,
    q: usize,
    a: f64,
    t: f64,
) -> Result<FamPosterior> {
    let mut buf = Vec::new();
    let cond = condition(p, rap, u, q, a, t, &mut buf)?;
    let (_, mean, m2) = cond.row.moments(cond.s);
    Ok(FamPosterior {
        u,
        q,
        a,
        t,
        post_weights: cond.row.weights(cond.s),
        mean,
        var: (m2 - mean * mean).max(0.0),
    })
}

/// Partial derivative of the posterior mean in `p_uq`, holding the observed
/// `I_t` fixed: `φ(a; v) (y_q - M) / Σ_j p_uj φ(a + g1 (y_q - y_j); v)`.
pub fn dm_dp(p: &Coupling, rap: &RapConfig, u: usize, q: usize, a: f64, t: f64) -> Result<f64> {
    let mut buf = Vec::new();
    let cond = condition(p, rap, u, q, a, t, &mut buf)?;
    let (lse, mean, _) = cond.row.moments(cond.s);
    // In standardized units φ(a)/D = exp(-z²/2 - (lse - s²/2)).
    let log_ratio = -0.5 * cond.z * cond.z + 0.5 * cond.s * cond.s - lse;
    Ok(log_ratio.exp() * (p.col_support[q] - mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::EmpiricalMeasure;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn sym(a: f64) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(vec![-a, a]).unwrap()
    }

    fn dirac_row() -> Coupling {
        Coupling::new(
            dmatrix![0.5, 0.5],
            &EmpiricalMeasure::dirac(0.0).unwrap(),
            &sym(1.0),
        )
        .unwrap()
    }

    #[test]
    fn brownian_coefficients() {
        let rap = RapConfig::brownian(0.0, 1.0).unwrap();
        assert_eq!(noise_std(&rap, 0.5).unwrap(), 0.5);
        assert_eq!(noise_std(&rap, 0.0).unwrap(), 0.0);
        let rap2 = RapConfig::brownian(0.0, 2.0).unwrap();
        assert_abs_diff_eq!(
            noise_std(&rap2, 0.5).unwrap(),
            0.375_f64.sqrt(),
            epsilon = 1e-15
        );
        assert!(noise_std(&rap, 1.5).is_err());

        assert_eq!(weight_fn(&rap, 0.5).unwrap(), 2.0);
        assert_abs_diff_eq!(weight_fn(&rap, 0.9).unwrap(), 10.0, epsilon = 1e-12);
        assert!(weight_fn(&rap, 1.0).is_err());

        assert_eq!(
            (rap.g0(0.0), rap.g0(1.0), rap.g1(0.0), rap.g1(1.0)),
            (1.0, 0.0, 0.0, 1.0)
        );
        assert!(RapConfig::brownian(1.0, 1.0).is_err());
    }

    #[test]
    fn gauss_markov_reproduces_brownian() {
        for (t0, t1) in [(0.0, 1.0), (0.5, 2.0)] {
            let gm = RapConfig::gauss_markov(
                t0,
                t1,
                Arc::new(|t| t),
                Arc::new(|_| 1.0),
                Arc::new(|_| 1.0),
                Arc::new(|_| 0.0),
            )
            .unwrap();
            let bb = RapConfig::brownian(t0, t1).unwrap();
            for k in 1..20 {
                let t = t0 + (t1 - t0) * k as f64 / 20.0;
                assert_abs_diff_eq!(gm.g0(t), bb.g0(t), epsilon = 1e-12);
                assert_abs_diff_eq!(gm.g1(t), bb.g1(t), epsilon = 1e-12);
                assert_abs_diff_eq!(gm.variance(t), bb.variance(t), epsilon = 1e-12);
                assert_abs_diff_eq!(weight_fn(&gm, t).unwrap(), 1.0 / (t1 - t), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_row() {
        let mu = EmpiricalMeasure::dirac(0.0).unwrap();
        let nu = EmpiricalMeasure::uniform(vec![-1.0, 0.0, 1.0]).unwrap();
        let p = Coupling::new(dmatrix![0.0, 1.0, 0.0], &mu, &nu).unwrap();
        let rap = RapConfig::brownian(0.0, 1.0).unwrap();
        for (a, t) in [(0.3, 0.2), (-4.0, 0.9), (0.0, 0.5)] {
            let post = posterior_at(&p, &rap, 0, 1, a, t).unwrap();
            assert_eq!(post.mean, 0.0);
            assert_eq!(post.var, 0.0);
            assert_eq!(dm_dp(&p, &rap, 0, 1, a, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_atom_closed_form() {
        let rap = RapConfig::brownian(0.0, 1.0).unwrap();
        let p = dirac_row();
        // I = 0.2 observed through q = +1 (g1 = 0.5) needs a = -0.3.
        let post = posterior_at(&p, &rap, 0, 1, -0.3, 0.5).unwrap();
        assert_abs_diff_eq!(post.mean, 0.4_f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(post.mean, 0.379948962255225, epsilon = 1e-14);
        let post = posterior_at(&p, &rap, 0, 1, -0.5, 0.5).unwrap();
        assert_abs_diff_eq!(post.mean, 0.0, epsilon = 1e-16);
        assert_abs_diff_eq!(post.var, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(post.post_weights.iter().sum::<f64>(), 1.0, epsilon = 1e-15);

        // At I = 0 the derivative's sign is that of y_q.
        assert!(dm_dp(&p, &rap, 0, 1, -0.5, 0.5).unwrap() > 0.0);
        assert!(dm_dp(&p, &rap, 0, 0, 0.5, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let rap = RapConfig::brownian(0.0, 1.0).unwrap();
        let p = dirac_row();
        assert!(posterior_at(&p, &rap, 0, 0, f64::NAN, 0.5).is_err());
        assert!(posterior_at(&p, &rap, 0, 0, 0.0, 1.0).is_err());
        assert!(posterior_at(&p, &rap, 1, 0, 0.0, 0.5).is_err());
        let zero = Coupling::new(
            dmatrix![0.0, 0.0],
            &EmpiricalMeasure::dirac(0.0).unwrap(),
            &sym(1.0),
        )
        .unwrap();
        assert!(posterior_at(&zero, &rap, 0, 0, 0.0, 0.5).is_err());
    }

    #[test]
    fn far_tail_weights_stay_normalized() {
        let rap = RapConfig::brownian(0.0, 1.0).unwrap();
        let mu = EmpiricalMeasure::dirac(0.0).unwrap();
        let nu = EmpiricalMeasure::uniform(vec![-3.0, -0.5, 0.1, 2.0, 5.0]).unwrap();
        let p = Coupling::new(dmatrix![0.1, 0.3, 0.2, 0.3, 0.1], &mu, &nu).unwrap();
        for t in [1e-6, 0.3, 0.999_999] {
            let sd = noise_std(&rap, t).unwrap();
            for k in -10..=10 {
                let post = posterior_at(&p, &rap, 0, 2, k as f64 * sd, t).unwrap();
                let sum: f64 = post.post_weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(post.mean >= -3.0 && post.mean <= 5.0);
            }
        }
    }
}
