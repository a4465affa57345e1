//! Minimal-W1 repair of a pair of empirical measures into convex order.
//!
//! With `Q(t) = ∫_0^t Q_mu - Q_nu`, the pair is ordered iff `Q >= 0` and
//! `Q(1) = 0`. The repair takes `F`, the convex envelope of `Q`, and its left
//! derivative `f`, and shifts the quantile functions to `Q_mu - f/alpha` and
//! `Q_nu + f/beta`. The repaired gap is `Q - F >= 0`, vanishing at both ends,
//! and the cost `∫|f|` equals `alpha·W1(mu, mu~) = beta·W1(nu, nu~)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{
    convex_order_check, gap_knots, merged_steps, EmpiricalMeasure, QuantileFunction,
    CONVEX_ORDER_TOL,
};

/// Continuous piecewise-linear function on `[0, 1]` given by its knots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiecewiseLinear {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn from_points(points: &[(f64, f64)]) -> Self {
        Self {
            knots: points.iter().map(|p| p.0).collect(),
            values: points.iter().map(|p| p.1).collect(),
        }
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.knots
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Linear interpolation; clamps to the end values outside the knot range.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.knots.len();
        if t <= self.knots[0] {
            return self.values[0];
        }
        if t >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        let k = self.knots.partition_point(|&x| x < t);
        let (t0, t1) = (self.knots[k - 1], self.knots[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Slopes of the segments, `slopes[k]` on `(knots[k], knots[k+1]]`.
    pub fn slopes(&self) -> Vec<f64> {
        self.knots
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(t, v)| (v[1] - v[0]) / (t[1] - t[0]))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexifyResult {
    pub mu_tilde: EmpiricalMeasure,
    pub nu_tilde: EmpiricalMeasure,
    /// Left derivative of the convex envelope, as a step function on `(0, 1]`.
    pub f: QuantileFunction,
    pub cost: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn cumulative_gap(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> PiecewiseLinear {
    PiecewiseLinear::from_points(&gap_knots(mu, nu))
}

/// Greatest convex minorant of a piecewise-linear function: the lower convex
/// hull of its knots, built with one monotone-chain sweep (knots are sorted).
pub fn convex_envelope(q: &PiecewiseLinear) -> PiecewiseLinear {
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(q.knots.len());
    for p in q.points() {
        while hull.len() >= 2 {
            let o = hull[hull.len() - 2];
            let a = hull[hull.len() - 1];
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    PiecewiseLinear::from_points(&hull)
}

fn check_exponents(alpha: f64, beta: f64) -> Result<()> {
    let ok = alpha.is_finite()
        && beta.is_finite()
        && alpha > 1.0
        && beta > 1.0
        && (1.0 / alpha + 1.0 / beta - 1.0).abs() <= 1e-12;
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "alpha, beta must exceed 1 with 1/alpha + 1/beta = 1 (got {alpha}, {beta})"
        )))
    }
}

pub fn convexify_pair(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    alpha: f64,
    beta: f64,
) -> Result<ConvexifyResult> {
    check_exponents(alpha, beta)?;

    let steps = merged_steps(mu, nu);
    if convex_order_check(mu, nu, CONVEX_ORDER_TOL).ordered {
        return Ok(ConvexifyResult {
            mu_tilde: mu.clone(),
            nu_tilde: nu.clone(),
            f: QuantileFunction {
                breakpoints: steps.iter().map(|s| s.end).collect(),
                values: vec![0.0; steps.len()],
            },
            cost: 0.0,
            alpha,
            beta,
        });
    }

    let envelope = convex_envelope(&cumulative_gap(mu, nu));
    let slopes = envelope.slopes();

    // Hull vertices are a subset of the gap knots, so each merged step lies
    // inside exactly one hull segment.
    let mut seg = 0;
    let mut f_values = Vec::with_capacity(steps.len());
    for s in &steps {
        while seg + 1 < slopes.len() && envelope.knots[seg + 1] < s.end {
            seg += 1;
        }
        f_values.push(slopes[seg]);
    }

    let lengths: Vec<f64> = steps.iter().map(|s| s.end - s.start).collect();
    let mu_atoms = steps
        .iter()
        .zip(&f_values)
        .map(|(s, f)| s.qa - f / alpha)
        .collect();
    let nu_atoms = steps
        .iter()
        .zip(&f_values)
        .map(|(s, f)| s.qb + f / beta)
        .collect();
    let cost = f_values
        .iter()
        .zip(&lengths)
        .map(|(f, l)| f.abs() * l)
        .sum();

    Ok(ConvexifyResult {
        mu_tilde: EmpiricalMeasure::new(mu_atoms, lengths.clone())?,
        nu_tilde: EmpiricalMeasure::new(nu_atoms, lengths)?,
        f: QuantileFunction {
            breakpoints: steps.iter().map(|s| s.end).collect(),
            values: f_values,
        },
        cost,
        alpha,
        beta,
    })
}
