//! Empirical probability measures on the real line.
//!
//! A measure is stored in canonical form: strictly increasing atoms carrying
//! strictly positive weights that sum to one. Quantile functions follow the
//! left-continuous convention, `Q(u) = min { x : F(x) >= u }` for `u` in `(0, 1]`,
//! which makes them step functions on the cumulative-weight grid.

use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Relative distance under which two atoms are considered the same point.
pub const ATOM_MERGE_TOL: f64 = 1e-12;

/// Breakpoints of two cumulative grids closer than this are treated as one.
pub(crate) const GRID_MERGE_TOL: f64 = 1e-14;

/// Default absolute tolerance on the cumulative quantile gap.
pub const CONVEX_ORDER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

/// Left-continuous step function on `(0, 1]`: `values[k]` on `(breakpoints[k-1], breakpoints[k]]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl QuantileFunction {
    pub fn eval(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u <= 1.0) {
            return Err(Error::Domain(format!("quantile level {u} outside (0, 1]")));
        }
        let k = self.breakpoints.partition_point(|&c| c < u);
        Ok(self.values[k.min(self.values.len() - 1)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexOrderReport {
    pub ordered: bool,
    pub mean_gap: f64,
    pub min_q: f64,
    pub argmin_q: Vec<f64>,
    pub q_at_1: f64,
}

impl EmpiricalMeasure {
    /// Builds a canonical measure: sorted, near-duplicate atoms merged, zero
    /// weights dropped and the remaining weights renormalized.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Empty);
        }
        if atoms.len() != weights.len() {
            return Err(Error::LengthMismatch(atoms.len(), weights.len()));
        }
        for (idx, (&x, &w)) in atoms.iter().zip(&weights).enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite { idx, value: x });
            }
            if !w.is_finite() {
                return Err(Error::NonFinite { idx, value: w });
            }
            if w < 0.0 {
                return Err(Error::NegativeWeight { idx, value: w });
            }
        }

        let mut pairs: Vec<(f64, f64)> = atoms
            .into_iter()
            .zip(weights)
            .filter(|&(_, w)| w > 0.0)
            .collect();
        if pairs.is_empty() {
            return Err(Error::ZeroMass);
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, w) in pairs {
            match atoms.last() {
                Some(&last) if (x - last).abs() <= ATOM_MERGE_TOL * (1.0 + last.abs()) => {
                    *weights.last_mut().unwrap() += w;
                }
                _ => {
                    atoms.push(x);
                    weights.push(w);
                }
            }
        }

        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 4.0 * f64::EPSILON {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(samples: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        Self::new(samples, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dirac(x: f64) -> Result<Self> {
        Self::new(vec![x], vec![1.0])
    }

    /// `n` equally weighted atoms at the quantile midpoints `(k - 1/2) / n`
    /// of a normal law.
    pub fn normal_midpoints(mean: f64, sd: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty);
        }
        let law = Normal::new(mean, sd).map_err(|e| Error::Domain(e.to_string()))?;
        let atoms = (0..n)
            .map(|k| law.inverse_cdf((k as f64 + 0.5) / n as f64))
            .collect();
        Self::uniform(atoms)
    }

    /// Quantile-midpoint reducer: `n` equally weighted atoms `Q((k - 1/2) / n)`.
    pub fn discretize(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty);
        }
        let q = self.quantile_function();
        let atoms = (0..n)
            .map(|k| q.eval((k as f64 + 0.5) / n as f64))
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(atoms)
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }

    /// Cumulative weights; the last entry is exactly 1.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out: Vec<f64> = self
            .weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        *out.last_mut().unwrap() = 1.0;
        out
    }

    pub fn quantile_function(&self) -> QuantileFunction {
        QuantileFunction {
            breakpoints: self.cumulative(),
            values: self.atoms.clone(),
        }
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        self.quantile_function().eval(u)
    }

    pub fn mean(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * x * w)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| (x - m) * (x - m) * w)
            .sum()
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|x| x + c).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: EmpiricalMeasure = serde_json::from_str(s)?;
        Self::new(raw.atoms, raw.weights)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("measure serializes")
    }

    /// Reads samples from CSV with a `value` column and an optional `weight`
    /// column. Without weights the result is the uniform empirical measure.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let value_col = headers
            .iter()
            .position(|h| h == "value")
            .ok_or_else(|| Error::Parse("missing `value` column".into()))?;
        let weight_col = headers.iter().position(|h| h == "weight");

        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |col: usize| -> Result<f64> {
                rec.get(col)
                    .ok_or_else(|| Error::Parse(format!("row {}: missing field", line + 1)))?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", line + 1)))
            };
            atoms.push(field(value_col)?);
            weights.push(match weight_col {
                Some(c) => field(c)?,
                None => 1.0,
            });
        }
        Self::new(atoms, weights)
    }
}

/// One step of the merged quantile grid of two measures: both quantile
/// functions are constant on `(start, end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct MergedStep {
    pub start: f64,
    pub end: f64,
    pub qa: f64,
    pub qb: f64,
}

pub(crate) fn merged_steps(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Vec<MergedStep> {
    let ca = a.cumulative();
    let cb = b.cumulative();
    let mut steps = Vec::with_capacity(ca.len() + cb.len());
    let (mut i, mut j) = (0, 0);
    let mut start = 0.0;
    while i < ca.len() && j < cb.len() {
        let end = ca[i].min(cb[j]);
        if end > start {
            steps.push(MergedStep {
                start,
                end,
                qa: a.atoms[i],
                qb: b.atoms[j],
            });
            start = end;
        }
        let adv_a = ca[i] - end <= GRID_MERGE_TOL;
        let adv_b = cb[j] - end <= GRID_MERGE_TOL;
        if adv_a {
            i += 1;
        }
        if adv_b {
            j += 1;
        }
    }
    steps
}

/// `∫_0^1 |Q_a(u) - Q_b(u)| du`, exact on the merged breakpoint grid.
pub fn w1_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    merged_steps(a, b)
        .iter()
        .map(|s| (s.qa - s.qb).abs() * (s.end - s.start))
        .sum()
}

/// Knots `(t_k, Q(t_k))` of `Q(t) = ∫_0^t Q_mu - Q_nu`, starting at `(0, 0)`.
pub(crate) fn gap_knots(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let steps = merged_steps(mu, nu);
    let mut knots = Vec::with_capacity(steps.len() + 1);
    knots.push((0.0, 0.0));
    let mut acc = 0.0;
    for s in &steps {
        acc += (s.qa - s.qb) * (s.end - s.start);
        knots.push((s.end, acc));
    }
    knots
}

/// Convex-order test through the cumulative quantile gap: `mu <=cx nu` iff
/// `Q >= 0` on `[0, 1]` and `Q(1) = 0`. `Q` is piecewise linear so its minimum
/// sits on a knot.
pub fn convex_order_check(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    tol: f64,
) -> ConvexOrderReport {
    let knots = gap_knots(mu, nu);
    let min_q = knots.iter().map(|k| k.1).fold(f64::INFINITY, f64::min);
    let argmin_q = knots
        .iter()
        .filter(|k| k.1 <= min_q + tol)
        .map(|k| k.0)
        .collect();
    let q_at_1 = knots.last().unwrap().1;
    ConvexOrderReport {
        ordered: min_q >= -tol && q_at_1.abs() <= tol,
        mean_gap: mu.mean() - nu.mean(),
        min_q,
        argmin_q,
        q_at_1,
    }
}
