//! Gaussian quadrature rules for the noise and time integrals.
//!
//! The noise integral is standardized by `sqrt(v(t))` so one reference rule
//! serves every time node. The time integral uses Gauss–Legendre nodes, which
//! never touch the endpoints where the weight kernel has its pole.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fam::RapConfig;

pub const DEFAULT_HERMITE: usize = 64;
pub const DEFAULT_TIME_NODES: usize = 48;

/// Nodes and weights of an `n`-point rule for `E[f(Z)]`, `Z ~ N(0, 1)`.
/// Weights sum to one.
///
/// Golub–Welsch eigenvalues seed a Newton polish on the orthonormal Hermite
/// recurrence; weights are `1 / Σ_k p_k(x)²` over orthonormal polynomials,
/// which stays accurate in the far tail where eigenvector components do not.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi)
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    // Orthonormal recurrence: p_{k+1} = (x p_k - sqrt(k) p_{k-1}) / sqrt(k+1).
    let eval = |x: f64| -> (f64, f64, f64) {
        let (mut prev, mut cur) = (0.0, 1.0);
        let mut sumsq = 1.0;
        for k in 0..n {
            let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
            prev = cur;
            cur = next;
            if k + 1 < n {
                sumsq += cur * cur;
            }
        }
        // cur = p_n, prev = p_{n-1}; p_n' = sqrt(n) p_{n-1}.
        (cur, (n as f64).sqrt() * prev, sumsq)
    };

    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..8 {
            let (p, dp, _) = eval(*x);
            let step = p / dp;
            *x -= step;
            if step.abs() <= 1e-16 * (1.0 + x.abs()) {
                break;
            }
        }
        weights.push(1.0 / eval(*x).2);
    }
    // Enforce exact symmetry.
    for k in 0..n / 2 {
        let x = 0.5 * (nodes[n - 1 - k] - nodes[k]);
        let w = 0.5 * (weights[k] + weights[n - 1 - k]);
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok((nodes, weights))
}

/// Gauss–Legendre nodes and weights on `(-1, 1)`, nodes increasing.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    let eval = |x: f64| -> (f64, f64) {
        let (mut p0, mut p1) = (1.0, x);
        if n == 1 {
            return (p1, 1.0);
        }
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let nf = n as f64;
        (p1, nf * (x * p1 - p0) / (x * x - 1.0))
    };
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = eval(x);
            let step = p / dp;
            x -= step;
            if step.abs() <= 1e-16 {
                break;
            }
        }
        let (_, dp) = eval(x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - k] = x;
        nodes[k] = -x;
        weights[n - 1 - k] = w;
        weights[k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok((nodes, weights))
}

pub const DEFAULT_PANEL_ORDER: usize = 8;
pub const DEFAULT_PANEL_WIDTH: f64 = 0.5;
/// Half-width, in standard deviations, of the window kept around each atom.
pub const DEFAULT_NOISE_CUTOFF: f64 = 9.0;

/// How the noise integral is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseRule {
    /// Composite Gauss–Legendre panels in the standardized observation
    /// `s = (I - g0 x) / sqrt(v)`, covering `±cutoff` around every atom `c y_j`.
    /// One grid is shared by all target atoms of a row.
    Panels {
        order: usize,
        width: f64,
        cutoff: f64,
    },
    /// One Gauss–Hermite rule in `z = a / sqrt(v)` per target atom.
    Hermite { n: usize },
}

impl Default for NoiseRule {
    fn default() -> Self {
        NoiseRule::Panels {
            order: DEFAULT_PANEL_ORDER,
            width: DEFAULT_PANEL_WIDTH,
            cutoff: DEFAULT_NOISE_CUTOFF,
        }
    }
}

/// Node sets for the noise and time integrals of one process configuration.
#[derive(Debug, Clone, Serialize)]
pub struct QuadratureSpec {
    pub noise: NoiseRule,
    pub n_time: usize,
    /// Reference nodes for the noise rule: Gauss–Legendre on `(-1, 1)` for
    /// panels, standard-normal nodes for Hermite.
    pub z: Vec<f64>,
    pub wz: Vec<f64>,
    /// Time nodes strictly inside `(t0, t1)`; weights sum to `t1 - t0`.
    pub t: Vec<f64>,
    pub wt: Vec<f64>,
}

impl QuadratureSpec {
    /// Time nodes are Gauss–Legendre in `r` with `t = t1 - (t1 - t0)(1 - r)²`,
    /// which packs nodes toward `t1` where the filter resolves the atoms.
    pub fn new(rap: &RapConfig, noise: NoiseRule, n_time: usize) -> Result<Self> {
        let (z, wz) = match noise {
            NoiseRule::Panels {
                order,
                width,
                cutoff,
            } => {
                if !(width > 0.0 && width.is_finite() && cutoff > 0.0 && cutoff.is_finite()) {
                    return Err(Error::Domain(format!(
                        "panel width and cutoff must be positive (got {width}, {cutoff})"
                    )));
                }
                gauss_legendre(order)?
            }
            NoiseRule::Hermite { n } => gauss_hermite(n)?,
        };
        let (x, wx) = gauss_legendre(n_time)?;
        let span = rap.span();
        let mut t = Vec::with_capacity(n_time);
        let mut wt = Vec::with_capacity(n_time);
        for (x, w) in x.iter().zip(&wx) {
            let gap = 0.5 * (1.0 - x);
            t.push(rap.t1 - span * gap * gap);
            wt.push(0.5 * w * 2.0 * span * gap);
        }
        if t.iter().any(|&t| !(t > rap.t0 && t < rap.t1)) {
            return Err(Error::Numerical(
                "time node collapsed onto an endpoint".into(),
            ));
        }
        Ok(Self {
            noise,
            n_time,
            z,
            wz,
            t,
            wt,
        })
    }

    pub fn default_for(rap: &RapConfig) -> Result<Self> {
        Self::new(rap, NoiseRule::default(), DEFAULT_TIME_NODES)
    }

    pub fn hermite(rap: &RapConfig, n_hermite: usize, n_time: usize) -> Result<Self> {
        Self::new(rap, NoiseRule::Hermite { n: n_hermite }, n_time)
    }

    /// Same rule with every node count doubled (panel width halved).
    pub fn refined(&self, rap: &RapConfig) -> Result<Self> {
        let noise = match self.noise {
            NoiseRule::Panels {
                order,
                width,
                cutoff,
            } => NoiseRule::Panels {
                order,
                width: width / 2.0,
                cutoff,
            },
            NoiseRule::Hermite { n } => NoiseRule::Hermite { n: 2 * n },
        };
        Self::new(rap, noise, 2 * self.n_time)
    }
}
