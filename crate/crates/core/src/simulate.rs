//! Monte-Carlo oracle for the filtered arcade martingale under the randomized
//! Brownian bridge.
//!
//! Paths draw `(x0, x1)` from the coupling, sample the bridge noise exactly on
//! a uniform grid `t0, t0 + Δ, …, t1 - Δ`, and evaluate `M_t = E[X1 | X0, I_t]`
//! through the row posterior. The objective estimate integrates
//! `(x1 - M_t)² w(t)` by the trapezoid rule on that grid; the piece on
//! `[t1 - Δ, t1]` is not sampled but bounded and reported.
//!
//! Each path owns a ChaCha stream selected by its index, so results do not
//! depend on how paths are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::coupling::Coupling;
use crate::error::{Error, Result};
use crate::fam::{Driver, RapConfig, RowPosterior};
use crate::quadrature::gauss_legendre;

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub n_paths: usize,
    /// Number of grid intervals; `Δ = (t1 - t0) / n_grid`.
    pub n_grid: usize,
    pub seed: u64,
    /// Keep the full I/M/W paths in the bundle (memory grows with
    /// `n_paths · n_grid`).
    pub keep_paths: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathRecord {
    pub path_id: usize,
    pub x0: f64,
    pub x1: f64,
    pub i: Vec<f64>,
    pub m: Vec<f64>,
    /// Innovations on the grid plus a final value at `t1`.
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathBundle {
    /// `t0, t0 + Δ, …, t1 - Δ`.
    pub grid: Vec<f64>,
    pub paths: Vec<PathRecord>,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub grid_size: usize,
    /// Upper bound on the unsampled `[t1 - Δ, t1]` part of the integral.
    pub tail_bias_bound: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    fn from_samples(xs: impl Iterator<Item = f64> + Clone) -> Self {
        let n = xs.clone().count() as f64;
        let mean = xs.clone().sum::<f64>() / n;
        let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// `|mean - target| <= k · se` (exact equality passes when `se = 0`).
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct InnovationStats {
    pub w_t1: MeanSe,
    /// Sample variance of `W_{t1}` with its standard error.
    pub var_w_t1: MeanSe,
    /// `E[X1 W_{t1}]`.
    pub x1_w_t1: MeanSe,
}

#[derive(Debug, Clone, Serialize)]
pub struct IncrementStat {
    pub s: f64,
    pub t: f64,
    /// `"1"` or `"id"`: the test function applied to `M_s`.
    pub h: &'static str,
    pub stat: MeanSe,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub increments: Vec<IncrementStat>,
    /// `E[M_t]` at the diagnostic times.
    pub mean_path: Vec<(f64, MeanSe)>,
    /// `max |M_{t0} - x0|` over paths.
    pub pin_start: f64,
    /// Mean of `|M_{t_last} - x1|`.
    pub pin_end: MeanSe,
}

#[derive(Debug, Clone, Serialize)]
pub struct Simulation {
    pub bundle: PathBundle,
    pub estimate: McEstimate,
    pub innovations: InnovationStats,
    pub diagnostics: MartingaleReport,
}

fn require_brownian(rap: &RapConfig) -> Result<()> {
    if rap.driver == Driver::Brownian {
        Ok(())
    } else {
        Err(Error::Domain(
            "path simulation supports the Brownian driver only".into(),
        ))
    }
}

/// Uniform grid `t0 + kΔ`, `k = 0..n_grid`, excluding `t1`.
pub fn time_grid(rap: &RapConfig, n_grid: usize) -> Result<Vec<f64>> {
    if n_grid < 2 {
        return Err(Error::Domain(format!(
            "grid needs at least 2 intervals (got {n_grid})"
        )));
    }
    let dt = rap.span() / n_grid as f64;
    Ok((0..n_grid).map(|k| rap.t0 + k as f64 * dt).collect())
}

/// Exact Brownian-bridge noise on `grid`, pinned to zero at `t0` and `t1`,
/// sampled by sequential Gaussian conditioning.
pub fn sample_bridge_path<R: Rng + ?Sized>(
    rap: &RapConfig,
    grid: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    require_brownian(rap)?;
    let mut out = Vec::with_capacity(grid.len());
    let (mut prev_t, mut prev_a) = (rap.t0, 0.0);
    for &t in grid {
        if !(t >= prev_t && t <= rap.t1) {
            return Err(Error::Domain(format!(
                "grid must be sorted inside [{}, {}] (found {t} after {prev_t})",
                rap.t0, rap.t1
            )));
        }
        let a = if t == prev_t {
            prev_a
        } else {
            let rest = rap.t1 - prev_t;
            let mean = prev_a * (rap.t1 - t) / rest;
            let var = (t - prev_t) * (rap.t1 - t) / rest;
            mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
        };
        out.push(a);
        prev_t = t;
        prev_a = a;
    }
    Ok(out)
}

/// Bridge noise `A` together with the Brownian motion `B` driving
/// `dA = -A/(t1 - t) dt + dB`, both exact on `grid` (which starts at `t0` and
/// stays below `t1`). Over a step the pair `(ΔB, ∫ dB/(t1 - s))` is Gaussian
/// with known covariance, and `A_{t'} = (t1 - t')(A_t/(t1 - t) + ∫ dB/(t1 - s))`.
fn sample_bridge_and_driver<R: Rng + ?Sized>(
    rap: &RapConfig,
    grid: &[f64],
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    a.push(0.0);
    b.push(0.0);
    for k in 1..grid.len() {
        let (t, t_next) = (grid[k - 1], grid[k]);
        let (r, r_next) = (rap.t1 - t, rap.t1 - t_next);
        let h = t_next - t;
        let var_j = h / (r * r_next);
        let cov = (r / r_next).ln();
        let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let db = h.sqrt() * z1;
        let j = cov / h.sqrt() * z1 + (var_j - cov * cov / h).max(0.0).sqrt() * z2;
        a.push(r_next * (a[k - 1] / r + j));
        b.push(b[k - 1] + db);
    }
    (a, b)
}

/// Per-row posteriors for every grid node after `t0`.
struct PosteriorTable<'a> {
    /// `rows[u][k - 1]` for grid index `k >= 1`.
    rows: Vec<Vec<RowPosterior<'a>>>,
    /// Row conditional means `E[X1 | X0 = x_u]`.
    row_means: Vec<f64>,
    sd: Vec<f64>,
    g0: Vec<f64>,
}

impl<'a> PosteriorTable<'a> {
    fn new(p: &'a Coupling, rap: &RapConfig, grid: &[f64]) -> Result<Self> {
        let ys = &p.col_support;
        let mut rows = Vec::with_capacity(p.nrows());
        let mut row_means = Vec::with_capacity(p.nrows());
        let sd: Vec<f64> = grid.iter().map(|&t| rap.variance(t).sqrt()).collect();
        for u in 0..p.nrows() {
            let row: Vec<f64> = p.p.row(u).iter().cloned().collect();
            let mass: f64 = row.iter().sum();
            if !(mass > 0.0) {
                return Err(Error::Domain(format!("row {u} has no mass")));
            }
            row_means.push(row.iter().zip(ys).map(|(p, y)| p * y).sum::<f64>() / mass);
            let mut per_t = Vec::with_capacity(grid.len() - 1);
            for (k, &t) in grid.iter().enumerate().skip(1) {
                let c = rap.g1(t) / sd[k];
                per_t.push(RowPosterior::new(&row, ys, c).expect("row has mass"));
            }
            rows.push(per_t);
        }
        Ok(Self {
            rows,
            row_means,
            sd,
            g0: grid.iter().map(|&t| rap.g0(t)).collect(),
        })
    }

    fn mean(&self, u: usize, k: usize, x0: f64, i: f64) -> f64 {
        if k == 0 {
            return self.row_means[u];
        }
        let s = (i - self.g0[k] * x0) / self.sd[k];
        self.rows[u][k - 1].moments(s).1
    }
}

/// Innovations by left-point Euler on the grid, closing with `I_{t1} = x1`:
/// `dW = ((Z - M)/(t1 - t) - x0 g0'(t)) dt + dI`, `Z = I - g0 x0`.
pub fn innovations_path(path: &PathRecord, grid: &[f64], rap: &RapConfig) -> Result<Vec<f64>> {
    require_brownian(rap)?;
    let n = grid.len();
    if path.i.len() != n || path.m.len() != n {
        return Err(Error::LengthMismatch(path.i.len(), n));
    }
    let dg0 = -1.0 / rap.span();
    let mut w = Vec::with_capacity(n + 1);
    w.push(0.0);
    for k in 0..n {
        let t = grid[k];
        let (t_next, i_next) = if k + 1 < n {
            (grid[k + 1], path.i[k + 1])
        } else {
            (rap.t1, path.x1)
        };
        if rap.t1 - t < t_next - t {
            return Err(Error::Domain("grid step overshoots t1".into()));
        }
        let z = path.i[k] - rap.g0(t) * path.x0;
        let drift = (z - path.m[k]) / (rap.t1 - t) - path.x0 * dg0;
        w.push(w[k] + drift * (t_next - t) + (i_next - path.i[k]));
    }
    Ok(w)
}

/// Bound on `∫_{t1-Δ}^{t1} E[Var[X1 | X0, I_t]] w(t) dt`. The conditional
/// variance is at most the error of the nearest-atom guess, which is at most
/// `range² · 2 Q(g1 d / (2 sqrt(v)))` with `d` the smallest atom gap, and at
/// most `range² / 4`.
fn tail_bound(ys: &[f64], rap: &RapConfig, dt: f64) -> f64 {
    if ys.len() < 2 {
        return 0.0;
    }
    let range = ys[ys.len() - 1] - ys[0];
    let gap = ys
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let (x, wx) = gauss_legendre(64).expect("positive order");
    // t = t1 - dt r², r in (0, 1).
    x.iter()
        .zip(&wx)
        .map(|(x, w)| {
            let r = 0.5 * (1.0 + x);
            let t = rap.t1 - dt * r * r;
            let c = rap.g1(t) / rap.variance(t).sqrt();
            let var_bound =
                (range * range * 2.0 * normal.sf(0.5 * c * gap)).min(0.25 * range * range);
            0.5 * w * var_bound * rap.weight_unchecked(t) * 2.0 * dt * r
        })
        .sum()
}

struct PathSummary {
    integral: f64,
    x1: f64,
    w_t1: f64,
    m_diag: Vec<f64>,
    pin_start: f64,
    pin_end: f64,
    record: Option<PathRecord>,
}

/// Indices of the grid nodes used for martingale diagnostics.
fn diagnostic_nodes(n: usize) -> Vec<usize> {
    let mut v = vec![0, n / 4, n / 2, 3 * n / 4, n - 1];
    v.dedup();
    v
}

pub fn simulate_fam(p: &Coupling, rap: &RapConfig, cfg: &SimConfig) -> Result<Simulation> {
    require_brownian(rap)?;
    if cfg.n_paths < 2 {
        return Err(Error::Domain("need at least 2 paths".into()));
    }
    if p.p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain(
            "coupling has negative or non-finite entries".into(),
        ));
    }
    let grid = time_grid(rap, cfg.n_grid)?;
    let n = grid.len();
    let dt = rap.span() / cfg.n_grid as f64;
    let table = PosteriorTable::new(p, rap, &grid)?;
    let weights: Vec<f64> = grid.iter().map(|&t| rap.weight_unchecked(t)).collect();
    let diag = diagnostic_nodes(n);

    let m = p.ncols();
    let flat: Vec<f64> =
        p.p.row_iter()
            .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
            .collect();
    let mut cum = Vec::with_capacity(flat.len());
    let mut acc = 0.0;
    for v in &flat {
        acc += v;
        cum.push(acc);
    }
    let total = acc;

    let one_path = |id: usize| -> Result<PathSummary> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64);
        let target = rng.random::<f64>() * total;
        let cell = cum.partition_point(|&c| c <= target).min(flat.len() - 1);
        let (u, j) = (cell / m, cell % m);
        let (x0, x1) = (p.row_support[u], p.col_support[j]);

        let (a, b) = sample_bridge_and_driver(rap, &grid, &mut rng);
        let mut i = Vec::with_capacity(n);
        let mut mpath = Vec::with_capacity(n);
        for k in 0..n {
            let ik = table.g0[k] * x0 + rap.g1(grid[k]) * x1 + a[k];
            i.push(ik);
            mpath.push(table.mean(u, k, x0, ik));
        }
        let mut integral = 0.0;
        for k in 0..n - 1 {
            let f0 = (x1 - mpath[k]).powi(2) * weights[k];
            let f1 = (x1 - mpath[k + 1]).powi(2) * weights[k + 1];
            integral += 0.5 * dt * (f0 + f1);
        }
        // Pathwise dW = dB + (x1 - M)/(t1 - t) dt; the drift vanishes at t1
        // because M converges to x1 faster than any power of t1 - t.
        let mut w = Vec::with_capacity(n + 1);
        let mut drift_int = 0.0;
        w.push(0.0);
        for k in 1..=n {
            let g0 = (x1 - mpath[k - 1]) / (rap.t1 - grid[k - 1]);
            let (g1, b_k) = if k < n {
                ((x1 - mpath[k]) / (rap.t1 - grid[k]), b[k])
            } else {
                (
                    0.0,
                    b[n - 1] + dt.sqrt() * rng.sample::<f64, _>(StandardNormal),
                )
            };
            drift_int += 0.5 * dt * (g0 + g1);
            w.push(b_k + drift_int);
        }
        let w_t1 = w[n];
        let record = PathRecord {
            path_id: id,
            x0,
            x1,
            i,
            m: mpath,
            w: Vec::new(),
        };
        Ok(PathSummary {
            integral,
            x1,
            w_t1,
            m_diag: diag.iter().map(|&k| record.m[k]).collect(),
            pin_start: (record.m[0] - x0).abs(),
            pin_end: (record.m[n - 1] - x1).abs(),
            record: cfg.keep_paths.then_some(PathRecord { w, ..record }),
        })
    };

    let summaries: Vec<PathSummary> = (0..cfg.n_paths)
        .into_par_iter()
        .map(one_path)
        .collect::<Result<_>>()?;

    let integral = MeanSe::from_samples(summaries.iter().map(|s| s.integral));
    let estimate = McEstimate {
        value: integral.mean,
        std_error: integral.se,
        n_paths: cfg.n_paths,
        grid_size: n,
        tail_bias_bound: tail_bound(&p.col_support, rap, dt),
    };

    let w_t1 = MeanSe::from_samples(summaries.iter().map(|s| s.w_t1));
    let var_w_t1 = MeanSe::from_samples(summaries.iter().map(|s| (s.w_t1 - w_t1.mean).powi(2)));
    let innovations = InnovationStats {
        w_t1,
        var_w_t1: MeanSe {
            mean: var_w_t1.mean * cfg.n_paths as f64 / (cfg.n_paths - 1) as f64,
            se: var_w_t1.se,
        },
        x1_w_t1: MeanSe::from_samples(summaries.iter().map(|s| s.x1 * s.w_t1)),
    };

    let mut increments = Vec::new();
    for a in 0..diag.len() {
        for b in a + 1..diag.len() {
            for h in ["1", "id"] {
                let stat = MeanSe::from_samples(summaries.iter().map(|s| {
                    let ms = s.m_diag[a];
                    let hv = if h == "1" { 1.0 } else { ms };
                    (s.m_diag[b] - ms) * hv
                }));
                increments.push(IncrementStat {
                    s: grid[diag[a]],
                    t: grid[diag[b]],
                    h,
                    stat,
                });
            }
        }
    }
    let mean_path = diag
        .iter()
        .enumerate()
        .map(|(a, &k)| {
            (
                grid[k],
                MeanSe::from_samples(summaries.iter().map(|s| s.m_diag[a])),
            )
        })
        .collect();
    let diagnostics = MartingaleReport {
        increments,
        mean_path,
        pin_start: summaries.iter().map(|s| s.pin_start).fold(0.0, f64::max),
        pin_end: MeanSe::from_samples(summaries.iter().map(|s| s.pin_end)),
    };

    let paths = summaries.into_iter().filter_map(|s| s.record).collect();
    Ok(Simulation {
        bundle: PathBundle {
            grid,
            paths,
            n_paths: cfg.n_paths,
            seed: cfg.seed,
        },
        estimate,
        innovations,
        diagnostics,
    })
}

/// Martingale diagnostics recomputed from the kept paths of a bundle.
pub fn martingale_diagnostics(bundle: &PathBundle) -> Result<MartingaleReport> {
    if bundle.paths.len() < 2 {
        return Err(Error::Domain("bundle keeps fewer than 2 paths".into()));
    }
    let n = bundle.grid.len();
    let diag = diagnostic_nodes(n);
    let paths = &bundle.paths;
    let mut increments = Vec::new();
    for a in 0..diag.len() {
        for b in a + 1..diag.len() {
            for h in ["1", "id"] {
                let (ka, kb) = (diag[a], diag[b]);
                let stat = MeanSe::from_samples(paths.iter().map(|p| {
                    let hv = if h == "1" { 1.0 } else { p.m[ka] };
                    (p.m[kb] - p.m[ka]) * hv
                }));
                increments.push(IncrementStat {
                    s: bundle.grid[ka],
                    t: bundle.grid[kb],
                    h,
                    stat,
                });
            }
        }
    }
    Ok(MartingaleReport {
        increments,
        mean_path: diag
            .iter()
            .map(|&k| {
                (
                    bundle.grid[k],
                    MeanSe::from_samples(paths.iter().map(|p| p.m[k])),
                )
            })
            .collect(),
        pin_start: paths
            .iter()
            .map(|p| (p.m[0] - p.x0).abs())
            .fold(0.0, f64::max),
        pin_end: MeanSe::from_samples(paths.iter().map(|p| (p.m[n - 1] - p.x1).abs())),
    })
}

/// Long-format CSV `path_id,t,I,M,W` of the kept paths; the final row of each
/// path is `t1` with `I = M = x1`.
pub fn write_paths_csv<W: std::io::Write>(bundle: &PathBundle, t1: f64, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["path_id", "t", "I", "M", "W"])?;
    for p in &bundle.paths {
        for (k, &t) in bundle.grid.iter().enumerate() {
            w.write_record(&[
                p.path_id.to_string(),
                format!("{t:?}"),
                format!("{:?}", p.i[k]),
                format!("{:?}", p.m[k]),
                format!("{:?}", p.w[k]),
            ])?;
        }
        w.write_record(&[
            p.path_id.to_string(),
            format!("{t1:?}"),
            format!("{:?}", p.x1),
            format!("{:?}", p.x1),
            format!("{:?}", p.w[bundle.grid.len()]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
