//! Projected gradient ascent with iterate averaging.
//!
//! With `G` an upper bound on the gradient norm over the polytope and `δ` an
//! upper bound on its diameter, `Θ = 4⌈δ² G² / ε²⌉` steps of size
//! `λ = ε / (2 G²)` give an average iterate within `ε` of the maximum.
//!
//! Every iterate differs from the optimum by a feasible direction, and
//! projecting `π + λ g` onto the polytope equals projecting `π + λ P_T g`
//! where `P_T` is the orthogonal projection onto the null space of the
//! equality constraints. The bound therefore only needs the tangential part
//! of the gradient, which is what `G` measures here.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coupling::{validate_coupling, Coupling, CouplingResiduals, MartingaleProjector};
use crate::error::{Error, Result};
use crate::fam::RapConfig;
use crate::measures::EmpiricalMeasure;
use crate::objective::{evaluate, FEASIBILITY_TOL};
use crate::quadrature::QuadratureSpec;

pub const DEFAULT_THETA_CAP: usize = 100_000;
pub const DEFAULT_GRAD_SAMPLES: usize = 16;
/// Multiplier applied to the sampled maximum gradient norm.
pub const GRAD_SAFETY: f64 = 2.0;

#[derive(Debug, Clone, Serialize)]
pub struct SolverParams {
    pub epsilon: f64,
    pub grad_bound: f64,
    pub delta: f64,
    pub lambda: f64,
    pub theta: usize,
    /// `4⌈δ² G² / ε²⌉` before capping, as a float since it can be huge.
    pub theta_required: f64,
    pub max_theta_cap: usize,
    pub seed: u64,
}

/// Optional replacements for the derived solver settings.
#[derive(Debug, Clone, Default)]
pub struct SolverOverrides {
    pub init: Option<Coupling>,
    pub grad_bound: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub theta: Option<usize>,
    pub max_theta_cap: Option<usize>,
    pub grad_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IterRecord {
    pub value: f64,
    pub grad_norm: f64,
    /// Largest constraint residual of the iterate.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub coupling_avg: Coupling,
    pub value: f64,
    pub best_iterate: Coupling,
    pub best_iterate_value: f64,
    /// Final iterate `π^(Θ)`.
    pub last_iterate: Coupling,
    pub history: Vec<IterRecord>,
    pub params_used: SolverParams,
    pub residuals: CouplingResiduals,
    pub warnings: Vec<String>,
}

/// `GRAD_SAFETY` times the largest tangential gradient norm over `n_samples`
/// random feasible couplings plus the anchor.
pub fn estimate_grad_bound(
    projector: &MartingaleProjector,
    rap: &RapConfig,
    quad: &QuadratureSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if projector.dimension() == 0 {
        return Ok(0.0);
    }
    let anchor = projector.anchor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = tangent_grad_norm(projector, &anchor, rap, quad)?;
    for _ in 0..n_samples {
        let p = projector.sample_feasible(&anchor, &mut rng)?;
        best = best.max(tangent_grad_norm(projector, &p, rap, quad)?);
    }
    Ok(GRAD_SAFETY * best)
}

fn tangent_grad_norm(
    projector: &MartingaleProjector,
    p: &Coupling,
    rap: &RapConfig,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let g = evaluate(p, rap, quad)?.gradient;
    Ok(projector.project_tangent(&g).norm())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{name} must be positive and finite (got {v})"
        )))
    }
}

fn max_residual(p: &DMatrix<f64>, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    Ok(validate_coupling(p, mu, nu)?.max())
}

pub fn solve(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    rap: &RapConfig,
    quad: &QuadratureSpec,
    epsilon: f64,
    overrides: &SolverOverrides,
    seed: u64,
) -> Result<SolveResult> {
    check_positive("epsilon", epsilon)?;
    let projector = MartingaleProjector::new(mu, nu)?;
    let mut warnings = Vec::new();

    let init = match &overrides.init {
        Some(c) => projector.project_default(&c.p)?,
        None => projector.anchor()?,
    };
    let cap = overrides.max_theta_cap.unwrap_or(DEFAULT_THETA_CAP).max(1);

    if projector.dimension() == 0 {
        let ev = evaluate(&init, rap, quad)?;
        let residuals = validate_coupling(&init.p, mu, nu)?;
        return Ok(SolveResult {
            value: ev.value,
            best_iterate_value: ev.value,
            history: vec![IterRecord {
                value: ev.value,
                grad_norm: ev.gradient.norm(),
                residual: residuals.max(),
            }],
            params_used: SolverParams {
                epsilon,
                grad_bound: 0.0,
                delta: 0.0,
                lambda: 0.0,
                theta: 1,
                theta_required: 1.0,
                max_theta_cap: cap,
                seed,
            },
            best_iterate: init.clone(),
            last_iterate: init.clone(),
            coupling_avg: init,
            residuals,
            warnings: vec!["feasible set is a single point; no iterations needed".into()],
        });
    }

    let grad_bound = match overrides.grad_bound {
        Some(g) => {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Domain(format!(
                    "grad_bound must be finite and >= 0 (got {g})"
                )));
            }
            g
        }
        None => estimate_grad_bound(
            &projector,
            rap,
            quad,
            overrides.grad_samples.unwrap_or(DEFAULT_GRAD_SAMPLES),
            seed,
        )?,
    };
    let delta = overrides
        .delta
        .unwrap_or_else(|| projector.diameter_bound());
    check_positive("delta", delta)?;

    let theta_required = if grad_bound == 0.0 {
        1.0
    } else {
        4.0 * (delta * delta * grad_bound * grad_bound / (epsilon * epsilon)).ceil()
    };
    let mut theta = match overrides.theta {
        Some(t) => t.max(1),
        None => {
            if theta_required > cap as f64 {
                cap
            } else {
                theta_required as usize
            }
        }
    };
    if theta > cap {
        theta = cap;
    }
    if (theta as f64) < theta_required {
        warnings.push(format!(
            "iteration count capped at {theta}; the guarantee needs {theta_required:.3e}"
        ));
    }
    let lambda = match overrides.lambda {
        Some(l) => {
            check_positive("lambda", l)?;
            l
        }
        None if grad_bound == 0.0 => 0.0,
        None => epsilon / (2.0 * grad_bound * grad_bound),
    };
    if overrides.lambda.is_some() || overrides.grad_bound.is_some() || overrides.delta.is_some() {
        warnings
            .push("step settings overridden; the epsilon guarantee assumes derived values".into());
    }

    let (l, m) = (mu.len(), nu.len());
    let mut current = init;
    let mut sum = DMatrix::<f64>::zeros(l, m);
    let mut history = Vec::with_capacity(theta);
    let mut best_iterate = current.clone();
    let mut best_iterate_value = f64::NEG_INFINITY;
    for _ in 0..theta {
        let ev = evaluate(&current, rap, quad)?;
        let residual = max_residual(&current.p, mu, nu)?;
        history.push(IterRecord {
            value: ev.value,
            grad_norm: ev.gradient.norm(),
            residual,
        });
        if ev.value > best_iterate_value {
            best_iterate_value = ev.value;
            best_iterate = current.clone();
        }
        sum += &current.p;
        if lambda > 0.0 {
            let step = &current.p + ev.gradient * lambda;
            current = projector.project_default(&step)?;
        }
    }

    let avg = Coupling::new(sum / theta as f64, mu, nu)?;
    let residuals = validate_coupling(&avg.p, mu, nu)?;
    if !residuals.within(FEASIBILITY_TOL) {
        return Err(Error::Numerical(format!(
            "averaged coupling violates constraints by {:.3e}",
            residuals.max()
        )));
    }
    let value = evaluate(&avg, rap, quad)?.value;
    Ok(SolveResult {
        coupling_avg: avg,
        value,
        best_iterate,
        best_iterate_value,
        last_iterate: current,
        history,
        params_used: SolverParams {
            epsilon,
            grad_bound,
            delta,
            lambda,
            theta,
            theta_required,
            max_theta_cap: cap,
            seed,
        },
        residuals,
        warnings,
    })
}

/// Result of checking `K(b) - K(a) <= <∇K(a), b - a>` on random feasible
/// pairs, the first-order inequality the ε-bound relies on.
#[derive(Debug, Clone, Serialize)]
pub struct ConcavityAudit {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `K(b) - K(a) - <∇K(a), b - a>` seen (positive = violation).
    pub worst_gap: f64,
}

pub fn first_order_audit(
    projector: &MartingaleProjector,
    rap: &RapConfig,
    quad: &QuadratureSpec,
    pairs: usize,
    tol: f64,
    seed: u64,
) -> Result<ConcavityAudit> {
    let anchor = projector.anchor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = ConcavityAudit {
        pairs,
        violations: 0,
        worst_gap: f64::NEG_INFINITY,
    };
    for _ in 0..pairs {
        let a = projector.sample_feasible(&anchor, &mut rng)?;
        let b = projector.sample_feasible(&anchor, &mut rng)?;
        let ea = evaluate(&a, rap, quad)?;
        let vb = evaluate(&b, rap, quad)?.value;
        let gap = vb - ea.value - ea.gradient.dot(&(&b.p - &a.p));
        audit.worst_gap = audit.worst_gap.max(gap);
        if gap > tol {
            audit.violations += 1;
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn sym(a: f64) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(vec![-a, a]).unwrap()
    }

    fn setup() -> (RapConfig, QuadratureSpec) {
        let rap = RapConfig::brownian(0.0, 1.0).unwrap();
        let quad = QuadratureSpec::default_for(&rap).unwrap();
        (rap, quad)
    }

    #[test]
    fn forced_instance_returns_the_point() {
        let (rap, quad) = setup();
        let r = solve(
            &sym(1.0),
            &sym(2.0),
            &rap,
            &quad,
            0.01,
            &SolverOverrides::default(),
            1,
        )
        .unwrap();
        let want = dmatrix![0.375, 0.125; 0.125, 0.375];
        assert!((&r.coupling_avg.p - want).norm() < 1e-8);
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn dirac_source_is_forced() {
        let (rap, quad) = setup();
        let nu = EmpiricalMeasure::new(vec![-1.0, 0.5, 2.0], vec![0.4, 0.4, 0.2]).unwrap();
        let nu = nu.shifted(-nu.mean());
        let d0 = EmpiricalMeasure::dirac(0.0).unwrap();
        let r = solve(&d0, &nu, &rap, &quad, 0.01, &SolverOverrides::default(), 1).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(r.coupling_avg.p[(0, j)], nu.weights()[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn single_point_grad_bound() {
        let (rap, quad) = setup();
        let proj = MartingaleProjector::new(&sym(1.0), &sym(2.0)).unwrap();
        let g = estimate_grad_bound(&proj, &rap, &quad, 3, 0).unwrap();
        // Tangent space is {0}.
        assert_eq!(g, 0.0);
    }

    #[test]
    fn rejects_bad_epsilon_and_infeasible() {
        let (rap, quad) = setup();
        let o = SolverOverrides::default();
        assert!(solve(&sym(1.0), &sym(2.0), &rap, &quad, 0.0, &o, 1).is_err());
        assert!(matches!(
            solve(&sym(2.0), &sym(1.0), &rap, &quad, 0.1, &o, 1),
            Err(Error::NotConvexOrder { .. })
        ));
    }

    #[test]
    fn capped_run_warns_and_stays_feasible() {
        let (rap, quad) = setup();
        let nu = EmpiricalMeasure::uniform(vec![-2.0, 0.0, 2.0]).unwrap();
        let o = SolverOverrides {
            max_theta_cap: Some(5),
            grad_samples: Some(2),
            ..Default::default()
        };
        let r = solve(&sym(1.0), &nu, &rap, &quad, 1e-3, &o, 3).unwrap();
        assert_eq!(r.history.len(), 5);
        assert!(!r.warnings.is_empty());
        assert!(r.residuals.within(1e-8));
        assert!(r.history.iter().all(|h| h.residual <= 1e-8));
        let again = solve(&sym(1.0), &nu, &rap, &quad, 1e-3, &o, 3).unwrap();
        assert_eq!(
            r.history
                .iter()
                .map(|h| h.value.to_bits())
                .collect::<Vec<_>>(),
            again
                .history
                .iter()
                .map(|h| h.value.to_bits())
                .collect::<Vec<_>>()
        );
    }
}
