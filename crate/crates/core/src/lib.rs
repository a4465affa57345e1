//! Information-based martingale optimal transport on empirical marginals.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convexify;
pub mod coupling;
pub mod error;
pub mod fam;
pub mod measures;
pub mod objective;
pub mod optimizer;
pub mod quadrature;
pub mod simulate;

pub use convexify::{convexify_pair, ConvexifyResult};
pub use coupling::{independent_coupling, validate_coupling, Coupling, MartingaleProjector};
pub use error::{Error, Result};
pub use fam::RapConfig;
pub use measures::{convex_order_check, w1_distance, EmpiricalMeasure};
pub use objective::{evaluate, Evaluation};
pub use quadrature::{NoiseRule, QuadratureSpec};
pub use simulate::{simulate_fam, McEstimate, PathBundle, SimConfig, Simulation};
