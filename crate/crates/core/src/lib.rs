//! Learned Hamilton-Jacobi value functions with certified residual bounds.

// Negated comparisons reject NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bellman;
pub mod cegis;
pub mod certify;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod grid;
pub mod interval;
pub mod net;
pub mod reach;
pub mod real;
pub mod residuals;
pub mod value;

pub use config::{ControlBox, CostSpec, ProblemSpec, StateBox};
pub use dynamics::{Problem, System};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use expr::{ExprBuilder, ExprTree};
pub use grid::GridField;
pub use interval::Interval;
pub use net::NetParams;
pub use value::ValueFunction;
pub use cegis::{run_cegis, CegisOptions, CegisReport, CegisStatus};
pub use certify::{Certificate, CertifyOptions, Route, Status, Verdict};
pub use reach::{bracket, validate_bracket, BracketReport, EnclosurePair};
