//! Computational toolkit for step-2 Carnot groups and the Engel group:
//! exact group arithmetic in exponential coordinates, horizontal curves as
//! control programs, explicit curve synthesis with certified constants,
//! Carnot-Caratheodory distance bracketing by control-word optimization,
//! directional-derivative and Pansu-differentiability probes, and covering
//! arithmetic for Hausdorff premeasure estimates.
//!
//! Distance values are never pretended to be exact: queries return a
//! [`distance::DistanceBracket`] holding a certified lower bound, a
//! witnessed upper bound, and the witness curve.

pub mod algebra;
pub mod curves;
pub mod diff;
pub mod distance;
pub mod engel;
pub mod error;
mod optim;
pub mod uds;

pub use error::{CarnotError, Result};
pub use optim::OptimizerBudget;
