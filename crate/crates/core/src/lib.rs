//! Differentiable nonlinear model predictive control for learning driving
//! styles from demonstrations.
//!
//! The pipeline runs from a feature network to NMPC cost parameters to the
//! low-level action, and gradients flow back through the optimizer via the
//! implicit function theorem applied to the KKT conditions.

pub mod demos;
pub mod dual;
pub mod eval;
pub mod nlp;
pub mod nmpc;
pub mod policy;
pub mod sensitivity;
pub mod track;
pub mod training;
pub mod vehicle;
