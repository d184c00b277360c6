//! Survival regression with hazard functions defined by autonomous ODE systems.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod ode;
pub mod simulate;
pub mod varselect;
