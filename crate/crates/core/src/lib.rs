//! Heterogeneous treatment effects via causal forests grown on partial
//! least squares components.
//!
//! The pipeline projects covariates onto a few PLS components, grows an
//! honest causal forest in that low-dimensional space, and reports point
//! estimates with infinitesimal-jackknife intervals. Least squares, LASSO
//! and regression-tree importance are provided as comparators, and
//! [`simulation`] reproduces the Monte Carlo designs used to evaluate the
//! method.

pub mod baselines;
pub mod data;
pub mod error;
pub mod forest;
pub mod pipeline;
pub mod pls;
pub mod report;
pub mod simulation;
pub mod stats;

pub use error::{Error, ErrorClass, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/pls.md")]
    mod pls {}
    #[doc = include_str!("../../../book/src/forest.md")]
    mod forest {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

#[doc = include_str!("../../../README.md")]
#[cfg(doctest)]
pub struct ReadmeDoctests;
