//! Policy iteration for infinite-horizon linear-quadratic control of
//! Itô systems with state- and control-dependent noise
//!
//! ```text
//! dx = (A x + B u) ds + (C x + D u) dw
//! ```
//!
//! Two solvers share one set of types:
//!
//! * [`model_pi`] iterates the generalized Lyapunov equation and the gain
//!   update with full model knowledge. It is the reference solution.
//! * [`adp`] recovers the same iterates from trajectory expectations alone
//!   (the data matrices built in [`datagen`]), without touching `A, B, C, D`.
//!
//! [`datagen`] produces those expectations either by Monte Carlo over
//! Euler–Maruyama paths or exactly, by integrating the first and second
//! moment ODEs. The exact route is what makes the two solvers comparable
//! to rounding error.

pub mod adp;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eta_io;
pub mod matstack;
pub mod model_pi;
pub mod report;
pub mod runner;
pub mod stability;

pub use error::{Error, Result};

/// The bundled two-state, one-input example problem.
pub const BENCHMARK_JSON: &str = include_str!("../fixtures/benchmark.json");
