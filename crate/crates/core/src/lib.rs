//! Numerical laboratory for stochastic homogenization: random coefficient
//! fields, periodic-window cell problems, two-scale elliptic convergence,
//! harmonic-map heat flow, Landau–Lifshitz–Gilbert dynamics and Birkhoff
//! averages.

pub mod corrector;
pub mod elliptic;
pub mod ergodic;
pub mod error;
pub mod experiment;
pub mod field;
pub mod grid;
pub mod llg;
pub mod output;
pub mod rng;
pub mod smap;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
