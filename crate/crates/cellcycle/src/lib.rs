//! Age and content structured cell division models.
//!
//! The crate computes the growth rate `lambda0` and the stable profile `N`
//! of a linear cell division model, its adjoint `phi`, time-dependent runs
//! that relax toward `N`, and a two-compartment extension with quiescent
//! cells. The guide in `book/` walks through each module.
//!
//! ```
//! use cellcycle::coefficients::{DivisionRate, GrowthField, ModelCoefficients, RepartitionKernel};
//! use cellcycle::eigensolver::{default_grid, solve, SolverOptions};
//!
//! let model = ModelCoefficients::new(
//!     GrowthField::logistic(1.0, 2.0).unwrap(),
//!     DivisionRate::constant_window(2.0, 1.0).unwrap(),
//!     RepartitionKernel::Uniform,
//! );
//! let options = SolverOptions::default();
//! let grid = default_grid(&model, 21, 0.05, &options).unwrap();
//! let sol = solve(&model, &grid, &options).unwrap();
//! assert!(sol.lambda0 > 0.0);
//! ```

// `!(v > 0.0)` is how parameter checks reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characteristics;
pub mod coefficients;
pub mod eigensolver;
pub mod error;
pub mod grid;
pub mod transport;
pub mod twophase;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/coefficients.md")]
    struct Coefficients;
    #[doc = include_str!("../../../book/src/characteristics.md")]
    struct Characteristics;
    #[doc = include_str!("../../../book/src/eigenproblem.md")]
    struct Eigenproblem;
    #[doc = include_str!("../../../book/src/transport.md")]
    struct Transport;
    #[doc = include_str!("../../../book/src/twophase.md")]
    struct TwoPhase;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
