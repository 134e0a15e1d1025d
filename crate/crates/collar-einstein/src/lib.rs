//! Numerical construction of conformally compact Einstein metrics on a
//! collar neighborhood of infinity.
//!
//! The crate builds anisotropic model metrics on `M x (0, 1]`, corrects them
//! with expansion terms so the Einstein residual is small, and then runs a
//! gauge-fixed Picard iteration whose right inverse is assembled from
//! Fourier mode analysis on the fiber, a half-space boundary-value theory,
//! and an integral compatibility functional.  A command-line driver exposes
//! each stage; see the repository README for the file formats and the
//! acceptance checks.

// Index-heavy tensor arithmetic: explicit indices keep the code aligned
// with the formulas, and `!(x > 0)` guards are NaN-rejecting on purpose.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fg;
pub mod fiber;
pub mod field;
pub mod geom;
pub mod grid;
pub mod linalg;
pub mod modes;
pub mod pack;

pub use error::{Error, Result};
