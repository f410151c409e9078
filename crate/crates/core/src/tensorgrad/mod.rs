//! Dense math with analytic gradients.
//!
//! Value-level operations ([`affine`], [`softmax`], [`l2_normalize`],
//! [`cosine_sim`]) work on [`DenseVec`]/[`DenseMat`]. Training builds the
//! same computations on a [`Tape`] and differentiates one scalar loss per
//! reverse sweep. [`grad_check`] verifies tape gradients against central
//! differences.

mod check;
mod dense;
mod tape;

pub use check::grad_check;
pub use dense::{affine, cosine_sim, l2_normalize, softmax, DenseMat, DenseVec};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};

pub(crate) use dense::{dot, normalize_raw, sigmoid};
