//! Monotonic chunkwise attention (MoChA) with a jointly trained CTC branch and
//! CTC-synchronous boundary training, built on a small double-precision
//! reverse-mode tape.

// Index loops mirror the recurrences they implement, and `!(x > 0.0)` is
// used on purpose so that NaN is rejected too.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod evaltool;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod selftest;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
