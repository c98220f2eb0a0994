//! Dense tensors, reverse-mode differentiation, and stable scan primitives.

mod gradcheck;
mod graph;
mod scan;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use scan::{
    clamp_prob, cumsum, exclusive_cumprod, logsumexp, logsumexp_logprob, moving_sum, sigmoid, LogProb,
    PROB_FLOOR,
};
pub(crate) use scan::log_add;
pub use tensor::Tensor;
