//! Constant learning-rate SGD with heavy-ball momentum, a statistical
//! convergence diagnostic, and an automatic step-decay schedule.
//!
//! Constant-rate SGD(M) converges not to the optimum but to a stationary
//! oscillation around it, with radius proportional to the learning rate.
//! The moment that oscillation begins is detectable: the inner product of
//! successive stochastic gradients, summed over iterations, drifts upward
//! while progress is being made and drifts downward once the iterates are
//! bouncing inside the stationary region. This crate implements
//!
//! - the heavy-ball optimizer in iterate-difference form ([`optimizer`]),
//! - the running-sum diagnostic with an automatic momentum-reduction
//!   switch, since large momentum destroys the statistic's negative
//!   stationary drift ([`diagnostic`]),
//! - a step-decay schedule that drops the rate by a fixed factor each
//!   time the diagnostic fires ([`schedule`]),
//! - the closed-form expectations, moment tensors, and bound checks that
//!   validate the statistic's behavior on quadratic losses ([`theory`]),
//! - experiment drivers for error-rate evaluation, inner-product
//!   distribution statistics, ablations, and robustness sweeps
//!   ([`harness`]), and
//! - the loss models and data plumbing they run on ([`problems`]).
//!
//! Everything is deterministic given a seed: runs draw from independent
//! ChaCha12 streams ([`rng::RngStream`]) and replay bit-identically.

pub mod diagnostic;
pub mod error;
pub mod harness;
pub mod optimizer;
pub mod problems;
pub mod record;
pub mod rng;
pub mod schedule;
pub mod theory;
pub mod vector;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use vector::{cosine_similarity, dot, KahanSum, ParamVector};
