//! Desk-scale laboratory for backdoored unlearning of a tiny autoregressive
//! transformer.
//!
//! The crate trains an instrumented decoder-only model on a synthetic fact
//! corpus, unlearns a targeted forget split with NPO or RMU, injects trigger
//! backdoors into the forget set, and measures recovery with attention-sink,
//! logit-trace, and value-norm diagnostics. Everything runs in f64 on CPU and
//! is bit-reproducible from a single seed.

pub mod corpus;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod poison;
pub mod rng;
pub mod sinks;
pub mod tensor;

// pub use eval::MetricsReport;
// temp
pub use rng::SeedRng;
pub use tensor::{Matrix, Tape, TensorError, TensorId};
