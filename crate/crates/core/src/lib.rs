//! Communication-efficient sparse model training with quantized adaptive
//! subgradient methods.
//!
//! The crate simulates synchronous data-parallel training of 1-regularized
//! linear models where both the per-worker gradients and the server-side
//! aggregate are compressed to ternary form before transmission:
//!
//! * [`quantize`] — ternary gradient quantizers (stochastic, optimal
//!   threshold, fast approximate threshold) plus a brute-force oracle.
//! * [`codec`] — the bit-exact wire format for sparse quantized gradient
//!   messages (scaler + indicator bitmap + 2-bit codes).
//! * [`optimizer`] — composite mirror descent, regularized dual averaging,
//!   and proximal gradient update rules with per-coordinate adaptive steps.
//! * [`data`] — sparse examples, LIBSVM ingestion, logistic loss/gradient,
//!   and a synthetic sparse-ground-truth generator.
//! * [`engine`] — the round-based worker/server simulation that exchanges
//!   encoded messages and accounts every transmitted bit.
//! * [`diagnostics`] — regret and norm-inequality audits over recorded
//!   training traces.
//!
//! The per-round worker loop is data-parallel; with the default `parallel`
//! feature it runs on rayon, and it can always be forced onto the sequential
//! reference path (see [`engine::Engine::set_parallel`]). Both paths produce
//! bitwise-identical traces.

pub mod codec;
pub mod data;
pub mod diagnostics;
pub mod engine;
mod error;
pub mod optimizer;
pub mod quantize;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
