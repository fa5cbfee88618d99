//! Iterative chain-of-thought debiasing for text-to-image generation.
//!
//! The engine asks a reasoner for a chain of thought (CoT), generates images
//! with it, measures demographic diversity and prompt alignment, and asks the
//! reasoner to think again while diversity keeps improving and alignment
//! stays above a floor. Converged CoTs go into a demonstration pool and are
//! adapted to new professions at inference time.
//!
//! All models sit behind the ports in [`backends`]; the simulated backend
//! makes every pipeline runnable offline and deterministic.

pub mod backends;
pub mod embedding;
pub mod metrics;
pub mod multiface;
pub mod predictor;
pub mod schema;
pub mod seeds;
pub mod refine;
pub mod pool;
pub mod pipeline;
pub mod manifest;
pub mod analysis;
pub mod runner;
