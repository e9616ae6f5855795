//! Attention-augmented convolutional forecasting for fixed-length
//! multivariate time series.
//!
//! The crate builds HEART models — a spatio-temporal convolutional
//! encoder-decoder preceded by a per-feature attention preprocessor —
//! on top of a small reverse-mode autodiff engine, and ships the
//! training loop, data pipeline, and experiment harness used to
//! measure how much each attention variant reduces forecast MSE over
//! the attention-free baseline.
//!
//! Layering, bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors, a pinned seeded PRNG, and the
//!   autodiff [`tensor::Graph`].
//! * [`attention`] — the eight attention variants plus the identity
//!   baseline, all mapping `[S, F, T]` to `[S, F, T]`.
//! * [`model`] — encoder, decoder, regressor, and the composed
//!   [`model::HeartModel`] with checkpointing.
//! * [`training`] — MSE loss, Adam, chronological splits, and the
//!   early-stopping training loop.
//! * [`data`] — CSV panels, lag features, windowing, standardization,
//!   and a synthetic generator with planted structure.
//! * [`experiment`] / [`report`] — grid runs, percent-MSE-reduction
//!   tables, and SVG figures.
//!
//! The `heart-cli` crate exposes all of this as `heart synth | train |
//! grid | report | validate-data`.

pub mod attention;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

// The guide's code snippets double as doctests so they can never
// drift from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(tensors_and_autograd, "../../../book/src/tensors-and-autograd.md");
    chapter!(attention_variants, "../../../book/src/attention-variants.md");
    chapter!(forecasting_model, "../../../book/src/forecasting-model.md");
    chapter!(training_loop, "../../../book/src/training.md");
    chapter!(data_pipeline, "../../../book/src/data-pipeline.md");
    chapter!(experiments, "../../../book/src/experiments.md");
}
