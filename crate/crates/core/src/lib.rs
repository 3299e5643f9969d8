//! Feedback-guided diffusion sampling for long-tailed classification.
//!
//! The crate covers the full toy pipeline: a reverse-mode autodiff tape
//! ([`ndiff`]), the noise schedule and DDIM updates ([`schedule`]), the
//! conditional denoiser, classifier and instance encoder ([`models`]),
//! sample-level criteria ([`criteria`]), the guided sampler ([`sampler`]),
//! synthetic data ([`data`]), training loops ([`train`]) and evaluation
//! ([`metrics`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod ndiff;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod train;
