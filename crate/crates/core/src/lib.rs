//! Desk-scale diffusion-based dataset distillation.
//!
//! A class-conditional diffusion model is trained on a synthetic Gaussian
//! mixture, fine-tuned with an inversion-matching objective, and used to
//! generate candidate subgroups per class; one subgroup per class is then
//! selected by a centroid-similarity objective. The resulting distilled set
//! is evaluated by training a fresh classifier on it.

pub mod classifier;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod finetune;
pub mod instability;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod schedule;
pub mod selection;
