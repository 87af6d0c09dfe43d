//! Sleep staging from single-channel EEG with contrastive pre-training.
//!
//! The crate covers the whole pipeline:
//!
//! * [`ingest`]: EDF/EDF+ parsing, hypnogram decoding and 30-s epoch segmentation.
//! * [`augment`]: the Cropping and Permutation view transforms.
//! * [`contrastive`]: cosine similarity, NT-Xent with its pairing targets, and
//!   the cross-subject (inter-subject correlation) feature construction.
//! * [`nn`]: a small reverse-mode autodiff engine over dense tensors.
//! * [`model`]: MViTime, a 1D MobileViT with projection and classification heads.
//! * [`train`]: contrastive pre-training, fine-tuning and backbone combination.
//! * [`eval`]: confusion matrices, F1 reporting and leave-one-subject-out splits.
//! * [`pipeline`]: run configuration and the experiment drivers behind the CLI.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod contrastive;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod train;
