//! Questionnaire-grounded personality detection.
//!
//! Users' posts are turned into role-play answers to questionnaire items
//! (`ask`), a question-conditioned mixture of experts learns to predict those
//! answers from embeddings (`moe`), and the predicted answers are fused with
//! the post embedding to classify the four type dimensions (`detect`).

pub mod ask;
pub mod data;
pub mod detect;
pub mod encode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod nn;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
