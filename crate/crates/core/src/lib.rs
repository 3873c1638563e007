//! Fine-grained fashion vision-language pre-training.
//!
//! Fashion symbols group dataset categories into nine concepts, attribute prompts turn
//! structured annotations into text, and five joint objectives train text, image and fusion
//! encoders. Downstream heads cover retrieval, category recognition, text-modified image
//! retrieval and cross-attention Grad-CAM.

pub mod data_io;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod pretrain;
pub mod taxonomy;
pub mod textpipe;

pub use error::{Error, Result};
