//! Multimodal-to-multimodal distillation for action recognition that stays
//! usable when modalities go missing.
//!
//! A large teacher (frozen encoders, wide fusion transformer) is trained
//! with modality dropout, then distilled into a small student whose
//! encoders, fusion block and heads are all trainable. Absent modalities
//! are replaced by learned tokens, so the fusion input has a fixed shape,
//! and per-modality token counts are shrunk with contiguous group means.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod modality;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod reduction;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
