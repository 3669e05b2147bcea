//! Weakly supervised semantic segmentation from image-level labels, with
//! LLM-generated category clusters injected as extra tokens.
//!
//! The pipeline stages live in their own modules:
//!
//! - [`llm`]: chat-completion gateway with caching and scripted mocks
//! - [`cluster`]: LLM-driven category clustering and cluster vectors
//! - [`encoder`]: ViT patch encoder
//! - [`fusion`]: cluster-token embedding, fusion, and BiLSTM refinement
//! - [`head`]: patch classification, top-k pooling, multi-label loss
//! - [`train`]: optimization loop, checkpointing, metrics
//! - [`pseudo`]: pseudo-label generation (upsampling, argmax, PNG masks)
//! - [`crf`]: dense CRF mean-field refinement
//! - [`miou`]: segmentation evaluation
//! - [`data`]: synthetic dataset generation and on-disk dataset ingestion
//! - [`pipeline`]: end-to-end orchestration

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod head;
pub mod llm;
pub mod miou;
pub mod nn;
pub mod pipeline;
pub mod pseudo;
pub mod train;

pub use error::{PccError, Result};
