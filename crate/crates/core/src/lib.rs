//! QLoRA finetuning engine and capacity planner.
//!
//! Low-rank adapters over block-quantized frozen weights, Adam and 0/1 Adam
//! with 1-bit compressed momentum exchange, simulated data-parallel training
//! and pipeline-parallel inference, evaluation metrics, and closed-form
//! parameter/size accounting.

mod codec;
pub mod error;
pub mod harness;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod parallel;
pub mod planner;
pub mod quant;

pub use error::{Error, Result};
