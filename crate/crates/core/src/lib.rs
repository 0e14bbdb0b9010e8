//! Federated fine-tuning with low-rank adapters.
//!
//! Clients train rank-`r_k` adapters `ΔW_k = B_k A_k` against a shared frozen
//! weight. The server combines them by stacking (`FLoRA`), by averaging the
//! factors (`FedIT`), or by zero-padding to a common rank and averaging. Only
//! stacking reproduces the weighted sum of client updates exactly, for any mix
//! of ranks.

pub mod aggregation;
pub mod comm;
pub mod config;
pub mod data;
mod digest;
pub mod error;
pub mod fed_sim;
pub mod lora;
pub mod report;
pub mod rng;
pub mod training;
pub mod verify;

pub use error::{FloraError, Result};
