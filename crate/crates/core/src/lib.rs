//! Cluster-masked autoregressive and multi-task pretraining for an mLSTM
//! vision encoder with a masked-attention decoder.

pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod serialize;
pub mod train;

pub use error::{Error, Result};
