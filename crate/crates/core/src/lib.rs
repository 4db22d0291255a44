//! Deep Comparison Network: few-shot image classification by learned,
//! deeply supervised comparison at every level of a feature hierarchy.
//!
//! The toolkit covers the full experimental loop: synthetic or directory
//! datasets with disjoint-class splits ([`data`]), a staged embedding
//! network with an optional learned-noise regularizer ([`embedding`]), a
//! column of chained relation modules ([`relation`]), the three-phase
//! training procedure ([`train`]), episodic evaluation and per-module
//! analyses ([`eval`]), and a config-driven CLI ([`cli`]).

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod nn;
pub mod relation;
pub mod seed;
pub mod train;

pub use error::{DcnError, Result};
