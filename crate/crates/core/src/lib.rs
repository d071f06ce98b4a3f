//! Dataset distillation with a committee of pre-trained backbones.
//!
//! The pipeline runs in stages: `squeeze` pre-trains each backbone,
//! `prior` scores each one alone, `recover` synthesizes images against a
//! weighted committee subset, and `posteval` trains a fresh student on the
//! result with batch-specific soft labels. [`pipeline`] wires the stages to
//! an on-disk artifact store.

pub mod analysis;
pub mod augment;
pub mod data;
pub mod digest;
pub mod error;
pub mod loss;
pub mod model_zoo;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod posteval;
pub mod prior;
pub mod recover;
pub mod rng;
pub mod softlabel;
pub mod squeeze;
pub mod tensor;
pub mod voting;

pub use error::{Error, ErrorClass, Result};
