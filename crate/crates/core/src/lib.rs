//! Many-scenario modeling toolkit: a meta-learned shared heavy model,
//! per-scenario fine-tuning, and FLOPs-budgeted light model search with
//! distillation, on synthetic scenario families.

pub mod arch;
pub mod budgetnas;
pub mod error;
pub mod flopsmeter;
pub mod hpo;
pub mod io;
pub mod metaengine;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
