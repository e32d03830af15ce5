//! Learned heightmap reconstruction on top of `hmap-core` and `hmap-nn`:
//! the EDS model, episode simulation, the on-disk dataset, both training
//! stages and the evaluation report.

pub mod container;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod eval;
pub mod model;
pub mod sequence;
pub mod stage1;
pub mod stage2;

pub use error::{PipelineError, Result};
