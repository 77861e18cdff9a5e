//! Edge segmentation inference engine.
//!
//! - [`tensor`]: logical tensors over physical buffers with swappable layouts
//! - [`ops`]: reference operators
//! - [`graph`]: operator DAG, scheduler, layout planner, multi-output fusion, executor
//! - [`weights`]: named weight store and its binary file format
//! - [`zoo`]: encoder/decoder builders for the architecture search space
//! - [`analysis`]: static parameter and operation counts
//! - [`metrics`]: IoU, boundary F-measure and the soft Jaccard loss
//! - [`train`]: gradient descent on small pointwise graphs
//! - [`pipeline`]: frame pipeline simulator
//! - [`pnm`]: PGM/PPM image files

pub mod analysis;
pub mod graph;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod pnm;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod zoo;
