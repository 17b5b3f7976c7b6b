//! Silhouette sequences: normalization, on-disk datasets, the synthetic
//! walker generator and P x K batch composition.

mod batch;
mod dataset;
mod frame;
mod synth;

pub use batch::{sample_batch, sequence_tensor, Batch, BatchSpec};
pub use dataset::{export_dataset, load_dataset, Condition, Dataset, SequenceRecord};
pub use frame::{normalize_frame, FrameImage, FG_THRESHOLD};
pub use synth::{synth_walkers, SYNTH_VIEWS};
