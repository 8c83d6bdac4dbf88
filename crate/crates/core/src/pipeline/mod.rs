//! Clip ingestion, preprocessing, training, feature extraction and
//! benchmarking.

pub mod bench;
pub mod clip;
pub mod features;
pub mod motion;
pub mod preprocess;
pub mod selftest;
pub mod train;

pub use clip::{sample_clips, ClipSource, Frame, SampleMode};
pub use features::extract_features;
pub use motion::{make_motion_dataset, LabeledClips};
pub use preprocess::{preprocess, Crop, Flip, Preprocess};
pub use train::{train, TrainConfig, TrainLog, TrainRecord};
