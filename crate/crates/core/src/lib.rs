//! Two-stage brain extraction for T1-weighted MRI: a low-resolution LinkNet
//! finds the brain's bounding box, a second network segments the crop at
//! high resolution.

pub mod augment;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod train;
pub mod volume;

pub use config::{Profile, ToolConfig};
pub use error::{Error, Result};
pub use evaluate::DiceReport;
pub use nn::{NetworkWeights, WeightSet};
pub use pipeline::{Extraction, Extractor, Mode, PipelineConfig, View};
pub use postprocess::BinaryMask;
pub use volume::{BoundingBox, Volume};
