//! PET/CT lesion grounding toolkit: report parsing, SUV-guided lesion
//! segmentation, focal crops, a reference token-fusion encoder and caption
//! metrics.

pub mod config;
pub mod focal;
pub mod fusion;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod seg;
pub mod volume;
