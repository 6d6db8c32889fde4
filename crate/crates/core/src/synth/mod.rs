//! Procedural stereo data, disparity files, dataset persistence and self-curation.

pub mod curation;
pub mod dataset;
pub mod generator;
pub mod pfm;

pub use dataset::Dataset;
pub use generator::{generate_sample, RgbImage, SampleMeta, StereoSample, SynthConfig, TextureKind};
pub use pfm::{read_pfm, write_pfm};
