//! Synthetic degradation corpus, PNG interchange, dequantization and
//! unpaired batching.

pub mod batch;
pub mod corpus;
pub mod error;
pub mod image;
pub mod synth;

pub use batch::{BatchConfig, UnpairedBatch, UnpairedSampler};
pub use corpus::{Corpus, CorpusSplit, Sample, ThetaRecord};
pub use error::{DataError, Result};
pub use image::{read_png, write_png, RgbImage};
pub use synth::{degrade, procedural_hr, synth_corpus, DegradationParams};
