//! Text-guided image attribute manipulation.

pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};

pub use candle_core::{DType, Device, Tensor};
pub use image::{GrayImage, RgbImage};

pub use checkpoint::{load_editor, CheckpointKind, CheckpointManifest};
pub use data::{CaptionedImage, DatasetKind, Split};
pub use eval::{EvalReport, HeatmapSet, PixelLosses};
pub use generator::GeneratorMode;
pub use model::Editor;
pub use synth::SynthCorpus;
pub use text::Vocabulary;
pub use train::{RunOptions, TrainingConfig};
