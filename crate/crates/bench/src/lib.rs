//! Fixtures shared by the criterion benches.

use langedit_core::generator::GeneratorMode;
use langedit_core::model::{Editor, GanModel, ModelConfig};
use langedit_core::nn::device;
use langedit_core::synth::synth_generate;
use langedit_core::{DType, Result, Tensor, Vocabulary};

pub const CAPTION: &str = "the square is red";

/// Untrained model at 64², with the synthetic-corpus vocabulary.
pub fn editor(mode: GeneratorMode) -> Result<Editor> {
    let corpus = synth_generate(6, 1, 64)?;
    let vocab = Vocabulary::build(corpus.items.iter().flat_map(|i| i.captions.iter().map(String::as_str)));
    let config = ModelConfig::new(mode, 64, vocab.len());
    Ok(GanModel::new(config, vocab, 0, DType::F32)?.editor())
}

pub fn images(batch: usize, side: usize) -> Result<Tensor> {
    Ok(Tensor::rand(-1f32, 1.0, (batch, 3, side, side), &device())?)
}

/// Random `(features, words, projection)` for the attention core.
pub fn attention_inputs(batch: usize, m: usize, n: usize, d: usize, l: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let dev = device();
    Ok((
        Tensor::randn(0f32, 1.0, (batch, m, n), &dev)?,
        Tensor::randn(0f32, 1.0, (batch, d, l), &dev)?,
        Tensor::randn(0f32, 0.2, (m, d), &dev)?,
    ))
}
