//! Two-score discriminator.
//!
//! The unconditional score looks only at the image: a sigmoid over a linear
//! head on globally pooled deep features. The conditional score matches
//! intermediate local features against projected word vectors: each word
//! gets a sigmoid matching score per region, regions are pooled with a
//! softmax attention, and words are averaged with softmax importance
//! weights. The discriminator owns its text encoder.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::WordProjection;
use crate::error::{Error, Result};
use crate::nn::{
    additive_mask, ensure_finite, leaky_relu, scalar, sigmoid, softmax, BatchNorm2d, Conv2d, Init,
    Linear, Mode,
};
use crate::text::{TextEncoder, TextEncoderConfig, TokenSequence, WordEmbeddings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    /// Output channels of the stride-2 feature stack.
    pub channels: Vec<usize>,
    /// Index into `channels` whose output feeds the matching head.
    pub local_layer: usize,
    pub text: TextEncoderConfig,
}

impl DiscriminatorConfig {
    pub fn new(image_size: usize, text: TextEncoderConfig) -> Self {
        let channels = match image_size {
            64 => vec![16, 32, 64, 64],
            _ => vec![32, 64, 128, 128],
        };
        Self {
            image_size,
            channels,
            local_layer: 2,
            text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.local_layer >= self.channels.len() {
            return Err(Error::Shape(format!(
                "local layer {} outside a {}-layer stack",
                self.local_layer,
                self.channels.len()
            )));
        }
        if self.image_size % (1 << self.channels.len()) != 0 {
            return Err(Error::Shape(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Per-item probabilities `(B,)`; `conditional` is absent when no
/// description was supplied.
#[derive(Clone, Debug)]
pub struct Scores {
    pub unconditional: Tensor,
    pub conditional: Option<Tensor>,
}

/// Scores of a single image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePair {
    pub unconditional: f64,
    pub conditional: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    text: TextEncoder,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm2d>>,
    global_head: Linear,
    match_projection: WordProjection,
    region_projection: WordProjection,
    word_gate: Linear,
}

impl Discriminator {
    pub fn new(init: &mut Init, config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let text = TextEncoder::new(&mut init.pp("text"), config.text.clone())?;
        let word_dim = config.text.word_dim();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for (k, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(init, &format!("features.{k}.conv"), cin, c, 3, 2)?);
            norms.push(if k == 0 {
                None
            } else {
                Some(BatchNorm2d::new(init, &format!("features.{k}.bn"), c)?)
            });
            cin = c;
        }
        let deep = *config.channels.last().unwrap_or(&cin);
        let local = config.channels[config.local_layer];
        Ok(Self {
            global_head: Linear::new(init, "global_head", deep, 1, (1.0 / deep as f64).sqrt())?,
            match_projection: WordProjection::new(init, "match_projection", local, word_dim)?,
            region_projection: WordProjection::new(init, "region_projection", local, word_dim)?,
            word_gate: Linear::new(init, "word_gate", word_dim, 1, (1.0 / word_dim as f64).sqrt())?,
            config,
            text,
            convs,
            norms,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn encode_text(&self, batch: &[TokenSequence]) -> Result<WordEmbeddings> {
        self.text.encode(batch)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let dims = image.dims();
        let s = self.config.image_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}), got {dims:?}"
            )));
        }
        Ok(())
    }

    /// Realism score `D(I)` and, with words, matching score `D(I, T)`.
    pub fn score(&self, image: &Tensor, words: Option<&WordEmbeddings>, mode: Mode) -> Result<Scores> {
        self.check_image(image)?;
        let b = image.dims()[0];
        let mut x = image.clone();
        let mut local = None;
        for (k, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            x = conv.forward(&x)?;
            if let Some(bn) = norm {
                x = bn.forward(&x, mode)?;
            }
            x = leaky_relu(&x, 0.2)?;
            if k == self.config.local_layer {
                local = Some(x.clone());
            }
        }
        let pooled = x.mean((2, 3))?;
        let unconditional = sigmoid(&self.global_head.forward(&pooled)?.squeeze(1)?)?;
        ensure_finite(&unconditional, "unconditional score")?;

        let conditional = match (words, local) {
            (Some(words), Some(local)) => {
                if words.batch() != b {
                    return Err(Error::Shape(format!(
                        "{} descriptions for {b} images",
                        words.batch()
                    )));
                }
                let c = self.conditional(&local, words)?;
                ensure_finite(&c, "conditional score")?;
                Some(c)
            }
            _ => None,
        };
        Ok(Scores {
            unconditional,
            conditional,
        })
    }

    fn conditional(&self, local: &Tensor, words: &WordEmbeddings) -> Result<Tensor> {
        let (b, c, h, w) = local.dims4()?;
        let regions = local.reshape((b, c, h * w))?.transpose(1, 2)?;
        let matched = crate::attention::project_words(&words.tensor, self.match_projection.weight())?;
        let keyed = crate::attention::project_words(&words.tensor, self.region_projection.weight())?;
        // (B, N, L) per-word, per-region matching probability
        let local_scores = sigmoid(&regions.matmul(&matched)?)?;
        let region_weights = softmax(&regions.matmul(&keyed)?, 1, None)?;
        let per_word = (local_scores * region_weights)?.sum(1)?;
        let gate_logits = self.word_gate.forward(&words.tensor.transpose(1, 2)?)?.squeeze(2)?;
        let mask = if words.is_dense() {
            None
        } else {
            Some(additive_mask(&words.mask()?)?)
        };
        let importance = softmax(&gate_logits, 1, mask.as_ref())?;
        Ok((per_word * importance)?.sum(1)?)
    }

    /// Scores for a single image `(1, 3, S, S)`.
    pub fn score_pair(&self, image: &Tensor, words: Option<&WordEmbeddings>) -> Result<ScorePair> {
        let s = self.score(image, words, Mode::Eval)?;
        Ok(ScorePair {
            unconditional: scalar(&s.unconditional.get(0)?)?,
            conditional: s.conditional.map(|c| scalar(&c.get(0)?)).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, ParamStore};
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (ParamStore, Discriminator) {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let text = TextEncoderConfig {
            vocab_size: 10,
            embedding_dim: 4,
            hidden: 3,
            max_length: 20,
        };
        let mut cfg = DiscriminatorConfig::new(64, text);
        cfg.channels = vec![4, 4, 8, 8];
        let d = Discriminator::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
        (store, d)
    }

    fn seqs(n: usize) -> Vec<TokenSequence> {
        (0..n)
            .map(|i| TokenSequence {
                ids: vec![2 + i as u32 % 7, 3, 4][..1 + i % 3].to_vec(),
                words: vec!["w".into(); 1 + i % 3],
            })
            .collect()
    }

    #[test]
    fn scores_lie_strictly_inside_unit_interval() {
        let (_, d) = build();
        let img = Tensor::rand(-1f32, 1.0, (4, 3, 64, 64), &device()).unwrap();
        let words = d.encode_text(&seqs(4)).unwrap();
        let s = d.score(&img, Some(&words), Mode::Train).unwrap();
        for t in [s.unconditional, s.conditional.unwrap()] {
            for v in t.to_vec1::<f32>().unwrap() {
                assert!(v > 0.0 && v < 1.0, "{v}");
            }
        }
    }

    #[test]
    fn unconditional_score_ignores_description() {
        let (_, d) = build();
        let img = Tensor::rand(-1f32, 1.0, (2, 3, 64, 64), &device()).unwrap();
        let none = d.score(&img, None, Mode::Eval).unwrap();
        assert!(none.conditional.is_none());
        let w = d.encode_text(&seqs(2)).unwrap();
        let with = d.score(&img, Some(&w), Mode::Eval).unwrap();
        assert_eq!(
            none.unconditional.to_vec1::<f32>().unwrap(),
            with.unconditional.to_vec1::<f32>().unwrap()
        );
        let pair = d.score_pair(&img.narrow(0, 0, 1).unwrap(), None).unwrap();
        assert!(pair.conditional.is_none());
    }

    #[test]
    fn no_biases_and_no_input_normalisation() {
        let (store, _) = build();
        let names = store.param_names();
        assert!(names.iter().all(|n| !n.ends_with(".bias") || n.starts_with("text.")));
        assert!(!names.iter().any(|n| n.starts_with("features.0.bn")));
        assert!(names.iter().any(|n| n.starts_with("features.1.bn")));
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let (_, d) = build();
        let img = Tensor::zeros((1, 3, 32, 32), DType::F32, &device()).unwrap();
        assert!(matches!(d.score(&img, None, Mode::Eval), Err(Error::Shape(_))));
        let img = Tensor::zeros((2, 3, 64, 64), DType::F32, &device()).unwrap();
        let w = d.encode_text(&seqs(3)).unwrap();
        assert!(matches!(d.score(&img, Some(&w), Mode::Eval), Err(Error::Shape(_))));
    }
}
