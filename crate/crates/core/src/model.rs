//! Model bundles: the full adversarial pair used in training and the
//! inference-only editor (vocabulary + text encoder + generator).

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorMode, GeneratorOutput};
use crate::nn::{device, Init, Mode, ParamStore};
use crate::text::{tokenize, TextEncoder, TextEncoderConfig, TokenSequence, Vocabulary, WordEmbeddings};

pub const TEXT_PREFIX: &str = "text_encoder";
pub const GENERATOR_PREFIX: &str = "generator";
pub const DISCRIMINATOR_PREFIX: &str = "discriminator";

/// Architecture plan of all three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn new(mode: GeneratorMode, image_size: usize, vocab_size: usize) -> Self {
        let text = TextEncoderConfig::new(vocab_size);
        Self {
            generator: GeneratorConfig::new(mode, image_size, text.word_dim()),
            discriminator: DiscriminatorConfig::new(image_size, text.clone()),
            text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.word_dim != self.text.word_dim() {
            return Err(Error::Shape(format!(
                "generator expects {}-wide word features, text encoder produces {}",
                self.generator.word_dim,
                self.text.word_dim()
            )));
        }
        if self.discriminator.image_size != self.generator.image_size {
            return Err(Error::Shape("generator and discriminator resolutions differ".into()));
        }
        Ok(())
    }
}

/// Generator-side and discriminator-side networks with separate parameter
/// stores, so each optimiser only ever sees its own side.
pub struct GanModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub generator_store: ParamStore,
    pub discriminator_store: ParamStore,
    pub text: TextEncoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl GanModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size != vocab.len() {
            return Err(Error::VocabularyMismatch {
                expected: format!("{} tokens", config.text.vocab_size),
                found: format!("{} tokens", vocab.len()),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator_store = ParamStore::new(dtype);
        let (text, generator) = {
            let mut init = Init::new(&mut generator_store, &mut rng);
            let text = TextEncoder::new(&mut init.pp(TEXT_PREFIX), config.text.clone())?;
            let generator = Generator::new(&mut init.pp(GENERATOR_PREFIX), config.generator.clone())?;
            (text, generator)
        };
        let mut discriminator_store = ParamStore::new(dtype);
        let discriminator = Discriminator::new(
            &mut Init::new(&mut discriminator_store, &mut rng).pp(DISCRIMINATOR_PREFIX),
            config.discriminator.clone(),
        )?;
        Ok(Self {
            config,
            vocab,
            generator_store,
            discriminator_store,
            text,
            generator,
            discriminator,
        })
    }

    /// Inference view sharing this model's parameters.
    pub fn editor(&self) -> Editor {
        Editor {
            vocab: self.vocab.clone(),
            image_size: self.config.generator.image_size,
            max_length: self.config.text.max_length,
            backend: Backend::Gan {
                text: self.text.clone(),
                generator: self.generator.clone(),
            },
        }
    }
}

#[derive(Clone, Debug)]
enum Backend {
    /// Returns its input unchanged.
    Identity,
    Gan { text: TextEncoder, generator: Generator },
}

/// Read-only inference bundle.
#[derive(Clone, Debug)]
pub struct Editor {
    vocab: Vocabulary,
    image_size: usize,
    max_length: usize,
    backend: Backend,
}

impl Editor {
    pub fn identity(vocab: Vocabulary, image_size: usize) -> Self {
        Self {
            vocab,
            image_size,
            max_length: crate::text::DEFAULT_MAX_LENGTH,
            backend: Backend::Identity,
        }
    }

    pub(crate) fn from_parts(vocab: Vocabulary, text: TextEncoder, generator: Generator) -> Self {
        Self {
            vocab,
            image_size: generator.config().image_size,
            max_length: text.config().max_length,
            backend: Backend::Gan { text, generator },
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.backend, Backend::Identity)
    }

    pub fn mode(&self) -> Option<GeneratorMode> {
        match &self.backend {
            Backend::Identity => None,
            Backend::Gan { generator, .. } => Some(generator.config().mode),
        }
    }

    pub fn generator(&self) -> Option<&Generator> {
        match &self.backend {
            Backend::Identity => None,
            Backend::Gan { generator, .. } => Some(generator),
        }
    }

    pub fn dtype(&self) -> DType {
        match &self.backend {
            Backend::Identity => DType::F32,
            Backend::Gan { text, .. } => text.embedding().dtype(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.vocab, self.max_length)
    }

    pub fn encode(&self, batch: &[TokenSequence]) -> Result<WordEmbeddings> {
        match &self.backend {
            Backend::Identity => {
                let lmax = batch.iter().map(TokenSequence::len).max().unwrap_or(1);
                let t = Tensor::zeros((batch.len(), 2, lmax), DType::F32, &device())?;
                WordEmbeddings::new(t, batch.iter().map(TokenSequence::len).collect())
            }
            Backend::Gan { text, .. } => text.encode(batch),
        }
    }

    pub fn encode_texts(&self, texts: &[&str]) -> Result<WordEmbeddings> {
        let seqs = texts.iter().map(|t| self.tokenize(t)).collect::<Result<Vec<_>>>()?;
        self.encode(&seqs)
    }

    /// Generates in inference mode from already-encoded words.
    pub fn generate(&self, image: &Tensor, words: &WordEmbeddings) -> Result<GeneratorOutput> {
        match &self.backend {
            Backend::Identity => {
                let s = self.image_size;
                let dims = image.dims();
                if dims.len() != 4 || dims[1..] != [3, s, s] {
                    return Err(Error::Shape(format!("expected (B, 3, {s}, {s}) images, got {dims:?}")));
                }
                Ok(GeneratorOutput {
                    image: image.clone(),
                    attention: Vec::new(),
                })
            }
            Backend::Gan { generator, .. } => generator.generate(image, words, Mode::Eval),
        }
    }

    /// Tokenises, encodes and generates one description per image.
    pub fn manipulate(&self, image: &Tensor, texts: &[&str]) -> Result<GeneratorOutput> {
        let words = self.encode_texts(texts)?;
        self.generate(image, &words)
    }
}

/// Minimal plan used by unit tests across the crate.
#[cfg(test)]
pub(crate) fn tiny_config(mode: GeneratorMode, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::new(mode, 64, vocab);
    c.text.embedding_dim = 8;
    c.text.hidden = 4;
    c.generator.word_dim = 8;
    c.generator.encoder_channels = vec![4, 4, 8, 8];
    c.generator.fusion_channels = vec![4, 4];
    c.generator.residual_blocks = 1;
    c.discriminator.text = c.text.clone();
    c.discriminator.channels = vec![4, 4, 8, 8];
    c
}
