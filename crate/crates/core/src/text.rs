//! Descriptions to word-level embedding matrices: vocabulary, tokenizer and
//! a bidirectional LSTM encoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{device, Init, LstmCell};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: u32 = 0;
pub const UNK_INDEX: u32 = 1;

/// Token ↔ index map. Index 0 is padding, index 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens; duplicates are dropped
    /// keeping the first occurrence.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: vec![PAD.to_string(), UNK.to_string()],
            index: HashMap::new(),
        };
        vocab.index.insert(PAD.to_string(), PAD_INDEX);
        vocab.index.insert(UNK.to_string(), UNK_INDEX);
        for token in tokens {
            let token = token.into();
            if !vocab.index.contains_key(&token) {
                vocab.index.insert(token.clone(), vocab.tokens.len() as u32);
                vocab.tokens.push(token);
            }
        }
        vocab
    }

    /// Sorted word list over every normalized caption.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = captions.into_iter().flat_map(normalize).collect();
        words.sort();
        words.dedup();
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    /// Newline-delimited serialisation; line number is the index.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD || lines[1] != UNK {
            return Err(Error::Data(format!(
                "vocabulary must start with `{PAD}` and `{UNK}` on lines 0 and 1"
            )));
        }
        let vocab = Self::from_tokens(lines[2..].iter().map(|s| s.to_string()));
        if vocab.len() != lines.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialised form; checkpoints record it.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Lowercases and strips everything but letters, digits and apostrophes.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// A tokenized description: `ids.len() == words.len() == L`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Normalized surface words (unknown words keep their spelling).
    pub words: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub const DEFAULT_MAX_LENGTH: usize = 20;

pub fn tokenize(text: &str, vocab: &Vocabulary, max_length: usize) -> Result<TokenSequence> {
    let mut words = normalize(text);
    if words.is_empty() {
        return Err(Error::InvalidDescription(
            "description is empty after normalization".into(),
        ));
    }
    if words.len() > max_length {
        log::warn!(
            "description has {} words, truncating to {max_length}",
            words.len()
        );
        words.truncate(max_length);
    }
    let ids = words.iter().map(|w| vocab.lookup(w)).collect();
    Ok(TokenSequence { ids, words })
}

/// Word features for a batch: `tensor` is `(B, D, L_max)`, column `j` of
/// item `b` is valid for `j < lengths[b]` and zero beyond.
#[derive(Clone, Debug)]
pub struct WordEmbeddings {
    pub tensor: Tensor,
    pub lengths: Vec<usize>,
}

impl WordEmbeddings {
    pub fn new(tensor: Tensor, lengths: Vec<usize>) -> Result<Self> {
        let (b, _, l) = tensor.dims3()?;
        if b != lengths.len() || lengths.iter().any(|&n| n == 0 || n > l) {
            return Err(Error::Shape(format!(
                "lengths {lengths:?} inconsistent with word tensor {:?}",
                tensor.dims()
            )));
        }
        Ok(Self { tensor, lengths })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn dim(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn max_len(&self) -> usize {
        self.tensor.dims()[2]
    }

    /// `(B, L_max)` tensor of 1 (word) / 0 (pad) in the embedding dtype.
    pub fn mask(&self) -> Result<Tensor> {
        let l = self.max_len();
        let mut m = Vec::with_capacity(self.batch() * l);
        for &n in &self.lengths {
            m.extend((0..l).map(|j| if j < n { 1.0 } else { 0.0 }));
        }
        Ok(Tensor::from_vec(m, (self.batch(), l), &device())?.to_dtype(self.tensor.dtype())?)
    }

    /// True when no item carries padding.
    pub fn is_dense(&self) -> bool {
        self.lengths.iter().all(|&n| n == self.max_len())
    }

    pub fn detach(&self) -> Self {
        Self {
            tensor: self.tensor.detach(),
            lengths: self.lengths.clone(),
        }
    }

    pub fn select(&self, index: usize) -> Result<Self> {
        let n = self.lengths[index];
        Self::new(self.tensor.narrow(0, index, 1)?.narrow(2, 0, n)?, vec![n])
    }

    /// Items `start..start + len`, trimmed to their longest description.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let lengths = self.lengths[start..start + len].to_vec();
        let lmax = lengths.iter().copied().max().unwrap_or(1);
        Self::new(self.tensor.narrow(0, start, len)?.narrow(2, 0, lmax)?, lengths)
    }

    /// `(1 - t) * a + t * b` for same-shaped embeddings.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Result<Self> {
        if a.tensor.dims() != b.tensor.dims() || a.lengths != b.lengths {
            return Err(Error::InvalidDescription(format!(
                "cannot interpolate descriptions of lengths {:?} and {:?}",
                a.lengths, b.lengths
            )));
        }
        let t_ = ((&a.tensor * (1.0 - t))? + (&b.tensor * t)?)?;
        Self::new(t_, a.lengths.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Hidden width per direction; the word feature width is twice this.
    pub hidden: usize,
    pub max_length: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 300,
            hidden: 128,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }

    pub fn word_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Bidirectional LSTM over word embeddings.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    embedding: candle_core::Var,
    forward: LstmCell,
    backward: LstmCell,
}

impl TextEncoder {
    /// Embeddings start uniform in [-0.1, 0.1]; see [`load_word_vectors`].
    pub fn new(init: &mut Init, config: TextEncoderConfig) -> Result<Self> {
        let embedding = init.uniform(
            "embedding",
            &[config.vocab_size, config.embedding_dim],
            -0.1,
            0.1,
        )?;
        let forward = LstmCell::new(init, "lstm_fwd", config.embedding_dim, config.hidden)?;
        let backward = LstmCell::new(init, "lstm_bwd", config.embedding_dim, config.hidden)?;
        Ok(Self {
            config,
            embedding,
            forward,
            backward,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn embedding(&self) -> &candle_core::Var {
        &self.embedding
    }

    /// Encodes a batch of sequences into `(B, 2H, L_max)` word features.
    /// Column `j` concatenates the forward state after reading word `j` and
    /// the backward state after reading words `L-1 ..= j`.
    pub fn encode(&self, batch: &[TokenSequence]) -> Result<WordEmbeddings> {
        if batch.is_empty() || batch.iter().any(TokenSequence::is_empty) {
            return Err(Error::InvalidDescription("empty token sequence".into()));
        }
        let b = batch.len();
        let l = batch.iter().map(TokenSequence::len).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(b * l);
        let mut mask = Vec::with_capacity(b * l);
        for seq in batch {
            if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
                return Err(Error::InvalidDescription(format!(
                    "token index {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            ids.extend(seq.ids.iter().copied());
            ids.extend(std::iter::repeat_n(PAD_INDEX, l - seq.len()));
            mask.extend((0..l).map(|j| j < seq.len()));
        }
        let ids = Tensor::from_vec(ids, b * l, &device())?;
        let xs = self
            .embedding
            .as_tensor()
            .index_select(&ids, 0)?
            .reshape((b, l, self.config.embedding_dim))?;
        let fwd = self.forward.sequence(&self.forward.input_gates(&xs)?, &mask, false)?;
        let bwd = self.backward.sequence(&self.backward.input_gates(&xs)?, &mask, true)?;
        let tensor = Tensor::cat(&[&fwd, &bwd], 2)?.transpose(1, 2)?.contiguous()?;
        WordEmbeddings::new(tensor, batch.iter().map(TokenSequence::len).collect())
    }
}

/// Overwrites embedding rows for vocabulary words found in a text vector
/// file (`word v1 … vd` per line, optional `count dim` header). Returns
/// how many rows were filled.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, encoder: &TextEncoder) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = encoder.config.embedding_dim;
    let table = encoder.embedding.as_tensor().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut table = table;
    let mut filled = 0;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
        if values.len() != dim {
            continue;
        }
        let idx = vocab.lookup(word);
        if idx == UNK_INDEX && word != UNK {
            continue;
        }
        table[idx as usize] = values;
        filled += 1;
    }
    let flat: Vec<f64> = table.into_iter().flatten().collect();
    let t = Tensor::from_vec(flat, (vocab.len(), dim), &device())?
        .to_dtype(encoder.embedding.dtype())?;
    encoder.embedding.set(&t)?;
    Ok(filled)
}
