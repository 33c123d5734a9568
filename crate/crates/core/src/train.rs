//! Alternating adversarial training.
//!
//! Each step runs one discriminator update on `L_D` with the generated
//! images detached, then one generator update on `L_G`. Every item
//! contributes a positive pair `(I, T)` (reconstruction, real-conditional
//! term) and a mismatched pair `(I, T̂)` (manipulation). All randomness is
//! derived from `(seed, epoch, step)`, so a resumed run replays the
//! uninterrupted one exactly.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointKind, CheckpointManifest, FORMAT_VERSION};
use crate::data::{center_crop, crop, normalize, CaptionedImage};
use crate::error::{Error, Result};
use crate::generator::GeneratorMode;
use crate::model::{GanModel, ModelConfig, TEXT_PREFIX};
use crate::nn::{device, ensure_finite, scalar, Adam, AdamConfig, Mode};
use crate::objectives::{
    discriminator_loss, generator_loss, reconstruction_loss, DiscriminatorScores, LossReport, LossWeights,
};
use crate::text::{load_word_vectors, tokenize, TokenSequence, Vocabulary};

pub const LOG_FILE: &str = "losses.ndjson";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Step size is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs (and after the last).
    pub checkpoint_every: usize,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub freeze_text_encoder: bool,
    pub word_vectors: Option<PathBuf>,
    pub model: ModelConfig,
}

impl TrainingConfig {
    pub fn new(mode: GeneratorMode, image_size: usize, vocab_size: usize) -> Self {
        Self {
            epochs: 600,
            batch_size: if image_size >= 256 { 32 } else if image_size >= 128 { 128 } else { 32 },
            seed: 0,
            optimizer: AdamConfig::default(),
            decay_every: 100,
            decay_factor: 0.5,
            weights: LossWeights::for_mode(mode),
            augment: AugmentConfig { flip: true, crop: true },
            checkpoint_every: 10,
            clip_norm: None,
            freeze_text_encoder: false,
            word_vectors: None,
            model: ModelConfig::new(mode, image_size, vocab_size),
        }
    }

    /// Short-schedule settings for the 64×64 synthetic corpus: 30 epochs,
    /// a larger step size halved every 5 epochs, a wider generator and a
    /// narrower discriminator that matches words on its 16×16 layer.
    /// The loss weights are unchanged.
    pub fn toy(mode: GeneratorMode, vocab_size: usize) -> Self {
        let mut config = Self::new(mode, 64, vocab_size);
        config.epochs = 30;
        config.optimizer.lr = 1e-3;
        config.decay_every = 5;
        config.model.generator.encoder_channels = vec![16, 32, 64, 128];
        config.model.generator.fusion_channels = vec![32, 16];
        config.model.discriminator.channels = vec![8, 16, 32, 32];
        config.model.discriminator.local_layer = 1;
        config
    }

    pub fn mode(&self) -> GeneratorMode {
        self.model.generator.mode
    }

    pub fn image_size(&self) -> usize {
        self.model.generator.image_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("invalid training config: {msg}")));
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 || self.decay_every == 0 {
            return bad("epochs, batch size, checkpoint and decay intervals must be positive".into());
        }
        if self.epochs > self.decay_every && self.epochs % self.decay_every != 0 {
            return bad(format!(
                "decay interval {} does not divide {} epochs",
                self.decay_every, self.epochs
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor {} outside (0, 1]", self.decay_factor));
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("step size {} must be positive", self.optimizer.lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Step size for a zero-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.optimizer.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn steps_per_epoch(&self, items: usize) -> usize {
        items.div_ceil(self.batch_size)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("config serialisation: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("config: {e}")))
    }
}

/// Independent random stream for `(seed, parts…)`.
pub fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(key)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_BATCH: u64 = 2;

/// A caption of a uniformly chosen item other than `current`.
pub fn sample_mismatch<'a>(dataset: &'a [CaptionedImage], current: usize, rng: &mut impl Rng) -> Result<&'a str> {
    if dataset.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "mismatched descriptions need at least 2 images, dataset has {}",
            dataset.len()
        )));
    }
    let mut other = rng.random_range(0..dataset.len() - 1);
    if other >= current {
        other += 1;
    }
    let captions = &dataset[other].captions;
    Ok(&captions[rng.random_range(0..captions.len())])
}

/// Optional horizontal flip followed by a `target`² window at `(x, y)`.
pub fn augment_with(image: &RgbImage, target: usize, flip: bool, x: usize, y: usize) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < target || h < target {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than the {target}px crop")));
    }
    if x + target > w || y + target > h {
        return Err(Error::Shape(format!("crop at ({x}, {y}) leaves the {w}x{h} image")));
    }
    let flipped;
    let src = if flip {
        flipped = image::imageops::flip_horizontal(image);
        &flipped
    } else {
        image
    };
    Ok(crop(src, x, y, target))
}

/// Random flip (p = 0.5) and random `target`² crop.
pub fn augment(image: &RgbImage, target: usize, rng: &mut impl Rng) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < target || h < target {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than the {target}px crop")));
    }
    let flip = rng.random_bool(0.5);
    let x = rng.random_range(0..=w - target);
    let y = rng.random_range(0..=h - target);
    augment_with(image, target, flip, x, y)
}

/// Images and descriptions of one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub positive: Vec<TokenSequence>,
    pub mismatch: Vec<TokenSequence>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }
}

pub fn build_batch(
    dataset: &[CaptionedImage],
    indices: &[usize],
    vocab: &Vocabulary,
    config: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let target = config.image_size();
    let max_len = config.model.text.max_length;
    let mut images = Vec::with_capacity(indices.len());
    let mut positive = Vec::with_capacity(indices.len());
    let mut mismatch = Vec::with_capacity(indices.len());
    for &i in indices {
        let item = &dataset[i];
        let img = match (config.augment.flip, config.augment.crop) {
            (true, true) => augment(&item.image, target, rng)?,
            (flip, do_crop) => {
                let flip = flip && rng.random_bool(0.5);
                let (w, h) = item.image.dimensions();
                let (w, h) = (w as usize, h as usize);
                if w < target || h < target {
                    return Err(Error::Shape(format!("{w}x{h} image is smaller than the {target}px crop")));
                }
                let (x, y) = if do_crop {
                    (rng.random_range(0..=w - target), rng.random_range(0..=h - target))
                } else {
                    ((w - target) / 2, (h - target) / 2)
                };
                augment_with(&item.image, target, flip, x, y)?
            }
        };
        images.push(img);
        let caption = &item.captions[rng.random_range(0..item.captions.len())];
        positive.push(tokenize(caption, vocab, max_len)?);
        mismatch.push(tokenize(sample_mismatch(dataset, i, rng)?, vocab, max_len)?);
    }
    let refs: Vec<&RgbImage> = images.iter().collect();
    Ok(Batch {
        images: normalize(&refs, DType::F32, &device())?,
        positive,
        mismatch,
    })
}

/// Evaluation-time view of an item: centre crop to the model resolution.
pub fn eval_image(item: &CaptionedImage, target: usize) -> Result<RgbImage> {
    center_crop(&item.image, target)
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
    pub clipped: bool,
    #[serde(flatten)]
    pub losses: LossReport,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub model: GanModel,
    generator_opt: Adam,
    discriminator_opt: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainingConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = GanModel::new(config.model.clone(), vocab, config.seed, DType::F32)?;
        if let Some(path) = &config.word_vectors {
            let n = load_word_vectors(path, &model.vocab, &model.text)?;
            load_word_vectors(path, &model.vocab, model.discriminator.text_encoder())?;
            log::info!("initialised {n} word vectors from {}", path.display());
        }
        let text_prefix = format!("{TEXT_PREFIX}.");
        let g_params = model
            .generator_store
            .trainable()
            .into_iter()
            .filter(|(n, _)| !(config.freeze_text_encoder && n.starts_with(&text_prefix)))
            .collect();
        let mut generator_opt = Adam::new(g_params, config.optimizer)?;
        let mut discriminator_opt = Adam::new(model.discriminator_store.trainable(), config.optimizer)?;
        generator_opt.set_learning_rate(config.learning_rate(0));
        discriminator_opt.set_learning_rate(config.learning_rate(0));
        Ok(Self {
            config,
            model,
            generator_opt,
            discriminator_opt,
            epoch: 0,
            step: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.generator_opt.learning_rate()
    }

    fn set_epoch_schedule(&mut self, epoch: usize) {
        let lr = self.config.learning_rate(epoch);
        self.generator_opt.set_learning_rate(lr);
        self.discriminator_opt.set_learning_rate(lr);
    }

    fn clip_scale(&self, opt: &Adam, grads: &GradStore, side: &str) -> Result<(f64, bool)> {
        let Some(max) = self.config.clip_norm else {
            return Ok((1.0, false));
        };
        let norm = opt.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NumericalFailure(format!("{side} gradient norm is {norm}")));
        }
        if norm > max {
            log::info!("clipping {side} gradient norm {norm:.3} to {max}");
            return Ok((max / norm, true));
        }
        Ok((1.0, false))
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<(LossReport, bool)> {
        self.train_step_with(batch, |_| {})
    }

    /// [`Trainer::train_step`] with a hook run between the discriminator
    /// and generator updates.
    pub fn train_step_with(&mut self, batch: &Batch, mut between: impl FnMut(&Self)) -> Result<(LossReport, bool)> {
        let b = batch.len();
        let weights = self.config.weights;
        let model = &self.model;

        // generator forward on positive and mismatched descriptions at once
        let mut tokens = batch.positive.clone();
        tokens.extend(batch.mismatch.iter().cloned());
        let words = model.text.encode(&tokens)?;
        let doubled = Tensor::cat(&[&batch.images, &batch.images], 0)?;
        let generated = model.generator.generate(&doubled, &words, Mode::Train)?.image;
        let reconstructed = generated.narrow(0, 0, b)?;
        let fake = generated.narrow(0, b, b)?;

        // discriminator update
        let d_words = model.discriminator.encode_text(&tokens)?;
        let (d_pos, d_mis) = (d_words.narrow(0, b)?, d_words.narrow(b, b)?);
        let real = model.discriminator.score(&batch.images, Some(&d_pos), Mode::Train)?;
        let faked = model.discriminator.score(&fake.detach(), Some(&d_mis), Mode::Train)?;
        let d_loss = discriminator_loss(
            DiscriminatorScores {
                real_unconditional: &real.unconditional,
                fake_unconditional: &faked.unconditional,
                real_conditional: conditional(&real.conditional)?,
                fake_conditional: conditional(&faked.conditional)?,
            },
            &weights,
        )?;
        ensure_finite(&d_loss.total, "discriminator loss")?;
        let grads = d_loss.total.backward()?;
        let (scale, d_clipped) = self.clip_scale(&self.discriminator_opt, &grads, "discriminator")?;
        self.discriminator_opt.step(&grads, scale)?;
        drop(grads);
        between(self);

        // generator update against the refreshed discriminator
        let model = &self.model;
        let d_mis = model.discriminator.encode_text(&batch.mismatch)?.detach();
        let judged = model.discriminator.score(&fake, Some(&d_mis), Mode::Train)?;
        let l1 = reconstruction_loss(&batch.images, &reconstructed)?;
        let g_loss = generator_loss(&judged.unconditional, conditional(&judged.conditional)?, &l1, &weights)?;
        ensure_finite(&g_loss.total, "generator loss")?;
        let grads = g_loss.total.backward()?;
        let (scale, g_clipped) = self.clip_scale(&self.generator_opt, &grads, "generator")?;
        self.generator_opt.step(&grads, scale)?;

        self.step += 1;
        Ok((LossReport::from_parts(&d_loss, &g_loss, scalar(&l1)?)?, d_clipped || g_clipped))
    }

    /// Item order of a zero-based epoch.
    pub fn epoch_order(&self, epoch: usize, items: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..items).collect();
        order.shuffle(&mut derived_rng(self.config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order
    }

    /// Runs one full epoch, returning its log records.
    pub fn run_epoch(&mut self, dataset: &[CaptionedImage]) -> Result<Vec<LogRecord>> {
        let epoch = self.epoch;
        self.set_epoch_schedule(epoch);
        let order = self.epoch_order(epoch, dataset.len());
        let mut records = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let mut rng = derived_rng(self.config.seed, &[STREAM_BATCH, epoch as u64, self.step]);
            let batch = build_batch(dataset, chunk, &self.model.vocab, &self.config, &mut rng)?;
            let (losses, clipped) = self.train_step(&batch)?;
            records.push(LogRecord {
                epoch: epoch + 1,
                step: self.step,
                learning_rate: self.learning_rate(),
                clipped,
                losses,
            });
        }
        self.epoch += 1;
        Ok(records)
    }

    pub fn manifest(&self) -> Result<CheckpointManifest> {
        Ok(CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Gan,
            id: String::new(),
            mode: Some(self.config.mode()),
            image_size: self.config.image_size(),
            vocab_hash: self.model.vocab.hash(),
            model: Some(self.config.model.clone()),
            config: Some(self.config.to_toml()?),
            epoch: self.epoch,
            step: self.step,
        })
    }

    /// Full training state: both networks, buffers and optimiser moments.
    pub fn save(&self, path: &Path) -> Result<CheckpointManifest> {
        let mut tensors = self.model.generator_store.named_tensors();
        tensors.extend(self.model.discriminator_store.named_tensors());
        tensors.extend(self.generator_opt.state_tensors("optim.g.")?);
        tensors.extend(self.discriminator_opt.state_tensors("optim.d.")?);
        checkpoint::save(path, &self.manifest()?, &tensors)
    }

    /// Restores a state written by [`Trainer::save`].
    pub fn resume(path: &Path, vocab: Vocabulary) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        manifest.check_vocab(&vocab)?;
        let text = manifest
            .config
            .as_deref()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no training configuration", path.display())))?;
        let mut config = TrainingConfig::from_toml(text)?;
        // vectors are already baked into the stored embeddings
        config.word_vectors = None;
        let mut trainer = Self::new(config, vocab)?;
        trainer.model.generator_store.load(&tensors, "")?;
        trainer.model.discriminator_store.load(&tensors, "")?;
        trainer.generator_opt.load_state(&tensors, "optim.g.")?;
        trainer.discriminator_opt.load_state(&tensors, "optim.d.")?;
        trainer.epoch = manifest.epoch;
        trainer.step = manifest.step;
        trainer.set_epoch_schedule(trainer.epoch);
        Ok(trainer)
    }

    /// Parameter digests of the generator side and discriminator side.
    pub fn digests(&self) -> Result<(String, String)> {
        Ok((
            self.model.generator_store.digest()?,
            self.model.discriminator_store.digest()?,
        ))
    }
}

fn conditional(t: &Option<Tensor>) -> Result<&Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::Shape("discriminator returned no conditional score".into()))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingSummary {
    pub checkpoints: Vec<PathBuf>,
    /// Whole log, including records written before a resume.
    pub records: Vec<LogRecord>,
}

impl TrainingSummary {
    /// Mean display-range reconstruction L1 per epoch (index 0 = epoch 1).
    pub fn epoch_reconstruction(&self) -> Vec<f64> {
        let epochs = self.records.iter().map(|r| r.epoch).max().unwrap_or(0);
        (1..=epochs)
            .map(|e| {
                let v: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.epoch == e)
                    .map(|r| r.losses.reconstruction_l1)
                    .collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-epoch-{epoch:04}.safetensors"))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn write_log(path: &Path, records: &[LogRecord], append: bool) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains (or resumes) to `config.epochs`, writing checkpoints and the loss
/// log into `options.out_dir`. A numerical failure saves the state reached
/// as `failure.safetensors` before returning the error.
pub fn run_training(
    config: TrainingConfig,
    vocab: Vocabulary,
    dataset: &[CaptionedImage],
    options: &RunOptions,
) -> Result<(Trainer, TrainingSummary)> {
    let dir = &options.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if dataset.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 images, got {}",
            dataset.len()
        )));
    }
    let log_path = dir.join(LOG_FILE);
    let (mut trainer, mut records) = match &options.resume {
        Some(path) => {
            let trainer = Trainer::resume(path, vocab)?;
            let kept: Vec<LogRecord> = if log_path.is_file() {
                read_log(&log_path)?.into_iter().filter(|r| r.step <= trainer.step).collect()
            } else {
                Vec::new()
            };
            write_log(&log_path, &kept, false)?;
            log::info!("resumed at epoch {} step {}", trainer.epoch, trainer.step);
            (trainer, kept)
        }
        None => {
            write_log(&log_path, &[], false)?;
            (Trainer::new(config, vocab)?, Vec::new())
        }
    };
    std::fs::write(dir.join("config.toml"), trainer.config.to_toml()?).map_err(|e| Error::io(dir, e))?;

    let total = trainer.config.epochs;
    let stop = options.stop_after.unwrap_or(total).min(total);
    let mut summary = TrainingSummary::default();
    while trainer.epoch < stop {
        let started = std::time::Instant::now();
        let epoch_records = match trainer.run_epoch(dataset) {
            Ok(r) => r,
            Err(e @ Error::NumericalFailure(_)) => {
                let path = dir.join("failure.safetensors");
                trainer.save(&path)?;
                log::error!("{e}; state saved to {}", path.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_log(&log_path, &epoch_records, true)?;
        let mean = epoch_records.iter().map(|r| r.losses.reconstruction_l1).sum::<f64>()
            / epoch_records.len().max(1) as f64;
        log::info!(
            "epoch {}/{total}: {} steps, L1 {mean:.4}, {:.1}s",
            trainer.epoch,
            epoch_records.len(),
            started.elapsed().as_secs_f64()
        );
        records.extend(epoch_records);
        if trainer.epoch % trainer.config.checkpoint_every == 0 || trainer.epoch == total {
            let path = checkpoint_path(dir, trainer.epoch);
            trainer.save(&path)?;
            summary.checkpoints.push(path);
        }
    }
    summary.records = records;
    Ok((trainer, summary))
}
