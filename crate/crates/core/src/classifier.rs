//! Small convolutional label classifier for the label-entropy probe on the
//! synthetic corpus (shape × colour classes).

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize, CaptionedImage};
use crate::error::{Error, Result};
use crate::eval::LabelClassifier;
use crate::nn::{device, scalar, softmax, AdamConfig, Adam, BatchNorm2d, Conv2d, Init, Linear, Mode, ParamStore};

const WIDTHS: [usize; 4] = [16, 32, 64, 64];

pub struct ToyClassifier {
    store: ParamStore,
    layers: Vec<(Conv2d, BatchNorm2d)>,
    head: Linear,
    classes: usize,
}

impl ToyClassifier {
    pub fn new(classes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layers, head) = {
            let mut init = Init::new(&mut store, &mut rng);
            let mut cin = 3;
            let mut layers = Vec::new();
            for (k, &c) in WIDTHS.iter().enumerate() {
                layers.push((
                    Conv2d::new(&mut init, &format!("conv{k}"), cin, c, 3, 2)?,
                    BatchNorm2d::new(&mut init, &format!("bn{k}"), c)?,
                ));
                cin = c;
            }
            let head = Linear::new(&mut init, "head", 2 * cin, classes, (0.5 / cin as f64).sqrt())?;
            (layers, head)
        };
        Ok(Self {
            store,
            layers,
            head,
            classes,
        })
    }

    fn logits(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = images.clone();
        for (conv, bn) in &self.layers {
            x = bn.forward(&conv.forward(&x)?, mode)?.relu()?;
        }
        // max pooling keeps the corner and edge responses that tell the
        // shapes apart; the mean carries colour
        let (b, c, h, w) = x.dims4()?;
        let pooled = Tensor::cat(&[x.mean((2, 3))?, x.reshape((b, c, h * w))?.max(2)?], 1)?;
        self.head.forward(&pooled)
    }

    /// Trains on `items` (labels in `0..classes`) with cross-entropy;
    /// returns the final-epoch training accuracy.
    pub fn fit(&mut self, items: &[CaptionedImage], epochs: usize, batch_size: usize, seed: u64) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::InsufficientData("classifier needs training images".into()));
        }
        if let Some(bad) = items.iter().find(|i| i.label >= self.classes) {
            return Err(Error::Data(format!("label {} outside {} classes", bad.label, self.classes)));
        }
        let mut opt = Adam::new(
            self.store.trainable(),
            AdamConfig {
                lr: 3e-3,
                beta1: 0.9,
                ..AdamConfig::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut accuracy = 0.0;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut correct = 0usize;
            for chunk in order.chunks(batch_size.max(1)) {
                // mirrored copies: every class is symmetric under a horizontal flip
                let images: Vec<_> = chunk
                    .iter()
                    .map(|&i| {
                        let img = &items[i].image;
                        if rng.random_bool(0.5) {
                            image::imageops::flip_horizontal(img)
                        } else {
                            img.clone()
                        }
                    })
                    .collect();
                let x = normalize(&images.iter().collect::<Vec<_>>(), DType::F32, &device())?;
                let labels: Vec<usize> = chunk.iter().map(|&i| items[i].label).collect();
                let logits = self.logits(&x, Mode::Train)?;
                let loss = cross_entropy(&logits, &labels)?;
                let grads = loss.backward()?;
                opt.step(&grads, 1.0)?;
                let predicted = logits.argmax(1)?.to_vec1::<u32>()?;
                correct += predicted.iter().zip(&labels).filter(|(p, l)| **p as usize == **l).count();
            }
            accuracy = correct as f64 / items.len() as f64;
        }
        Ok(accuracy)
    }

    /// Fraction of `items` whose most probable class is their label.
    pub fn accuracy(&self, items: &[CaptionedImage]) -> Result<f64> {
        let images: Vec<_> = items.iter().map(|i| &i.image).collect();
        let p = self.probabilities(&normalize(&images, DType::F32, &device())?)?;
        let predicted = p.argmax(1)?.to_vec1::<u32>()?;
        let correct = predicted.iter().zip(items).filter(|(p, i)| **p as usize == i.label).count();
        Ok(correct as f64 / items.len().max(1) as f64)
    }
}

/// Mean of `logsumexp(z) − z[label]` over the batch.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    let mut onehot = vec![0f32; b * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, c), &device())?.to_dtype(logits.dtype())?;
    let max = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + max)?.squeeze(1)?;
    let picked = (logits * onehot)?.sum(1)?;
    let loss = (lse - picked)?.mean_all()?;
    if !scalar(&loss)?.is_finite() {
        return Err(Error::NumericalFailure("classifier loss is not finite".into()));
    }
    Ok(loss)
}

impl LabelClassifier for ToyClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        softmax(&self.logits(images, Mode::Eval)?, 1, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, NUM_CLASSES};

    #[test]
    fn learns_the_synthetic_labels() {
        let mut corpus = synth_generate(660, 5, 64).unwrap();
        let test = corpus.split_off(600);
        let mut clf = ToyClassifier::new(NUM_CLASSES, 1).unwrap();
        let train_acc = clf.fit(&corpus.items, 8, 20, 2).unwrap();
        eprintln!("train accuracy {train_acc}");
        let acc = clf.accuracy(&test.items).unwrap();
        assert!(acc > 0.8, "held-out accuracy {acc}");
    }
}
