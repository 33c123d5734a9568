//! Encoder–decoder generators conditioned on word features.
//!
//! * `Single` injects word-context features only at the deepest encoder
//!   output: `[V₁ ∘ F(V₁, W)] → residual blocks → decoder`.
//! * `Multi` starts from `h₀ = NN↑(F(V₁, W))` and climbs the pyramid with
//!   `hᵢ = NN↑(Conv(F(Vᵢ₊₁, W) ∘ hᵢ₋₁))`; the last hidden state is joined
//!   with the half-resolution encoder features before the residual blocks.
//!
//! `∘` is channel-wise concatenation of spatially aligned tensors. Every
//! convolution is bias-free and the output layer has no normalisation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_feature_map, WordProjection};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, upsample_nearest2x, BatchNorm2d, Conv2d, Init, Mode};
use crate::text::WordEmbeddings;

pub const SUPPORTED_SIZES: [usize; 3] = [64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMode {
    Single,
    Multi,
}

impl std::str::FromStr for GeneratorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(Error::Data(format!("unknown generator mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Multi => "multi",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub mode: GeneratorMode,
    pub image_size: usize,
    /// Number of pyramid scales `m`.
    pub scales: usize,
    /// Output channels of the `m + 1` stride-2 encoder convolutions, at
    /// resolutions `/2, /4, …, /2^(m+1)`.
    pub encoder_channels: Vec<usize>,
    /// Output channels of the `m - 1` fusion convolutions (multi mode).
    pub fusion_channels: Vec<usize>,
    pub residual_blocks: usize,
    pub word_dim: usize,
    /// Multi mode: move the last residual convolution into the encoder as
    /// an extra stride-1 layer after the first one.
    pub relocate_last_conv: bool,
}

impl GeneratorConfig {
    /// Default channel plan for a resolution.
    pub fn new(mode: GeneratorMode, image_size: usize, word_dim: usize) -> Self {
        let encoder_channels = match image_size {
            64 => vec![8, 16, 32, 64],
            128 => vec![16, 32, 64, 128],
            _ => vec![16, 32, 64, 128],
        };
        let fusion_channels = vec![encoder_channels[1], encoder_channels[0]];
        Self {
            mode,
            image_size,
            scales: 3,
            encoder_channels,
            fusion_channels,
            residual_blocks: 4,
            word_dim,
            relocate_last_conv: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.scales;
        if m < 1 {
            return Err(Error::Shape("at least one scale is required".into()));
        }
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            return Err(Error::Shape(format!(
                "unsupported image size {}; expected one of {SUPPORTED_SIZES:?}",
                self.image_size
            )));
        }
        if self.encoder_channels.len() != m + 1 {
            return Err(Error::Shape(format!(
                "{m} scales need {} encoder layers, got {}",
                m + 1,
                self.encoder_channels.len()
            )));
        }
        if self.fusion_channels.len() != m - 1 {
            return Err(Error::Shape(format!(
                "{m} scales need {} fusion layers, got {}",
                m - 1,
                self.fusion_channels.len()
            )));
        }
        if self.image_size % (1 << (m + 1)) != 0 {
            return Err(Error::Shape(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                m + 1
            )));
        }
        if self.residual_blocks == 0 {
            return Err(Error::Shape("at least one residual block is required".into()));
        }
        Ok(())
    }

    fn relocates(&self) -> bool {
        self.mode == GeneratorMode::Multi && self.relocate_last_conv
    }

    /// Side length of scale `V_i` (1 = deepest).
    pub fn scale_side(&self, i: usize) -> usize {
        self.image_size >> (self.scales + 2 - i)
    }

    fn residual_width(&self) -> usize {
        match self.mode {
            GeneratorMode::Single => 2 * self.encoder_channels[self.scales],
            GeneratorMode::Multi => {
                self.fusion_channels.last().copied().unwrap_or(self.encoder_channels[self.scales])
                    + self.encoder_channels[0]
            }
        }
    }
}

/// Image features `(V_m, …, V_1)` plus the half-resolution map.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// First encoder output at half resolution.
    pub visual: Tensor,
    /// `V_m … V_1`, largest first.
    pub scales: Vec<Tensor>,
}

impl FeaturePyramid {
    /// `V_i`, 1-based, `V_1` deepest.
    pub fn scale(&self, i: usize) -> &Tensor {
        &self.scales[self.scales.len() - i]
    }

    pub fn deepest(&self) -> &Tensor {
        self.scale(1)
    }
}

#[derive(Clone, Debug)]
pub struct HiddenState {
    pub tensor: Tensor,
    pub index: usize,
}

/// Attention weights of one scale, `alpha: (B, H·W, L)`.
#[derive(Clone, Debug)]
pub struct ScaleAttention {
    pub scale: usize,
    pub alpha: Tensor,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub image: Tensor,
    /// Deepest scale first.
    pub attention: Vec<ScaleAttention>,
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mut s = init.pp(name);
        Ok(Self {
            conv: Conv2d::new(&mut s, "conv", cin, cout, 3, stride)?,
            bn: BatchNorm2d::new(&mut s, "bn", cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// Pre-activation residual block; `second` is absent when its convolution
/// was relocated to the encoder.
#[derive(Clone, Debug)]
struct ResidualBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    second: Option<(BatchNorm2d, Conv2d)>,
}

impl ResidualBlock {
    fn new(init: &mut Init, name: &str, width: usize, two_convs: bool) -> Result<Self> {
        let mut s = init.pp(name);
        let bn1 = BatchNorm2d::new(&mut s, "bn1", width)?;
        let conv1 = Conv2d::new(&mut s, "conv1", width, width, 3, 1)?;
        let second = if two_convs {
            Some((
                BatchNorm2d::new(&mut s, "bn2", width)?,
                Conv2d::new(&mut s, "conv2", width, width, 3, 1)?,
            ))
        } else {
            None
        };
        Ok(Self { bn1, conv1, second })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.conv1.forward(&self.bn1.forward(x, mode)?.relu()?)?;
        if let Some((bn2, conv2)) = &self.second {
            y = conv2.forward(&bn2.forward(&y, mode)?.relu()?)?;
        }
        Ok((x + y)?)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    encoder: Vec<ConvBn>,
    relocated: Option<ConvBn>,
    /// Index `i - 1` serves `V_i`.
    projections: Vec<WordProjection>,
    /// Index `k` fuses `V_{k+2}` with `h_k`.
    fusions: Vec<ConvBn>,
    residual: Vec<ResidualBlock>,
    residual_out: BatchNorm2d,
    decoder: Vec<ConvBn>,
    output: Conv2d,
}

impl Generator {
    pub fn new(init: &mut Init, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let m = config.scales;
        let enc = &config.encoder_channels;

        let mut encoder = Vec::with_capacity(m + 1);
        let mut cin = 3;
        for (k, &c) in enc.iter().enumerate() {
            encoder.push(ConvBn::new(init, &format!("encoder.{k}"), cin, c, 2)?);
            cin = c;
        }
        let relocated = if config.relocates() {
            Some(ConvBn::new(init, "encoder.relocated", enc[0], enc[0], 1)?)
        } else {
            None
        };

        let projection_count = match config.mode {
            GeneratorMode::Single => 1,
            GeneratorMode::Multi => m,
        };
        let projections = (1..=projection_count)
            .map(|i| {
                WordProjection::new(init, &format!("projection.{i}"), enc[m + 1 - i], config.word_dim)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut fusions = Vec::new();
        if config.mode == GeneratorMode::Multi {
            let mut hidden = enc[m];
            for k in 0..m - 1 {
                let v_channels = enc[m - 1 - k];
                let out = config.fusion_channels[k];
                fusions.push(ConvBn::new(
                    init,
                    &format!("fusion.{k}"),
                    v_channels + hidden,
                    out,
                    1,
                )?);
                hidden = out;
            }
        }

        let width = config.residual_width();
        let residual = (0..config.residual_blocks)
            .map(|b| {
                let last = b + 1 == config.residual_blocks;
                ResidualBlock::new(init, &format!("residual.{b}"), width, !(last && config.relocates()))
            })
            .collect::<Result<Vec<_>>>()?;
        let residual_out = BatchNorm2d::new(init, "residual.out_bn", width)?;

        let mut decoder = Vec::new();
        let mut cin = width;
        if config.mode == GeneratorMode::Single {
            for k in (0..m).rev() {
                decoder.push(ConvBn::new(init, &format!("decoder.{}", m - 1 - k), cin, enc[k], 1)?);
                cin = enc[k];
            }
        }
        let output = Conv2d::new(init, "decoder.output", cin, 3, 3, 1)?;

        Ok(Self {
            config,
            encoder,
            relocated,
            projections,
            fusions,
            residual,
            residual_out,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let dims = image.dims();
        let ok = dims.len() == 4
            && dims[1] == 3
            && dims[2] == dims[3]
            && dims[2] == self.config.image_size;
        if !ok {
            return Err(Error::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}), got {dims:?}",
                s = self.config.image_size
            )));
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        self.check_image(image)?;
        let mut x = self.encoder[0].forward(image, mode)?;
        if let Some(extra) = &self.relocated {
            x = extra.forward(&x, mode)?;
        }
        let visual = x.clone();
        let mut scales = Vec::with_capacity(self.config.scales);
        for layer in &self.encoder[1..] {
            x = layer.forward(&x, mode)?;
            scales.push(x.clone());
        }
        Ok(FeaturePyramid { visual, scales })
    }

    /// `F^attn(V_i, W)` as NCHW plus the attention weights.
    pub fn word_context(
        &self,
        pyramid: &FeaturePyramid,
        scale: usize,
        words: &WordEmbeddings,
    ) -> Result<(Tensor, ScaleAttention)> {
        let v = pyramid.scale(scale);
        let (_, _, h, w) = v.dims4()?;
        let (ctx, alpha) = attend_feature_map(v, words, &self.projections[scale - 1])?;
        Ok((
            ctx,
            ScaleAttention {
                scale,
                alpha,
                height: h,
                width: w,
            },
        ))
    }

    /// `h_0 = NN↑(F(V_1, W))`.
    pub fn initial_hidden(
        &self,
        pyramid: &FeaturePyramid,
        words: &WordEmbeddings,
    ) -> Result<(HiddenState, ScaleAttention)> {
        let (ctx, att) = self.word_context(pyramid, 1, words)?;
        Ok((
            HiddenState {
                tensor: upsample_nearest2x(&ctx)?,
                index: 0,
            },
            att,
        ))
    }

    /// `h_i = NN↑(Conv(F(V, W) ∘ h_{i-1}))` where `V` is scale `i + 1`.
    pub fn attn_fusion(
        &self,
        prev: &HiddenState,
        pyramid: &FeaturePyramid,
        words: &WordEmbeddings,
        mode: Mode,
    ) -> Result<(HiddenState, ScaleAttention)> {
        let k = prev.index;
        let scale = k + 2;
        if self.config.mode != GeneratorMode::Multi || k >= self.fusions.len() {
            return Err(Error::Shape(format!("no fusion step after h_{k}")));
        }
        let v = pyramid.scale(scale);
        let (_, _, vh, vw) = v.dims4()?;
        let (_, _, hh, hw) = prev.tensor.dims4()?;
        if (vh, vw) != (hh, hw) {
            return Err(Error::Shape(format!(
                "hidden state is {hh}x{hw} but V_{scale} is {vh}x{vw}"
            )));
        }
        let (ctx, att) = self.word_context(pyramid, scale, words)?;
        let joined = Tensor::cat(&[&ctx, &prev.tensor], 1)?;
        let fused = self.fusions[k].forward(&joined, mode)?;
        Ok((
            HiddenState {
                tensor: upsample_nearest2x(&fused)?,
                index: k + 1,
            },
            att,
        ))
    }

    /// Manipulated image in `[-1, 1]`, same shape as the input.
    pub fn generate(&self, image: &Tensor, words: &WordEmbeddings, mode: Mode) -> Result<GeneratorOutput> {
        self.check_image(image)?;
        let b = image.dims()[0];
        if words.batch() != b {
            return Err(Error::Shape(format!(
                "{} descriptions for {b} images",
                words.batch()
            )));
        }
        if words.dim() != self.config.word_dim {
            return Err(Error::Shape(format!(
                "word features have width {}, generator expects {}",
                words.dim(),
                self.config.word_dim
            )));
        }
        let pyramid = self.encode_image(image, mode)?;
        let mut attention = Vec::new();
        let mut x = match self.config.mode {
            GeneratorMode::Single => {
                let (ctx, att) = self.word_context(&pyramid, 1, words)?;
                attention.push(att);
                Tensor::cat(&[pyramid.deepest(), &ctx], 1)?
            }
            GeneratorMode::Multi => {
                let (mut hidden, att) = self.initial_hidden(&pyramid, words)?;
                attention.push(att);
                while hidden.index < self.fusions.len() {
                    let (next, att) = self.attn_fusion(&hidden, &pyramid, words, mode)?;
                    attention.push(att);
                    hidden = next;
                }
                Tensor::cat(&[&hidden.tensor, &pyramid.visual], 1)?
            }
        };
        for block in &self.residual {
            x = block.forward(&x, mode)?;
        }
        x = self.residual_out.forward(&x, mode)?.relu()?;
        for layer in &self.decoder {
            x = layer.forward(&upsample_nearest2x(&x)?, mode)?;
        }
        let image_out = self.output.forward(&upsample_nearest2x(&x)?)?.tanh()?;
        ensure_finite(&image_out, "generator output")?;
        Ok(GeneratorOutput {
            image: image_out,
            attention,
        })
    }
}
