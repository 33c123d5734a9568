//! Measurement machinery: pixel losses, ranking aggregation with a
//! chi-square independence test, text interpolation, attention heatmaps and
//! the label-entropy probe.

use candle_core::{DType, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{normalize, CaptionedImage, CAPTIONS_PER_IMAGE};
use crate::error::{Error, Result};
use crate::model::Editor;
use crate::nn::device;
use crate::text::WordEmbeddings;
use crate::train::eval_image;

/// Per-pixel reconstruction errors in the `[0, 1]` display range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelLosses {
    pub l1: f64,
    pub l2: f64,
    pub items: usize,
}

/// Description used for item `index` of an evaluation split; cycling
/// through the captions keeps every template represented.
pub fn eval_caption(item: &CaptionedImage, index: usize) -> &str {
    &item.captions[index % CAPTIONS_PER_IMAGE]
}

/// [`pixel_losses`] over an arbitrary generator `f(images, texts)`, with
/// images normalised to `dtype`.
pub fn pixel_losses_with(
    items: &[CaptionedImage],
    image_size: usize,
    batch_size: usize,
    dtype: DType,
    mut f: impl FnMut(&Tensor, &[&str]) -> Result<Tensor>,
) -> Result<PixelLosses> {
    if items.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let (mut l1, mut l2, mut n) = (0.0, 0.0, 0usize);
    for (chunk_index, chunk) in items.chunks(batch_size.max(1)).enumerate() {
        let images = chunk.iter().map(|i| eval_image(i, image_size)).collect::<Result<Vec<_>>>()?;
        let x = normalize(&images.iter().collect::<Vec<_>>(), dtype, &device())?;
        let base = chunk_index * batch_size.max(1);
        let texts: Vec<&str> = chunk.iter().enumerate().map(|(k, it)| eval_caption(it, base + k)).collect();
        let y = f(&x, &texts)?;
        if y.dims() != x.dims() {
            return Err(Error::Shape(format!("generator returned {:?} for {:?}", y.dims(), x.dims())));
        }
        let d = ((y.to_dtype(DType::F64)? - x.to_dtype(DType::F64)?)? * 0.5)?;
        l1 += d.abs()?.sum_all()?.to_scalar::<f64>()?;
        l2 += d.sqr()?.sum_all()?.to_scalar::<f64>()?;
        n += d.elem_count();
    }
    Ok(PixelLosses {
        l1: l1 / n as f64,
        l2: l2 / n as f64,
        items: items.len(),
    })
}

/// Mean L1 and L2 between each image and its reconstruction from a
/// matching description.
pub fn pixel_losses(editor: &Editor, items: &[CaptionedImage], batch_size: usize) -> Result<PixelLosses> {
    pixel_losses_with(items, editor.image_size(), batch_size, editor.dtype(), |x, texts| {
        Ok(editor.manipulate(x, texts)?.image)
    })
}

// ---------------------------------------------------------------------------
// rankings

/// Human-study responses: each is an ordering of method indices, best first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub methods: Vec<String>,
    pub responses: Vec<Vec<usize>>,
}

impl RankingTable {
    pub fn validate(&self) -> Result<()> {
        let m = self.methods.len();
        if self.responses.is_empty() {
            return Err(Error::Data("ranking table has no responses".into()));
        }
        for (k, r) in self.responses.iter().enumerate() {
            let mut seen = vec![false; m];
            let complete = r.len() == m && r.iter().all(|&i| i < m && !std::mem::replace(&mut seen[i], true));
            if !complete {
                return Err(Error::Data(format!("response {k} is not a permutation of {m} methods: {r:?}")));
            }
        }
        Ok(())
    }

    /// Method × rank-position count table.
    pub fn contingency(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let m = self.methods.len();
        let mut counts = vec![vec![0.0; m]; m];
        for r in &self.responses {
            for (pos, &method) in r.iter().enumerate() {
                counts[method][pos] += 1.0;
            }
        }
        Ok(counts)
    }
}

/// Mean 1-based rank of each method; lower is better.
pub fn rank_aggregate(table: &RankingTable) -> Result<Vec<f64>> {
    let counts = table.contingency()?;
    let n = table.responses.len() as f64;
    Ok(counts
        .iter()
        .map(|row| row.iter().enumerate().map(|(pos, c)| (pos + 1) as f64 * c).sum::<f64>() / n)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of independence on a contingency table.
pub fn chi_square_independence(counts: &[Vec<f64>]) -> Result<ChiSquare> {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    if rows < 2 || cols < 2 || counts.iter().any(|r| r.len() != cols) {
        return Err(Error::Data("contingency table must be rectangular and at least 2x2".into()));
    }
    if counts.iter().flatten().any(|&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::Data("contingency counts must be finite and non-negative".into()));
    }
    let row_sums: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let mut statistic = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &observed) in row.iter().enumerate() {
            let expected = row_sums[i] * col_sums[j] / total;
            if !(expected > 0.0) {
                return Err(Error::Data(format!(
                    "expected count of cell ({i}, {j}) is zero; pool sparse rows or columns"
                )));
            }
            statistic += (observed - expected).powi(2) / expected;
        }
    }
    let dof = (rows - 1) * (cols - 1);
    let p_value = if statistic == 0.0 {
        1.0
    } else {
        statrs::function::gamma::gamma_ur(dof as f64 / 2.0, statistic / 2.0)
    };
    Ok(ChiSquare { statistic, dof, p_value })
}

// ---------------------------------------------------------------------------
// interpolation

/// Generates from per-position blends `(1 − λ)·W_a + λ·W_b` of two
/// equal-length descriptions, `λ = 0, 1/(steps − 1), …, 1`. `image` is one
/// `(1, 3, S, S)` image; each frame is generated on its own, so the end
/// frames equal direct generation exactly.
pub fn interpolate_text(editor: &Editor, image: &Tensor, text_a: &str, text_b: &str, steps: usize) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(Error::InvalidDescription(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if image.dims().first() != Some(&1) {
        return Err(Error::Shape(format!("interpolation takes one image, got {:?}", image.dims())));
    }
    let a = editor.tokenize(text_a)?;
    let b = editor.tokenize(text_b)?;
    if a.len() != b.len() {
        return Err(Error::InvalidDescription(format!(
            "interpolated descriptions must have equal length, got {} and {} words",
            a.len(),
            b.len()
        )));
    }
    let wa = editor.encode(&[a])?;
    let wb = editor.encode(&[b])?;
    (0..steps)
        .map(|k| {
            let words = match k {
                0 => wa.clone(),
                k if k == steps - 1 => wb.clone(),
                k => WordEmbeddings::lerp(&wa, &wb, k as f64 / (steps - 1) as f64)?,
            };
            Ok(editor.generate(image, &words)?.image)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// heatmaps

/// Per-word attention maps at image resolution, each scaled to max 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSet {
    pub words: Vec<String>,
    pub size: usize,
    /// Row-major `size × size` maps, one per word.
    pub maps: Vec<Vec<f32>>,
}

/// Half-pixel-centred bilinear resize of a row-major `h × w` grid.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Attention of each word over the image. `scale` selects the pyramid
/// level (1 = deepest, the default).
pub fn attention_heatmaps(editor: &Editor, image: &Tensor, text: &str, scale: Option<usize>) -> Result<HeatmapSet> {
    if image.dims().first() != Some(&1) {
        return Err(Error::Shape(format!("heatmaps take one image, got {:?}", image.dims())));
    }
    let tokens = editor.tokenize(text)?;
    let words = editor.encode(std::slice::from_ref(&tokens))?;
    let out = editor.generate(image, &words)?;
    let size = editor.image_size();
    let scale = scale.unwrap_or(1);
    let maps = match out.attention.iter().find(|a| a.scale == scale) {
        Some(att) => {
            let alpha = att.alpha.get(0)?.to_dtype(DType::F32)?.t()?.contiguous()?.to_vec2::<f32>()?;
            alpha
                .iter()
                .map(|column| {
                    let mut m = bilinear_resize(column, att.height, att.width, size, size);
                    let max = m.iter().copied().fold(0f32, f32::max);
                    if max > 0.0 {
                        m.iter_mut().for_each(|v| *v /= max);
                    }
                    m
                })
                .collect()
        }
        None if editor.is_identity() => vec![vec![0.0; size * size]; tokens.len()],
        None => return Err(Error::Shape(format!("generator has no attention at scale {scale}"))),
    };
    Ok(HeatmapSet {
        words: tokens.words,
        size,
        maps,
    })
}

impl HeatmapSet {
    pub fn map_image(&self, word: usize) -> GrayImage {
        let s = self.size as u32;
        GrayImage::from_fn(s, s, |x, y| Luma([(self.maps[word][(y * s + x) as usize] * 255.0).round() as u8]))
    }

    pub fn map_png(&self, word: usize) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.map_image(word).write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Source image followed by one red overlay per word, side by side.
    pub fn grid(&self, source: &RgbImage) -> RgbImage {
        let s = self.size as u32;
        let mut out = RgbImage::new(s * (self.words.len() as u32 + 1), s);
        image::imageops::replace(&mut out, source, 0, 0);
        for (k, map) in self.maps.iter().enumerate() {
            let tile = RgbImage::from_fn(s, s, |x, y| {
                let a = map[(y * s + x) as usize] as f64 * 0.7;
                let p = source.get_pixel(x, y);
                let mix = |c: u8, t: f64| ((1.0 - a) * c as f64 * 0.6 + a * t).round() as u8;
                Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)])
            });
            image::imageops::replace(&mut out, &tile, (s * (k as u32 + 1)) as i64, 0);
        }
        out
    }
}

/// Mean of `map` inside the mask over its mean outside; `None` when either
/// side is empty or the outside mean is zero.
pub fn mask_contrast(map: &[f32], mask: &GrayImage) -> Option<f64> {
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for (v, p) in map.iter().zip(mask.pixels()) {
        let side = if p[0] > 0 { &mut inside } else { &mut outside };
        side.0 += *v as f64;
        side.1 += 1;
    }
    if inside.1 == 0 || outside.1 == 0 || outside.0 == 0.0 {
        return None;
    }
    Some((inside.0 / inside.1 as f64) / (outside.0 / outside.1 as f64))
}

// ---------------------------------------------------------------------------
// label entropy

/// Shannon entropy in nats; zero-probability classes contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub probabilities: Vec<f64>,
    pub entropy_nats: f64,
    pub entropy_bits: f64,
}

impl LabelDistribution {
    pub fn new(probabilities: Vec<f64>) -> Self {
        let nats = entropy(&probabilities);
        Self {
            probabilities,
            entropy_nats: nats,
            entropy_bits: nats / std::f64::consts::LN_2,
        }
    }
}

/// Anything that maps a normalised image batch to class probabilities.
pub trait LabelClassifier {
    fn num_classes(&self) -> usize;
    /// `(B, 3, S, S)` in `[-1, 1]` → `(B, C)` rows summing to one.
    fn probabilities(&self, images: &Tensor) -> Result<Tensor>;
}

/// Class distribution and entropy of every image.
pub fn label_entropy_probe(
    classifier: &dyn LabelClassifier,
    images: &Tensor,
    expected_classes: usize,
) -> Result<Vec<LabelDistribution>> {
    if classifier.num_classes() != expected_classes {
        return Err(Error::Data(format!(
            "classifier predicts {} classes, corpus has {expected_classes}",
            classifier.num_classes()
        )));
    }
    let p = classifier.probabilities(images)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(p.into_iter().map(LabelDistribution::new).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub reconstructed_nats: f64,
    pub manipulated_nats: f64,
    pub reconstructed_bits: f64,
    pub manipulated_bits: f64,
}

impl EntropySummary {
    pub fn new(reconstructed: &[LabelDistribution], manipulated: &[LabelDistribution]) -> Self {
        let mean = |d: &[LabelDistribution]| d.iter().map(|x| x.entropy_nats).sum::<f64>() / d.len().max(1) as f64;
        let (r, m) = (mean(reconstructed), mean(manipulated));
        Self {
            reconstructed_nats: r,
            manipulated_nats: m,
            reconstructed_bits: r / std::f64::consts::LN_2,
            manipulated_bits: m / std::f64::consts::LN_2,
        }
    }
}

/// Machine-readable evaluation record; [`EvalReport::table`] renders it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: String,
    pub losses: PixelLosses,
    pub entropy: Option<EntropySummary>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "checkpoint {}  split {}  items {}\nL1 {:.4}\nL2 {:.4}\n",
            self.checkpoint, self.split, self.losses.items, self.losses.l1, self.losses.l2
        );
        if let Some(e) = &self.entropy {
            s.push_str(&format!(
                "label entropy, reconstructed {:.4} nats ({:.4} bits)\nlabel entropy, manipulated   {:.4} nats ({:.4} bits)\n",
                e.reconstructed_nats, e.reconstructed_bits, e.manipulated_nats, e.manipulated_bits
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_generate;
    use crate::text::Vocabulary;

    #[test]
    fn identity_model_has_zero_pixel_loss() {
        let corpus = synth_generate(5, 2, 64).unwrap();
        let vocab = Vocabulary::build(corpus.items.iter().flat_map(|i| i.captions.iter().map(String::as_str)));
        let losses = pixel_losses(&Editor::identity(vocab, 64), &corpus.items, 2).unwrap();
        assert_eq!((losses.l1, losses.l2, losses.items), (0.0, 0.0, 5));
    }

    #[test]
    fn constant_grey_model_matches_scalar_loop() {
        let corpus = synth_generate(7, 3, 64).unwrap();
        let got = pixel_losses_with(&corpus.items, 64, 3, DType::F64, |x, _| Ok(x.zeros_like()?)).unwrap();
        let (mut l1, mut l2, mut n) = (0.0, 0.0, 0.0);
        for item in &corpus.items {
            for p in item.image.pixels() {
                for &c in &p.0 {
                    let v = (c as f32 / 127.5 - 1.0) as f64;
                    l1 += (v / 2.0).abs();
                    l2 += (v / 2.0) * (v / 2.0);
                    n += 1.0;
                }
            }
        }
        assert!((got.l1 - l1 / n).abs() < 1e-10);
        assert!((got.l2 - l2 / n).abs() < 1e-10);
    }

    #[test]
    fn empty_split_is_a_data_error() {
        let r = pixel_losses(&Editor::identity(Vocabulary::build(["a"]), 64), &[], 4);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn rank_aggregation_cases() {
        let mut t = RankingTable {
            methods: vec!["A".into(), "B".into()],
            responses: vec![vec![0, 1]],
        };
        assert_eq!(rank_aggregate(&t).unwrap(), vec![1.0, 2.0]);
        t.responses.push(vec![1, 0]);
        assert_eq!(rank_aggregate(&t).unwrap(), vec![1.5, 1.5]);
        t.responses.push(vec![0, 0]);
        assert!(matches!(rank_aggregate(&t), Err(Error::Data(_))));
        t.responses = vec![];
        assert!(matches!(rank_aggregate(&t), Err(Error::Data(_))));
    }

    #[test]
    fn chi_square_rejects_empty_margins() {
        assert!(matches!(chi_square_independence(&[vec![0.0, 0.0], vec![1.0, 2.0]]), Err(Error::Data(_))));
        assert!(matches!(chi_square_independence(&[vec![1.0, 2.0]]), Err(Error::Data(_))));
        assert!(matches!(chi_square_independence(&[vec![1.0, 2.0], vec![1.0]]), Err(Error::Data(_))));
    }

    #[test]
    fn bilinear_resize_preserves_constants_and_interpolates() {
        assert!(bilinear_resize(&[0.25; 6], 2, 3, 7, 5).iter().all(|&v| v == 0.25));
        // 1×2 → 1×4: centres at 0.25, 0.75 of the way across the two cells
        let r = bilinear_resize(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(r, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let c = 18;
        assert!((entropy(&vec![1.0 / c as f64; c]) - (c as f64).ln()).abs() < 1e-12);
        let d = LabelDistribution::new(vec![0.5, 0.5]);
        assert!((d.entropy_bits - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_contrast_ratio() {
        let mask = GrayImage::from_fn(2, 2, |x, _| Luma([if x == 0 { 255 } else { 0 }]));
        assert_eq!(mask_contrast(&[1.0, 0.5, 1.0, 0.5], &mask), Some(2.0));
        assert_eq!(mask_contrast(&[1.0, 0.0, 1.0, 0.0], &mask), None);
    }
}
