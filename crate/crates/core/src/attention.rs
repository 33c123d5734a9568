//! Word–region matching: words are projected into the channel space of an
//! image feature map, every region attends over the words with a softmax,
//! and the attended projections form the word-context features.
//!
//! Shapes follow a batched layout: features `(B, M, N)`, word features
//! `(B, D, L)`, projection `U: (M, D)`, attention `(B, N, L)`.

use std::io::{Read, Write};

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{additive_mask, softmax, Init};
use crate::text::WordEmbeddings;

/// `U: M × D`, one per feature scale.
#[derive(Clone, Debug)]
pub struct WordProjection {
    weight: Var,
}

impl WordProjection {
    pub fn new(init: &mut Init, name: &str, channels: usize, word_dim: usize) -> Result<Self> {
        let weight = init.pp(name).normal(
            "weight",
            &[channels, word_dim],
            0.0,
            1.0 / (word_dim as f64).sqrt(),
        )?;
        Ok(Self { weight })
    }

    pub fn from_var(weight: Var) -> Self {
        Self { weight }
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// `W′ = U W`: `(B, D, L) -> (B, M, L)`.
pub fn project_words(words: &Tensor, projection: &Tensor) -> Result<Tensor> {
    let (_, d, _) = words.dims3()?;
    let (_, pd) = projection.dims2()?;
    if pd != d {
        return Err(Error::Shape(format!(
            "projection expects word width {pd}, got {d}"
        )));
    }
    Ok(crate::nn::matmul_t(&words.transpose(1, 2)?, projection)?.transpose(1, 2)?)
}

/// `α[b, i, j] = softmax_j(v_iᵀ w′_j)`, normalised over words. Optional
/// `mask` is `(B, L)` with 1 for real words and 0 for padding.
pub fn attention_weights(
    features: &Tensor,
    projected: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, m, _) = features.dims3()?;
    let (pb, pm, _) = projected.dims3()?;
    if m != pm || b != pb {
        return Err(Error::Shape(format!(
            "feature map {:?} and projected words {:?} disagree",
            features.dims(),
            projected.dims()
        )));
    }
    let logits = features.transpose(1, 2)?.matmul(projected)?;
    let additive = match mask {
        Some(mask) => Some(additive_mask(mask)?.unsqueeze(1)?),
        None => None,
    };
    softmax(&logits, 2, additive.as_ref())
}

/// Word-context features `V′ = W′ αᵀ` (`(B, M, N)`) and the attention map.
pub fn word_context_features(
    features: &Tensor,
    words: &Tensor,
    projection: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let projected = project_words(words, projection)?;
    let alpha = attention_weights(features, &projected, mask)?;
    let context = projected.matmul(&alpha.transpose(1, 2)?)?;
    Ok((context, alpha))
}

/// Convenience wrapper over an NCHW feature map, returning `V′` in the same
/// NCHW layout and `α` as `(B, H·W, L)`.
pub fn attend_feature_map(
    feature_map: &Tensor,
    words: &WordEmbeddings,
    projection: &WordProjection,
) -> Result<(Tensor, Tensor)> {
    let (b, m, h, w) = feature_map.dims4()?;
    if projection.channels() != m {
        return Err(Error::Shape(format!(
            "projection serves {} channels, feature map has {m}",
            projection.channels()
        )));
    }
    if words.batch() != b {
        return Err(Error::Shape(format!(
            "{} descriptions for {b} images",
            words.batch()
        )));
    }
    let flat = feature_map.reshape((b, m, h * w))?;
    let mask = if words.is_dense() { None } else { Some(words.mask()?) };
    let (context, alpha) =
        word_context_features(&flat, &words.tensor, projection.weight(), mask.as_ref())?;
    Ok((context.reshape((b, m, h, w))?, alpha))
}

/// Single attention map with its spatial layout, for export.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub words: usize,
    /// Row-major `N × L` weights, `N = height · width`.
    pub weights: Vec<f32>,
}

const MAGIC: &[u8; 4] = b"LEAM";
const VERSION: u32 = 1;

impl AttentionMap {
    /// Extracts item `index` of a `(B, N, L)` attention tensor.
    pub fn from_tensor(alpha: &Tensor, index: usize, height: usize, width: usize) -> Result<Self> {
        let (_, n, l) = alpha.dims3()?;
        if n != height * width {
            return Err(Error::Shape(format!("{n} regions is not {height}x{width}")));
        }
        let weights = alpha
            .get(index)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self {
            height,
            width,
            words: l,
            weights,
        })
    }

    pub fn regions(&self) -> usize {
        self.height * self.width
    }

    /// Column `word` as an `H × W` row-major grid.
    pub fn word_map(&self, word: usize) -> Vec<f32> {
        (0..self.regions())
            .map(|i| self.weights[i * self.words + word])
            .collect()
    }

    /// Binary export: `LEAM`, u32 version, then N, L, H, W as little-endian
    /// u32, followed by `N · L` little-endian f32 in row-major order.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.regions() as u32,
            self.words as u32,
            self.height as u32,
            self.width as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for w in &self.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("attention map: {m}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *h = u32::from_le_bytes(b);
        }
        let [version, n, l, height, width] = header.map(|v| v as usize);
        if version != VERSION as usize {
            return Err(bad("unsupported version"));
        }
        if n != height * width {
            return Err(bad("region count disagrees with H x W"));
        }
        let mut weights = vec![0f32; n * l];
        for w in &mut weights {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|_| bad("truncated payload"))?;
            *w = f32::from_le_bytes(b);
        }
        Ok(Self {
            height,
            width,
            words: l,
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    fn t3(data: &[f64], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &device()).unwrap()
    }

    #[test]
    fn identity_projection_returns_words() {
        let w = t3(&[1., 2., 3., 4., 5., 6.], (1, 2, 3));
        let u = Tensor::eye(2, DType::F64, &device()).unwrap();
        let p = project_words(&w, &u).unwrap();
        assert_eq!(p.to_vec3::<f64>().unwrap(), w.to_vec3::<f64>().unwrap());
        let z = project_words(&w, &u.zeros_like().unwrap()).unwrap();
        assert_eq!(z.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn projection_matches_triple_loop() {
        let u = [[0.3, -1.2], [0.7, 0.1], [-0.4, 2.0]];
        let w = [[1.0, -2.0, 0.5, 3.0], [0.25, 1.5, -1.0, 0.0]];
        let ut = Tensor::new(&u, &device()).unwrap();
        let wt = Tensor::new(&[w], &device()).unwrap();
        let got = project_words(&wt, &ut).unwrap().to_vec3::<f64>().unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += u[i][k] * w[k][j];
                }
                assert!((got[0][i][j] - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn projection_rejects_width_mismatch() {
        let w = t3(&[0.; 6], (1, 3, 2));
        let u = Tensor::zeros((2, 2), DType::F64, &device()).unwrap();
        assert!(matches!(project_words(&w, &u), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_rejects_channel_mismatch() {
        let v = t3(&[0.; 6], (1, 3, 2));
        let p = t3(&[0.; 4], (1, 2, 2));
        assert!(matches!(attention_weights(&v, &p, None), Err(Error::Shape(_))));
    }

    #[test]
    fn equal_logits_give_uniform_attention() {
        let v = t3(&[0.; 8], (1, 2, 4));
        let p = t3(&[1., 2., 3., 4., 5., 6.], (1, 2, 3));
        let a = attention_weights(&v, &p, None).unwrap().to_vec3::<f64>().unwrap();
        for row in &a[0] {
            for x in row {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_word_takes_all_attention_and_context() {
        let v = t3(&[0.3, -0.2, 1.0, 0.5, 0.1, 2.0], (1, 2, 3));
        let w = t3(&[0.7, -0.4, 0.2], (1, 3, 1));
        let u = Tensor::new(&[[1.0, 0.5, -1.0], [0.2, 0.1, 0.3]], &device()).unwrap();
        let (ctx, a) = word_context_features(&v, &w, &u, None).unwrap();
        for row in &a.to_vec3::<f64>().unwrap()[0] {
            assert_eq!(row, &vec![1.0]);
        }
        let proj = project_words(&w, &u).unwrap().to_vec3::<f64>().unwrap();
        let ctx = ctx.to_vec3::<f64>().unwrap();
        for m in 0..2 {
            for n in 0..3 {
                assert!((ctx[0][m][n] - proj[0][m][0]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_case_matches_scalar_evaluation() {
        // N=2 regions, L=3 words, M=2 channels; U = I so w′ = w.
        let v = [[0.5, -1.0], [2.0, 0.25]]; // v[m][i]
        let w = [[1.0, 0.0, -1.0], [0.5, 2.0, 1.5]]; // w[m][j]
        let vt = Tensor::new(&[v], &device()).unwrap();
        let wt = Tensor::new(&[w], &device()).unwrap();
        let u = Tensor::eye(2, DType::F64, &device()).unwrap();
        let (ctx, a) = word_context_features(&vt, &wt, &u, None).unwrap();
        let a = a.to_vec3::<f64>().unwrap();
        let ctx = ctx.to_vec3::<f64>().unwrap();
        for i in 0..2 {
            let logits: Vec<f64> = (0..3).map(|j| v[0][i] * w[0][j] + v[1][i] * w[1][j]).collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                assert!((a[0][i][j] - logits[j].exp() / z).abs() < 1e-12);
            }
            for m in 0..2 {
                let expect: f64 = (0..3).map(|j| logits[j].exp() / z * w[m][j]).sum();
                assert!((ctx[0][m][i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_words_receive_no_attention() {
        let v = t3(&[0.3, -0.2, 1.0, 0.5], (1, 2, 2));
        let p = t3(&[1., 2., 100., 3., 4., 100.], (1, 2, 3));
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &device()).unwrap();
        let a = attention_weights(&v, &p, Some(&mask)).unwrap().to_vec3::<f64>().unwrap();
        for row in &a[0] {
            assert_eq!(row[2], 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_map_binary_round_trip() {
        let alpha = t3(&[0.1, 0.9, 0.5, 0.5, 1.0, 0.0, 0.3, 0.7], (1, 4, 2));
        let map = AttentionMap::from_tensor(&alpha, 0, 2, 2).unwrap();
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 5 * 4 + 8 * 4);
        assert_eq!(&buf[..4], b"LEAM");
        let back = AttentionMap::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, map);
        assert_eq!(map.word_map(1), vec![0.9, 0.5, 0.0, 0.7]);
        assert!(AttentionMap::read_from(&buf[..10]).is_err());
    }
}
