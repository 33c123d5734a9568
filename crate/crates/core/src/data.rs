//! Captioned image corpora.
//!
//! On-disk layout (shared by the bird/flower caption releases and the
//! synthetic corpus):
//!
//! ```text
//! <root>/images/<id>.{jpg,png}
//! <root>/text/<id>.txt          one caption per line, exactly 10
//! <root>/splits/<split>.txt     one "<id> <class>" entry per line
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CAPTIONS_PER_IMAGE: usize = 10;

/// Extra pixels kept around the target size for random cropping.
pub const CROP_MARGIN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    pub id: String,
    pub image: RgbImage,
    pub captions: Vec<String>,
    pub label: usize,
}

impl CaptionedImage {
    pub fn new(id: String, image: RgbImage, captions: Vec<String>, label: usize) -> Result<Self> {
        if captions.len() != CAPTIONS_PER_IMAGE {
            return Err(Error::Data(format!(
                "{id}: expected {CAPTIONS_PER_IMAGE} captions, found {}",
                captions.len()
            )));
        }
        if image.width() != image.height() {
            return Err(Error::Data(format!(
                "{id}: image is {}x{}, expected square",
                image.width(),
                image.height()
            )));
        }
        Ok(Self {
            id,
            image,
            captions,
            label,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cub,
    Oxford102,
    Synth,
}

impl DatasetKind {
    pub fn has_split(self, split: Split) -> bool {
        !(self == DatasetKind::Cub && split == Split::Val)
    }

    /// Published split sizes, where known.
    pub fn expected_count(self, split: Split) -> Option<usize> {
        match (self, split) {
            (DatasetKind::Oxford102, Split::Train) => Some(5_878),
            (DatasetKind::Oxford102, Split::Test) => Some(1_155),
            (DatasetKind::Cub, Split::Train) => Some(8_855),
            (DatasetKind::Cub, Split::Test) => Some(2_933),
            _ => None,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cub" => Ok(Self::Cub),
            "oxford102" | "oxford-102" | "oxford" => Ok(Self::Oxford102),
            "synth" => Ok(Self::Synth),
            other => Err(Error::Data(format!("unknown dataset '{other}'"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cub => "cub",
            Self::Oxford102 => "oxford102",
            Self::Synth => "synth",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

/// Parsed `<id> <class>` entries of a split list.
pub fn read_split_list(root: &Path, split: Split) -> Result<Vec<(String, usize)>> {
    let path = root.join("splits").join(format!("{}.txt", split.name()));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap_or_default().to_string();
        let label = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}:{}: expected '<id> <class>'", path.display(), n + 1)))?;
        entries.push((id, label));
    }
    Ok(entries)
}

fn image_path(root: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["jpg", "jpeg", "png"] {
        let p = root.join("images").join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!(
        "missing image file {}",
        root.join("images").join(format!("{id}.jpg")).display()
    )))
}

pub fn read_captions(root: &Path, id: &str) -> Result<Vec<String>> {
    let path = root.join("text").join(format!("{id}.txt"));
    if !path.is_file() {
        return Err(Error::Data(format!("missing caption file {}", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Loads one split, resizing each image so its shortest side is
/// `target + CROP_MARGIN` (synthetic images are kept at their canvas size).
pub fn load_split(root: &Path, kind: DatasetKind, split: Split, target: usize) -> Result<Vec<CaptionedImage>> {
    if !kind.has_split(split) {
        return Err(Error::Data(format!("{kind} has no {} split", split.name())));
    }
    let entries = read_split_list(root, split)?;
    if let Some(expected) = kind.expected_count(split) {
        if entries.len() != expected {
            log::warn!(
                "{kind} {} split lists {} items (published size {expected})",
                split.name(),
                entries.len()
            );
        }
    }
    let side = match kind {
        DatasetKind::Synth => target,
        _ => target + CROP_MARGIN,
    };
    entries
        .into_iter()
        .map(|(id, label)| {
            let path = image_path(root, &id)?;
            let image = resize_square(&read_image(&path)?, side);
            let captions = read_captions(root, &id)?;
            CaptionedImage::new(id, image, captions, label)
        })
        .collect()
}

/// Ensures no id appears in more than one of the given splits.
pub fn check_disjoint(root: &Path, splits: &[Split]) -> Result<()> {
    let mut seen = HashSet::new();
    for &split in splits {
        let path = root.join("splits").join(format!("{}.txt", split.name()));
        if !path.is_file() {
            continue;
        }
        for (id, _) in read_split_list(root, split)? {
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("image {id} appears in more than one split")));
            }
        }
    }
    Ok(())
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Resizes the shortest side to `side` and centre-crops to a square.
pub fn resize_square(image: &RgbImage, side: usize) -> RgbImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == side && h == side {
        return image.clone();
    }
    let scale = side as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(side as u32);
    let nh = ((h as f64 * scale).round() as u32).max(side as u32);
    let resized = DynamicImage::ImageRgb8(image.clone())
        .resize_exact(nw, nh, FilterType::Triangle)
        .to_rgb8();
    crop(&resized, (nw as usize - side) / 2, (nh as usize - side) / 2, side)
}

pub fn crop(image: &RgbImage, x: usize, y: usize, side: usize) -> RgbImage {
    image::imageops::crop_imm(image, x as u32, y as u32, side as u32, side as u32).to_image()
}

pub fn center_crop(image: &RgbImage, side: usize) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < side || h < side {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than the {side}px crop")));
    }
    Ok(crop(image, (w - side) / 2, (h - side) / 2, side))
}

/// Stacks images into a `(B, 3, H, W)` tensor with values in `[-1, 1]`.
pub fn normalize(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot normalise an empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?} images",
                (w, h),
                img.dimensions()
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p[c] as f32 / 127.5 - 1.0));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

/// Inverse of [`normalize`], rounding to the nearest byte.
pub fn denormalize(batch: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, c, h, w) = batch.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let values = batch.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    Ok((0..b)
        .map(|i| {
            let base = i * 3 * plane;
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let p = y as usize * w + x as usize;
                let px = |ch: usize| to_byte(values[base + ch * plane + p]);
                image::Rgb([px(0), px(1), px(2)])
            })
        })
        .collect())
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    fn write_corpus(root: &Path, ids: &[(&str, usize)], split: &str) {
        for d in ["images", "text", "splits"] {
            std::fs::create_dir_all(root.join(d)).unwrap();
        }
        let mut list = String::new();
        for (id, class) in ids {
            write_png(&root.join("images").join(format!("{id}.png")), &RgbImage::new(30, 20)).unwrap();
            let caps: Vec<String> = (0..10).map(|k| format!("caption {k} of {id}")).collect();
            std::fs::write(root.join("text").join(format!("{id}.txt")), caps.join("\n")).unwrap();
            list.push_str(&format!("{id} {class}\n"));
        }
        std::fs::write(root.join("splits").join(format!("{split}.txt")), list).unwrap();
    }

    #[test]
    fn loads_layout_and_resizes_with_margin() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[("a", 3), ("b", 7)], "train");
        let items = load_split(dir.path(), DatasetKind::Oxford102, Split::Train, 16).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].label, 7);
        assert_eq!(items[0].image.dimensions(), (32, 32));
        assert_eq!(items[0].captions.len(), 10);
    }

    #[test]
    fn empty_split_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[], "test");
        assert!(load_split(dir.path(), DatasetKind::Cub, Split::Test, 64).unwrap().is_empty());
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[("a", 0)], "train");
        std::fs::remove_file(dir.path().join("text/a.txt")).unwrap();
        match load_split(dir.path(), DatasetKind::Cub, Split::Train, 16) {
            Err(Error::Data(msg)) => assert!(msg.contains("text/a.txt"), "{msg}"),
            other => panic!("{other:?}"),
        }
        std::fs::remove_file(dir.path().join("images/a.png")).unwrap();
        match load_split(dir.path(), DatasetKind::Cub, Split::Train, 16) {
            Err(Error::Data(msg)) => assert!(msg.contains("images/a."), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bird_corpus_has_no_validation_split() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[("a", 0)], "val");
        assert!(matches!(
            load_split(dir.path(), DatasetKind::Cub, Split::Val, 16),
            Err(Error::Data(_))
        ));
        assert_eq!(load_split(dir.path(), DatasetKind::Oxford102, Split::Val, 16).unwrap().len(), 1);
    }

    #[test]
    fn published_split_sizes() {
        assert_eq!(DatasetKind::Oxford102.expected_count(Split::Train), Some(5_878));
        assert_eq!(DatasetKind::Cub.expected_count(Split::Test), Some(2_933));
    }

    #[test]
    fn wrong_caption_count_rejected() {
        let r = CaptionedImage::new("x".into(), RgbImage::new(4, 4), vec!["a".into()], 0);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn overlapping_splits_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &[("a", 0), ("b", 0)], "train");
        write_corpus(dir.path(), &[("c", 0)], "test");
        check_disjoint(dir.path(), &[Split::Train, Split::Val, Split::Test]).unwrap();
        write_corpus(dir.path(), &[("b", 0)], "test");
        assert!(check_disjoint(dir.path(), &[Split::Train, Split::Test]).is_err());
    }

    #[test]
    fn normalisation_round_trip_is_exact_on_bytes() {
        let img = RgbImage::from_fn(5, 5, |x, y| image::Rgb([(x * 50) as u8, (y * 60) as u8, 255]));
        let t = normalize(&[&img, &img], DType::F32, &device()).unwrap();
        assert_eq!(t.dims(), &[2, 3, 5, 5]);
        let back = denormalize(&t).unwrap();
        assert_eq!(back[1], img);
    }

    #[test]
    fn crops() {
        let img = RgbImage::from_fn(6, 6, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let c = crop(&img, 0, 0, 3);
        assert_eq!(c.get_pixel(2, 1).0, [2, 1, 0]);
        let c = center_crop(&img, 4).unwrap();
        assert_eq!(c.get_pixel(0, 0).0, [1, 1, 0]);
        assert!(matches!(center_crop(&img, 7), Err(Error::Shape(_))));
    }
}
