//! Labeled image sets.
//!
//! On disk a dataset is a directory of class folders holding PNGs, plus a
//! newline-delimited JSON manifest that fixes the train/test split:
//!
//! ```text
//! <root>/manifest.jsonl          {"image_id":"...","class":"...","split":"train"}
//! <root>/<class>/<image_id>.png
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: Tensor,
    pub class: usize,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    items: Vec<Item>,
    class_names: Vec<String>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(items: Vec<Item>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let k = class_names.len();
        if let Some(bad) = items.iter().find(|it| it.class >= k) {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: bad.class,
                len: k,
            });
        }
        if let Some(first) = items.first() {
            if let Some(bad) = items.iter().find(|it| it.image.shape() != first.image.shape()) {
                return Err(Error::dim(format!(
                    "image {} has shape {:?}, expected {:?}",
                    bad.image_id,
                    bad.image.shape(),
                    first.image.shape()
                )));
            }
        }
        Ok(Self {
            items,
            class_names,
            split,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Loads one split of an on-disk dataset as `channels`-channel images
    /// (1 = luma, 3 = RGB). Class indices follow the sorted class names of the
    /// whole manifest, so train and test agree.
    pub fn load(root: impl AsRef<Path>, split: Split, channels: usize) -> Result<Self> {
        let root = root.as_ref();
        let manifest = read_manifest(root)?;
        let class_names: Vec<String> = manifest
            .iter()
            .map(|e| e.class.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let items = manifest
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let path = root.join(&e.class).join(format!("{}.png", e.image_id));
                Ok(Item {
                    image: load_image(&path, channels)?,
                    class: class_names.binary_search(&e.class).expect("collected above"),
                    image_id: e.image_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, class_names, split)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub class: String,
    pub split: Split,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format("manifest", format!("line {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Decodes an image file to a `[C,H,W]` tensor with values in `[0,1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => {
            return Err(Error::InvalidArgument(format!(
                "images can be loaded with 1 or 3 channels, not {c}"
            )))
        }
    };
    // Interleaved HWC to planar CHW.
    Tensor::from_fn([channels, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        raw[rest * channels + c] as f32 / 255.0
    })
}

/// Encodes a `[C,H,W]` tensor with values in `[0,1]` as an 8-bit PNG.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let data = image.data();
    let result = match c {
        1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(data[y as usize * w + x as usize])])
        })
        .save(path),
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |ch: usize| to_u8(data[(ch * h + y as usize) * w + x as usize]);
            image::Rgb([at(0), at(1), at(2)])
        })
        .save(path),
        c => {
            return Err(Error::InvalidArgument(format!(
                "images can be saved with 1 or 3 channels, not {c}"
            )))
        }
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes train and test splits in the on-disk layout.
pub fn write_dataset(root: &Path, splits: &[&LabeledDataset]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join(MANIFEST);
    let mut manifest = Vec::new();
    for ds in splits {
        for item in ds.items() {
            let class = &ds.class_names()[item.class];
            let dir = root.join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_image(&dir.join(format!("{}.png", item.image_id)), &item.image)?;
            let entry = ManifestEntry {
                image_id: item.image_id.clone(),
                class: class.clone(),
                split: ds.split(),
            };
            serde_json::to_writer(&mut manifest, &entry)?;
            manifest.push(b'\n');
        }
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))
}

/// Procedurally generated single-channel patterns for desk-scale runs.
pub mod synthetic {
    use super::*;

    pub const SIDE: usize = 16;
    pub const CLASSES: [&str; 4] = ["blob", "diagonal", "horizontal", "vertical"];
    pub const TRAIN_PER_CLASS: usize = 20;
    pub const TEST_PER_CLASS: usize = 5;

    /// A small convolutional classifier sized for [`four_class`].
    pub const ARCH: &str = "\
input c=1 h=16 w=16
classes blob diagonal horizontal vertical
conv k=8 kh=3 kw=3 pad=1
relu
maxpool window=2
conv k=8 kh=3 kw=3 pad=1
relu
maxpool window=2
flatten
dense u=32 head
relu
dense u=4 head
softmax
";

    /// Four classes of noisy 16×16 patterns: 80 train and 20 test images.
    ///
    /// Pixel values are quantized to multiples of 1/255 so that a PNG round
    /// trip through [`write_dataset`] is exact.
    pub fn four_class(seed: u64) -> (LabeledDataset, LabeledDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, name) in CLASSES.iter().enumerate() {
            for n in 0..TRAIN_PER_CLASS + TEST_PER_CLASS {
                let item = Item {
                    image: pattern(class, &mut rng),
                    class,
                    image_id: format!("{name}_{n:03}"),
                };
                if n < TRAIN_PER_CLASS {
                    train.push(item);
                } else {
                    test.push(item);
                }
            }
        }
        (
            LabeledDataset::new(train, names.clone(), Split::Train).expect("consistent"),
            LabeledDataset::new(test, names, Split::Test).expect("consistent"),
        )
    }

    fn pattern(class: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let period: f32 = rng.gen_range(3.0..6.0);
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let (cx, cy): (f32, f32) = (rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0));
        let radius: f32 = rng.gen_range(2.5..4.5);
        let contrast: f32 = rng.gen_range(0.25..0.45);
        let noise: Vec<f32> = (0..SIDE * SIDE).map(|_| rng.gen_range(-0.15..0.15)).collect();
        let wave = |t: f32| (std::f32::consts::TAU * t / period + phase).sin();
        Tensor::from_fn([1, SIDE, SIDE], |i| {
            let (y, x) = ((i / SIDE) as f32, (i % SIDE) as f32);
            let signal = match class {
                0 => {
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    2.0 * (-d2 / (2.0 * radius * radius)).exp() - 1.0
                }
                1 => wave((x + y) / std::f32::consts::SQRT_2),
                2 => wave(y),
                _ => wave(x),
            };
            let v = (0.5 + contrast * signal + noise[i]).clamp(0.0, 1.0);
            (v * 255.0).round() / 255.0
        })
        .expect("static shape")
    }
}
