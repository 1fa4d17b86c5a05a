//! IDX image datasets and deterministic mini-batching.
//!
//! IDX files are big-endian: images carry magic 2051 followed by
//! `n, rows, cols` and `n * rows * cols` `u8` pixels, labels carry magic 2049,
//! `n` and `n` `u8` labels. Pixels are scaled by `1/255`.
//!
//! Batch order is a Fisher-Yates shuffle driven by `Xoshiro256PlusPlus`
//! seeded with `seed ^ (epoch * 0x9E3779B97F4A7C15)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4D;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const NUM_CLASSES: usize = 10;

/// Environment variable naming the dataset directory.
pub const DATA_DIR_ENV: &str = "INSITU_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `(n, 1, rows, cols)` in `[0, 1]`.
    pub images: Tensor4D,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor4D, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.dims()[0],
                labels: labels.len(),
            });
        }
        check_labels(&labels)?;
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        })
    }

    /// The first `per_class` samples of every class, in file order.
    pub fn balanced_prefix(&self, per_class: usize) -> Result<Self> {
        let mut seen = [0usize; NUM_CLASSES];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i] as usize;
                seen[c] += 1;
                seen[c] <= per_class
            })
            .collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        Some(index) => Err(Error::BadLabel {
            index,
            label: labels[index],
        }),
        None => Ok(()),
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => Err(Error::Truncated {
            what,
            expected: at + 4,
            found: bytes.len(),
        }),
    }
}

/// Parses an IDX image file into `(n, 1, rows, cols)` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor4D> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX image file",
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: "image payload",
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor4D::new([n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX label file",
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "label header")? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: "label payload",
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    check_labels(&labels)?;
    Ok(labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    LabeledDataset::new(images, labels, split)
}

/// Encodes pixels back to `u8` (`round(255 v)`).
pub fn encode_idx_images(images: &Tensor4D) -> Result<Vec<u8>> {
    let [n, c, h, w] = images.dims();
    if c != 1 {
        return Err(Error::InvalidDims(format!("IDX images need one channel, got {c}")));
    }
    let mut out = Vec::with_capacity(16 + images.data().len());
    for v in [IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidDims(format!("pixel {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_idx_images(&ds.images)?)?;
    fs::write(labels_path, encode_idx_labels(&ds.labels))?;
    Ok(())
}

/// Dataset directory: `$INSITU_DATA_DIR`, else `data/fashion-mnist` in the workspace.
pub fn data_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist"),
    }
}

/// Loads the standard `train-*` / `t10k-*` file pair from `dir`.
pub fn load_split(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
        Split::Custom => {
            return Err(Error::Config {
                field: "split".into(),
                reason: "only train and test splits have standard file names".into(),
            })
        }
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Sample order of one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Index batches of one epoch; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config {
            field: "batch_size".into(),
            reason: "must be at least 1".into(),
        });
    }
    Ok(epoch_permutation(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
