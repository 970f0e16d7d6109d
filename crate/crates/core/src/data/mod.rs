//! Datasets, batching, and the download cache.

pub mod fetch;
pub mod idx;

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use self::idx::{parse_idx_rank, IdxArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "fashion-mnist")]
    FashionMnist,
}

impl DatasetName {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Some(DatasetName::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fashionmnist" => Some(DatasetName::FashionMnist),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Published item count for both supported datasets.
    pub fn expected_len(self) -> usize {
        match self {
            Split::Train => 60_000,
            Split::Test => 10_000,
        }
    }
}

/// A file a dataset was read from, with its content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: PathBuf,
    pub md5: String,
}

/// Raw `u8` images with labels. Images are kept as bytes and scaled on
/// demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Data("image dimensions must be positive".into()));
        }
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::Data(format!(
                "{} labels need {} pixels of {rows}x{cols} images, got {}",
                labels.len(),
                labels.len() * rows * cols,
                pixels.len()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            rows,
            cols,
            pixels,
            labels,
            provenance: Vec::new(),
        })
    }

    /// Pairs a rank-3 image array with a rank-1 label array.
    pub fn from_idx(name: impl Into<String>, split: Split, images: IdxArray, labels: IdxArray) -> Result<Self> {
        if images.rank() != 3 || labels.rank() != 1 {
            return Err(Error::Data(format!(
                "expected rank-3 images and rank-1 labels, got ranks {} and {}",
                images.rank(),
                labels.rank()
            )));
        }
        if images.dims[0] != labels.dims[0] {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.dims[0], labels.dims[0]
            )));
        }
        Dataset::new(name, split, images.dims[1], images.dims[2], images.data, labels.data)
    }

    /// Reads `images` and `labels` IDX files, gzip-compressed or plain.
    /// Provenance records each file's MD5 as stored on disk.
    pub fn from_idx_files(name: impl Into<String>, split: Split, images: &Path, labels: &Path) -> Result<Self> {
        let (img_bytes, img_md5) = read_maybe_gz(images)?;
        let (lab_bytes, lab_md5) = read_maybe_gz(labels)?;
        let img = parse_idx_rank(&img_bytes, 3)?;
        let lab = parse_idx_rank(&lab_bytes, 1)?;
        let mut ds = Dataset::from_idx(name, split, img, lab)?;
        ds.provenance = vec![
            Provenance { path: images.to_path_buf(), md5: img_md5 },
            Provenance { path: labels.to_path_buf(), md5: lab_md5 },
        ];
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.image_len()..(i + 1) * self.image_len()]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// The first `n` items.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// A copy with every label replaced by `label`.
    pub fn with_constant_labels(&self, label: u8) -> Dataset {
        Dataset {
            labels: vec![label; self.len()],
            ..self.clone()
        }
    }

    /// `[B, 1, rows, cols]` images scaled by 1/255.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::lit(p as f64 / 255.0)));
        }
        Tensor::from_vec(vec![indices.len(), 1, self.rows, self.cols], data)
    }

    pub fn all_images<T: Scalar>(&self) -> Tensor<T> {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }
}

fn read_maybe_gz(path: &Path) -> Result<(Vec<u8>, String)> {
    let raw = std::fs::read(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    let md5 = fetch::md5_hex(&raw);
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("decompressing {}: {e}", path.display())))?;
        Ok((out, md5))
    } else {
        Ok((raw, md5))
    }
}

/// Anything training can draw image batches from. Labels are not part of
/// this interface.
pub trait ImageSource<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, side)`; images are square.
    fn image_shape(&self) -> (usize, usize);

    fn images(&self, indices: &[usize]) -> Tensor<T>;
}

impl<T: Scalar> ImageSource<T> for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn image_shape(&self) -> (usize, usize) {
        assert_eq!(self.rows, self.cols, "only square images are supported");
        (1, self.rows)
    }

    fn images(&self, indices: &[usize]) -> Tensor<T> {
        Dataset::images(self, indices)
    }
}

/// Item order for one epoch: identity, or a shuffle driven by `rng`.
pub fn epoch_order(n: usize, shuffle: bool, rng: &mut Stream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Full batches per epoch; the remainder is dropped.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.checked_div(batch_size).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub index: usize,
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Option<Vec<u8>>,
}

/// Iterator over the full batches of one epoch.
pub struct Batches<'a, T> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    with_labels: bool,
    _scalar: std::marker::PhantomData<T>,
}

/// Batches for one epoch. Labels are attached only when `with_labels` is
/// set; training never sets it.
pub fn batches<'a, T: Scalar>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle: bool,
    rng: &mut Stream,
    with_labels: bool,
) -> Result<Batches<'a, T>> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={}",
            dataset.len()
        )));
    }
    Ok(Batches {
        dataset,
        order: epoch_order(dataset.len(), shuffle, rng),
        batch_size,
        next: 0,
        with_labels,
        _scalar: std::marker::PhantomData,
    })
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        let start = self.next * self.batch_size;
        let end = start + self.batch_size;
        if end > self.order.len() {
            return None;
        }
        let indices = self.order[start..end].to_vec();
        let batch = Batch {
            index: self.next,
            images: self.dataset.images(&indices),
            labels: self
                .with_labels
                .then(|| indices.iter().map(|&i| self.dataset.label(i)).collect()),
            indices,
        };
        self.next += 1;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = batches_per_epoch(self.order.len(), self.batch_size) - self.next;
        (left, Some(left))
    }
}

impl<T: Scalar> ExactSizeIterator for Batches<'_, T> {}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let pixels = (0..n * 4).map(|i| (i * 37 % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new("toy", Split::Train, 2, 2, pixels, labels).unwrap()
    }

    #[test]
    fn drop_last_count() {
        assert_eq!(batches_per_epoch(60_000, 64), 937);
        let ds = toy(10);
        let mut rng = Stream::from_seed(0);
        let all: Vec<Batch<f32>> = batches(&ds, 3, false, &mut rng, true).unwrap().collect();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2].indices, vec![6, 7, 8]);
        assert_eq!(all[1].labels.as_deref(), Some(&[3, 4, 5][..]));
    }

    #[test]
    fn unshuffled_order_is_stable() {
        let ds = toy(9);
        let a: Vec<Vec<usize>> = batches::<f32>(&ds, 2, false, &mut Stream::from_seed(1), false)
            .unwrap()
            .map(|b| b.indices)
            .collect();
        let b: Vec<Vec<usize>> = batches::<f32>(&ds, 2, false, &mut Stream::from_seed(2), false)
            .unwrap()
            .map(|b| b.indices)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn shuffled_union_is_permutation_prefix() {
        let ds = toy(103);
        let yielded: Vec<usize> = batches::<f32>(&ds, 10, true, &mut Stream::from_seed(5), false)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        // Fisher-Yates from the back over the same stream, drawing indices
        // as u32 like the slice shuffle does for short slices.
        let mut rng = Stream::from_seed(5);
        let mut perm: Vec<usize> = (0..103).collect();
        for i in (1..perm.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..(i + 1) as u32) as usize;
            perm.swap(i, j);
        }
        assert_eq!(yielded, perm[..100].to_vec());
        let mut sorted = yielded.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
    }

    #[test]
    fn labels_absent_unless_requested_and_pixels_scaled() {
        let ds = toy(8);
        for b in batches::<f64>(&ds, 4, true, &mut Stream::from_seed(0), false).unwrap() {
            assert!(b.labels.is_none());
            assert_eq!(b.images.shape(), &[4, 1, 2, 2]);
            assert!(b.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let t: Tensor<f64> = ds.images(&[0]);
        assert_eq!(t.data()[1], 37.0 / 255.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = toy(4);
        assert!(batches::<f32>(&ds, 5, false, &mut Stream::from_seed(0), false).is_err());
        assert!(batches::<f32>(&ds, 0, false, &mut Stream::from_seed(0), false).is_err());
        assert!(Dataset::new("x", Split::Test, 2, 2, vec![0; 7], vec![0; 2]).is_err());
        let images = IdxArray::new(vec![2, 2, 2], vec![0; 8]);
        let labels = IdxArray::new(vec![3], vec![0; 3]);
        assert!(Dataset::from_idx("x", Split::Test, images, labels).is_err());
    }

    #[test]
    fn names_parse() {
        for n in [DatasetName::Mnist, DatasetName::FashionMnist] {
            assert_eq!(DatasetName::parse(n.tag()), Some(n));
        }
        assert_eq!(DatasetName::parse("svhn"), None);
    }
}
