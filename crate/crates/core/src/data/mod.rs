//! Deterministic datasets: IDX image files and a PRNG-specified synthetic
//! classification task.

mod idx;
mod rng;
mod synthetic;

use std::hash::Hasher;

use fnv::FnvHasher;

pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use rng::SplitMix64;
pub use synthetic::make_synthetic;

use crate::diffcore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated IDX payload ({have} of {need} bytes)")]
    Truncated { path: String, have: usize, need: usize },
    #[error("image count {images} differs from label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Images scaled to `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    hash: u64,
}

impl Dataset {
    /// `images` is `[N, channels, H, W]`; labels must lie in `[0, classes)`.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if images.shape().len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        let hash = content_hash(&images, &labels);
        Ok(Self {
            images,
            labels,
            classes,
            hash,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// `[channels, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// 64-bit FNV-1a content hash; the equality witness for cached logits.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    fn sample_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        let images = Tensor::new(shape, data).expect("gathered shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        if indices.is_empty() {
            return Err(DataError::Invalid("empty subset".into()));
        }
        let (images, labels) = self.gather(indices);
        Self::new(images, labels, self.classes)
    }
}

/// FNV-1a over: each image-tensor extent as u64 LE, every pixel as f32 LE,
/// every label as u32 LE.
pub fn content_hash(images: &Tensor<f32>, labels: &[usize]) -> u64 {
    let mut h = FnvHasher::default();
    for &e in images.shape() {
        h.write(&(e as u64).to_le_bytes());
    }
    for v in images.data() {
        h.write(&v.to_le_bytes());
    }
    for &l in labels {
        h.write(&(l as u32).to_le_bytes());
    }
    h.finish()
}

/// Seeded permutation, then prefix split: the first `round(N·fraction)`
/// shuffled samples form the training side.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = data.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DataError::Invalid(format!(
            "split of {n} samples at {train_fraction} leaves one side empty"
        )));
    }
    let perm = SplitMix64::new(seed).permutation(n);
    Ok((data.subset(&perm[..n_train])?, data.subset(&perm[n_train..])?))
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Batches over `data`, shuffled by `shuffle_seed` when given, natural order
/// otherwise. The final short batch is included.
pub fn batch_iter(data: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let order = match shuffle_seed {
        Some(seed) => SplitMix64::new(seed).permutation(data.len()),
        None => (0..data.len()).collect(),
    };
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |indices| {
        let (images, labels) = data.gather(&indices);
        Batch {
            indices,
            images,
            labels,
        }
    })
}
