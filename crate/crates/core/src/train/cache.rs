use super::TrainError;
use crate::data::{batch_iter, Dataset};
use crate::diffcore::Tensor;
use crate::vit::{forward_logits, ModelParams};

/// Frozen-teacher logits for every sample of one dataset, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitCache {
    logits: Tensor<f32>,
    dataset_hash: u64,
}

impl LogitCache {
    pub fn new(logits: Tensor<f32>, dataset_hash: u64) -> Result<Self, TrainError> {
        if logits.shape().len() != 2 {
            return Err(TrainError::Config(format!(
                "logit cache must be [N, C], got {:?}",
                logits.shape()
            )));
        }
        Ok(Self { logits, dataset_hash })
    }

    pub fn logits(&self) -> &Tensor<f32> {
        &self.logits
    }

    pub fn dataset_hash(&self) -> u64 {
        self.dataset_hash
    }

    pub fn rows(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Errors unless the cache was computed on `data`.
    pub fn check(&self, data: &Dataset) -> Result<(), TrainError> {
        if self.dataset_hash != data.hash() || self.rows() != data.len() {
            return Err(TrainError::StaleCache {
                cached: self.dataset_hash,
                dataset: data.hash(),
            });
        }
        Ok(())
    }

    /// Rows at `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let c = self.classes();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&self.logits.data()[i * c..(i + 1) * c]);
        }
        Tensor::new([indices.len(), c], out).expect("gathered logits")
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dataset_hash == other.dataset_hash && self.logits.bit_eq(&other.logits)
    }
}

/// Runs the teacher over `data` in natural order.
pub fn cache_teacher_logits(teacher: &ModelParams<f32>, data: &Dataset, batch_size: usize) -> Result<LogitCache, TrainError> {
    let mut rows = Vec::with_capacity(data.len() * teacher.config().classes);
    for batch in batch_iter(data, batch_size, None) {
        let logits = forward_logits(teacher, &batch.images)?;
        if !logits.is_finite() {
            return Err(TrainError::Divergence {
                epoch: 0,
                step: 0,
                value: f64::NAN,
            });
        }
        rows.extend(logits.into_data());
    }
    let logits = Tensor::new([data.len(), teacher.config().classes], rows)?;
    LogitCache::new(logits, data.hash())
}

/// Where distillation targets come from.
#[derive(Clone, Copy, Debug)]
pub enum TeacherSource<'a> {
    Cache(&'a LogitCache),
    Live(&'a ModelParams<f32>),
}

impl TeacherSource<'_> {
    pub(crate) fn check(&self, data: &Dataset) -> Result<(), TrainError> {
        match self {
            TeacherSource::Cache(c) => c.check(data),
            TeacherSource::Live(t) if t.config().classes != data.classes() => Err(TrainError::Config(format!(
                "teacher has {} classes, data has {}",
                t.config().classes,
                data.classes()
            ))),
            TeacherSource::Live(_) => Ok(()),
        }
    }

    pub(crate) fn logits(&self, indices: &[usize], images: &Tensor<f32>) -> Result<Tensor<f32>, TrainError> {
        match self {
            TeacherSource::Cache(c) => Ok(c.gather(indices)),
            TeacherSource::Live(t) => Ok(forward_logits(t, images)?),
        }
    }
}
