//! Dataset ingestion, normalization and client partitioning.

mod cifar;
mod partition;
mod synthetic;

pub use cifar::{load_cifar10, load_cifar100};
pub use partition::{partition, write_shard_manifest, ClientShard, PartitionConfig, PartitionScheme};
pub use synthetic::{make_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Images<T> {
    /// Raw 8-bit pixels, `[N, C, H, W]` row-major.
    Raw(Vec<u8>),
    Normalized(Vec<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Images<T>,
    pub labels: Vec<usize>,
    /// `(C, H, W)`
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Images<T>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize, split: Split) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        let n_pix = match &images {
            Images::Raw(v) => v.len(),
            Images::Normalized(v) => v.len(),
        };
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        }
        if n_pix != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} labels need {} pixel values, got {n_pix}",
                labels.len(),
                per * labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_normalized(&self) -> bool {
        matches!(self.images, Images::Normalized(_))
    }

    /// Stacks the selected samples into a `[len, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let Images::Normalized(pixels) = &self.images else {
            return Err(Error::NotNormalized);
        };
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&pixels[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Per channel `(pixel/255 − 0.5) / 0.5`, mapping bytes onto `[−1, 1]`.
pub fn normalize<T: Scalar>(ds: Dataset<T>) -> Result<Dataset<T>> {
    let Images::Raw(raw) = ds.images else {
        return Err(Error::AlreadyNormalized);
    };
    let half = T::from_f64_lossy(0.5);
    let scale = T::from_f64_lossy(255.0);
    let pixels = raw
        .iter()
        .map(|&b| (T::from_u8(b).unwrap() / scale - half) / half)
        .collect();
    Ok(Dataset {
        images: Images::Normalized(pixels),
        ..ds
    })
}

/// `pixel/255`, the unnormalized alternative onto `[0, 1]`.
pub fn scale_to_unit<T: Scalar>(ds: Dataset<T>) -> Result<Dataset<T>> {
    let Images::Raw(raw) = ds.images else {
        return Err(Error::AlreadyNormalized);
    };
    let scale = T::from_f64_lossy(255.0);
    let pixels = raw.iter().map(|&b| T::from_u8(b).unwrap() / scale).collect();
    Ok(Dataset {
        images: Images::Normalized(pixels),
        ..ds
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(bytes: Vec<u8>) -> Dataset<f64> {
        let n = bytes.len();
        Dataset::new(Images::Raw(bytes), vec![0; n], [1, 1, 1], 2, Split::Train).unwrap()
    }

    #[test]
    fn normalization_endpoints_and_affinity() {
        let ds = normalize(raw(vec![0, 255, 127, 128, 10, 20])).unwrap();
        let Images::Normalized(v) = &ds.images else { unreachable!() };
        assert_eq!(v[0], -1.0);
        assert_eq!(v[1], 1.0);
        assert!(v[2].abs() < 0.01 && v[3].abs() < 0.01);
        assert!(((v[5] - v[4]) - 10.0 / 127.5).abs() < 1e-12);
        assert!(matches!(normalize(ds), Err(Error::AlreadyNormalized)));
        let unit = scale_to_unit(raw(vec![0, 255, 51])).unwrap();
        assert_eq!(unit.images, Images::Normalized(vec![0.0, 1.0, 0.2]));
    }

    #[test]
    fn raw_images_cannot_be_batched() {
        assert!(matches!(raw(vec![1, 2]).batch(&[0]), Err(Error::NotNormalized)));
    }

    #[test]
    fn constructor_validates() {
        assert!(Dataset::<f32>::new(Images::Raw(vec![0; 3]), vec![0, 1], [1, 1, 1], 2, Split::Test).is_err());
        assert!(Dataset::<f32>::new(Images::Raw(vec![0; 2]), vec![0, 2], [1, 1, 1], 2, Split::Test).is_err());
        assert!(Dataset::<f32>::new(Images::Raw(vec![]), vec![], [1, 1, 1], 2, Split::Test).is_err());
    }
}
