//! CIFAR binary batches: each record is the label byte(s) followed by
//! 3072 pixel bytes (1024 R, 1024 G, 1024 B, each row-major 32×32).

use std::fs;
use std::path::Path;

use super::{Dataset, Images, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const PIXELS: usize = 3 * 32 * 32;

fn read_batch(path: &Path, records: usize, label_bytes: usize, num_classes: usize) -> Result<(Vec<u8>, Vec<usize>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let rec = label_bytes + PIXELS;
    let expected = (records * rec) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut pixels = Vec::with_capacity(records * PIXELS);
    let mut labels = Vec::with_capacity(records);
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        // the fine label is the last label byte
        let label = chunk[label_bytes - 1];
        if usize::from(label) >= num_classes {
            return Err(Error::BadLabel {
                path: path.to_path_buf(),
                record: i,
                label,
            });
        }
        labels.push(usize::from(label));
        pixels.extend_from_slice(&chunk[label_bytes..]);
    }
    Ok((pixels, labels))
}

fn assemble<T: Scalar>(parts: Vec<(Vec<u8>, Vec<usize>)>, classes: usize, split: Split) -> Result<Dataset<T>> {
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for (p, l) in parts {
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(Images::Raw(pixels), labels, [3, 32, 32], classes, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` as raw byte images.
pub fn load_cifar10<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    let dir = dir.as_ref();
    let train = (1..=5)
        .map(|i| read_batch(&dir.join(format!("data_batch_{i}.bin")), 10_000, 1, 10))
        .collect::<Result<Vec<_>>>()?;
    let test = read_batch(&dir.join("test_batch.bin"), 10_000, 1, 10)?;
    Ok((assemble(train, 10, Split::Train)?, assemble(vec![test], 10, Split::Test)?))
}

/// Loads `train.bin` / `test.bin` (coarse label, fine label, pixels) using
/// the 100 fine labels.
pub fn load_cifar100<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    let dir = dir.as_ref();
    let train = read_batch(&dir.join("train.bin"), 50_000, 2, 100)?;
    let test = read_batch(&dir.join("test.bin"), 10_000, 2, 100)?;
    Ok((
        assemble(vec![train], 100, Split::Train)?,
        assemble(vec![test], 100, Split::Test)?,
    ))
}
