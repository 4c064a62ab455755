//! CIFAR-10 binary batches: records of 3073 bytes, one label byte followed by
//! the 32x32 red, green and blue planes.

use std::fs;
use std::path::Path;

use super::{Dataset, Split, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + PIXELS;
const CLASSES: usize = 10;
/// Trailing training records held out as the validation split.
const VALID_RECORDS: usize = 5000;

/// Decodes CIFAR-10 records; pixel bytes are divided by 255.
pub fn read_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::format("empty CIFAR-10 file"));
    }
    if bytes.len() % RECORD != 0 {
        return Err(Error::format(format!(
            "truncated record: {} bytes is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::format(format!("record {i}: label byte {label}")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, SIDE, SIDE], pixels)?, labels, CLASSES, split)
}

/// Encodes a 3x32x32 dataset back into CIFAR-10 records, rounding pixels to
/// the nearest byte.
pub fn encode_cifar10(data: &Dataset) -> Result<Vec<u8>> {
    if data.image_shape() != [3, SIDE, SIDE] || data.classes() > CLASSES {
        return Err(Error::format("only 3x32x32 images with at most 10 classes encode as CIFAR-10"));
    }
    let mut out = Vec::with_capacity(data.len() * RECORD);
    for (i, &label) in data.labels().iter().enumerate() {
        out.push(label as u8);
        out.extend(
            data.images()
                .item_slice(i)
                .iter()
                .map(|&v| (v * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn load_cifar10(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    read_cifar10(&fs::read(path)?, split)
}

/// Reads `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin` from
/// `dir`. The last 5000 training records form the validation split.
pub fn load_cifar10_splits(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let mut bytes = Vec::new();
    for i in 1..=5 {
        bytes.extend(fs::read(dir.join(format!("data_batch_{i}.bin")))?);
    }
    let all = read_cifar10(&bytes, Split::Train)?;
    let n = all.len();
    if n <= VALID_RECORDS {
        return Err(Error::format(format!("only {n} training records")));
    }
    let cut = n - VALID_RECORDS;
    let train_idx: Vec<usize> = (0..cut).collect();
    let valid_idx: Vec<usize> = (cut..n).collect();
    let (ti, tl) = all.batch(&train_idx)?;
    let (vi, vl) = all.batch(&valid_idx)?;
    let train = Dataset::new(ti, tl, CLASSES, Split::Train)?;
    let valid = Dataset::new(vi, vl, CLASSES, Split::Valid)?;
    let test = load_cifar10(dir.join("test_batch.bin"), Split::Test)?;
    Ok(Splits { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(fill));
        r
    }

    #[test]
    fn zero_and_full_pixels() {
        let mut bytes = record(3, |_| 0);
        bytes.extend(record(9, |_| 255));
        let d = read_cifar10(&bytes, Split::Test).unwrap();
        assert_eq!(d.labels(), &[3, 9]);
        assert!(d.images().item_slice(0).iter().all(|&v| v == 0.0));
        assert!(d.images().item_slice(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_and_bad_label() {
        let bytes = record(1, |i| i as u8);
        assert!(matches!(read_cifar10(&bytes[..RECORD - 1], Split::Train), Err(Error::Format(_))));
        let bad = record(10, |_| 0);
        assert!(matches!(read_cifar10(&bad, Split::Train), Err(Error::Format(_))));
    }
}
