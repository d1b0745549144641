//! CIFAR-10 binary format: 3073-byte records, one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes in row-major order.

use std::path::Path;

use super::{LabeledImages, Split};
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 3073;
pub const RECORDS_PER_FILE: usize = 10_000;
const SHAPE: [usize; 3] = [3, 32, 32];

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Decodes a whole file image. `name` only labels errors.
pub fn parse_cifar_records(bytes: &[u8], name: &str) -> Result<LabeledImages> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        let whole = bytes.len() / RECORD_BYTES;
        return Err(Error::Data {
            file: name.to_string(),
            offset: (whole * RECORD_BYTES) as u64,
            message: format!(
                "length {} is not a positive multiple of {RECORD_BYTES}; record {whole} is truncated",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data {
                file: name.to_string(),
                offset: (i * RECORD_BYTES) as u64,
                message: format!("label byte {} > 9 in record {i}", rec[0]),
            });
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    LabeledImages::new(images, SHAPE, labels, 10)
}

/// Loads one file; `expected_records` pins the record count.
pub fn load_cifar_file(path: &Path, expected_records: Option<usize>) -> Result<LabeledImages> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if let Some(n) = expected_records {
        if bytes.len() != n * RECORD_BYTES {
            return Err(Error::Data {
                file: name,
                offset: bytes.len().min(n * RECORD_BYTES) as u64,
                message: format!(
                    "expected {n} records ({} bytes), file has {} bytes",
                    n * RECORD_BYTES,
                    bytes.len()
                ),
            });
        }
    }
    parse_cifar_records(&bytes, &name)
}

/// The standard five training files and the test file, each holding
/// exactly `records_per_file` records, concatenated in file order.
pub fn load_cifar10_binary_with(dir: &Path, records_per_file: usize) -> Result<Split> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in TRAIN_FILES {
        let part = load_cifar_file(&dir.join(f), Some(records_per_file))?;
        images.extend_from_slice(part.images());
        labels.extend_from_slice(part.labels());
    }
    let train = LabeledImages::new(images, SHAPE, labels, 10)?;
    let test = load_cifar_file(&dir.join(TEST_FILE), Some(records_per_file))?;
    Ok(Split { train, test })
}

pub fn load_cifar10_binary(dir: &Path) -> Result<Split> {
    load_cifar10_binary_with(dir, RECORDS_PER_FILE)
}

/// Inverse of [`parse_cifar_records`] for 3×32×32 datasets.
pub fn to_cifar_bytes(data: &LabeledImages) -> Result<Vec<u8>> {
    if data.image_shape() != SHAPE {
        return Err(Error::shape(
            "cifar",
            format!(
                "images are {:?}, the format stores {SHAPE:?}",
                data.image_shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(data.len() * RECORD_BYTES);
    for i in 0..data.len() {
        out.push(data.labels()[i]);
        out.extend_from_slice(data.image(i));
    }
    Ok(out)
}
