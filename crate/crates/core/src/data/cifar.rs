//! CIFAR binary batches: one record per image, label byte(s) followed by
//! 3072 bytes of channel-major 32x32 pixels.

use std::path::{Path, PathBuf};

use super::{DatasetSpec, Split};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

fn split_files(root: &Path, split: Split) -> Result<(Vec<PathBuf>, usize)> {
    // CIFAR-10 ships data_batch_{1..5}.bin / test_batch.bin with one label byte;
    // CIFAR-100 ships train.bin / test.bin with (coarse, fine) label bytes.
    let cifar10: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    };
    let present: Vec<PathBuf> = cifar10.into_iter().filter(|p| p.exists()).collect();
    if !present.is_empty() {
        return Ok((present, 1));
    }
    let cifar100 = root.join(format!("{}.bin", split.name()));
    if cifar100.exists() {
        return Ok((vec![cifar100], 2));
    }
    Err(Error::Input(format!(
        "no CIFAR {} batches under {}",
        split.name(),
        root.display()
    )))
}

pub(super) fn read(spec: &DatasetSpec, split: Split) -> Result<(Vec<f32>, Vec<u32>)> {
    if (spec.channels, spec.height, spec.width) != (3, 32, 32) {
        return Err(Error::Config("CIFAR binaries hold 3x32x32 images".into()));
    }
    let root = spec.path.as_deref().unwrap_or(Path::new("."));
    let (files, label_bytes) = split_files(root, split)?;
    let record = label_bytes + PIXELS;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::Corrupt {
                path: file,
                message: format!("length {} is not a multiple of the {record}-byte record", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(record) {
            let label = u32::from(rec[label_bytes - 1]);
            if label as usize >= spec.num_classes {
                return Err(Error::Corrupt {
                    path: file.clone(),
                    message: format!("label {label} outside {} classes", spec.num_classes),
                });
            }
            labels.push(label);
            images.extend(rec[label_bytes..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    Ok((images, labels))
}

/// Writes records in the CIFAR-10 layout; used to build fixtures.
pub fn write_cifar10_batch(path: &Path, samples: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut out = Vec::with_capacity(samples.len() * (PIXELS + 1));
    for (label, pixels) in samples {
        if pixels.len() != PIXELS {
            return Err(Error::Input(format!(
                "expected {PIXELS} pixel bytes, got {}",
                pixels.len()
            )));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
