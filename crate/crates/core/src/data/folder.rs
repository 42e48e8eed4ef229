//! `<root>/<split>/<class>/*.{png,jpg,jpeg}`; classes are the sorted
//! directory names.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{DatasetSpec, Split};
use crate::error::{Error, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

pub(super) fn read(spec: &DatasetSpec, split: Split) -> Result<(Vec<f32>, Vec<u32>)> {
    let root = spec.path.as_deref().unwrap_or(Path::new("."));
    let split_dir = root.join(split.name());
    let dir = if split_dir.is_dir() {
        split_dir
    } else {
        root.to_path_buf()
    };
    let classes: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.len() > spec.num_classes {
        return Err(Error::Corrupt {
            path: dir,
            message: format!("{} class directories, {} declared", classes.len(), spec.num_classes),
        });
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        for file in sorted_entries(class_dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                continue;
            }
            let img = image::open(&file).map_err(|e| Error::Corrupt {
                path: file.clone(),
                message: e.to_string(),
            })?;
            let img = if (img.width() as usize, img.height() as usize) != (w, h) {
                img.resize_exact(w as u32, h as u32, FilterType::Triangle)
            } else {
                img
            };
            match c {
                1 => {
                    let g = img.to_luma8();
                    images.extend(g.pixels().map(|p| f32::from(p[0]) / 255.0));
                }
                3 => {
                    let rgb = img.to_rgb8();
                    for ch in 0..3 {
                        images.extend(rgb.pixels().map(|p| f32::from(p[ch]) / 255.0));
                    }
                }
                _ => return Err(Error::Config("image folders support 1 or 3 channels".into())),
            }
            labels.push(label as u32);
        }
    }
    if labels.is_empty() {
        return Err(Error::Input(format!("no images found under {}", dir.display())));
    }
    Ok((images, labels))
}
