//! Dataset ingestion, normalization, batching and sample pairing.

mod cifar;
mod folder;
mod synthetic;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStreams};

pub use cifar::write_cifar10_batch;
pub use synthetic::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    CifarBinary,
    ImageFolder,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub format: DatasetFormat,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_fraction")]
    pub subset_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset_fraction must lie in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        if self.num_classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("dataset `{}` has degenerate dims", self.name)));
        }
        match self.format {
            DatasetFormat::Synthetic if self.synthetic.is_none() => {
                Err(Error::Config("synthetic datasets need a [synthetic] section".into()))
            }
            DatasetFormat::CifarBinary | DatasetFormat::ImageFolder if self.path.is_none() => {
                Err(Error::Config(format!("dataset `{}` needs a source path", self.name)))
            }
            _ => Ok(()),
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self { split, ..self.clone() }
    }
}

/// Per-channel normalization statistics, always taken from the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn compute(images: &[f32], channels: usize, plane: usize) -> Self {
        let n = images.len() / (channels * plane).max(1);
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for i in 0..n {
                let base = (i * channels + c) * plane;
                for &v in &images[base..base + plane] {
                    let v = f64::from(v);
                    sum += v;
                    sq += v * v;
                }
            }
            let count = (n * plane).max(1) as f64;
            mean[c] = sum / count;
            let var = (sq / count - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }
}

/// Images and labels held in memory, pixels in `[0, 1]`, layout `(N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Vec<u32>,
    stats: NormStats,
}

impl Dataset {
    /// Builds a dataset from raw pixels; normalization statistics are computed
    /// from these pixels unless `stats` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: impl Into<String>,
        split: Split,
        dims: (usize, usize, usize),
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<u32>,
        stats: Option<NormStats>,
    ) -> Result<Self> {
        let (channels, height, width) = dims;
        let sample = channels * height * width;
        if sample == 0 || images.len() != labels.len() * sample {
            return Err(Error::Input(format!(
                "{} pixels do not hold {} samples of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
        }
        let stats = stats.unwrap_or_else(|| NormStats::compute(&images, channels, height * width));
        Ok(Self {
            name: name.into(),
            split,
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Raw `[0, 1]` pixels of one sample.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.channels * self.height * self.width;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
            stats: self.stats.clone(),
        }
    }

    pub fn with_stats(mut self, stats: NormStats) -> Self {
        self.stats = stats;
        self
    }

    /// Shuffled index batches covering the dataset once.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Sequential index batches (evaluation order).
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Normalized batch tensor for `indices`, optionally with random crop + flip.
    pub fn batch(
        &self,
        indices: &[usize],
        augment: Option<(&StandardAugment, &mut Rng)>,
        dtype: DType,
        device: &Device,
    ) -> Result<ImageBatch> {
        let (c, h, w) = self.dims();
        let mut buf = Vec::with_capacity(indices.len() * c * h * w);
        let mut aug = augment;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample index {i} out of range {}", self.len())));
            }
            let img = match aug.as_mut() {
                Some((cfg, rng)) => cfg.apply(self.image(i), (c, h, w), rng),
                None => self.image(i).to_vec(),
            };
            for ch in 0..c {
                let (m, s) = (self.stats.mean[ch] as f32, self.stats.std[ch] as f32);
                buf.extend(img[ch * h * w..(ch + 1) * h * w].iter().map(|v| (v - m) / s));
            }
        }
        let images = Tensor::from_vec(buf, (indices.len(), c, h, w), device)?.to_dtype(dtype)?;
        ImageBatch::new(
            images,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Inverse of the per-channel normalization, for visualization.
    pub fn denormalize(&self, channel: usize, v: f32) -> f32 {
        v * self.stats.std[channel] as f32 + self.stats.mean[channel] as f32
    }
}

/// Random crop after zero padding, plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardAugment {
    pub crop_padding: usize,
    pub flip: bool,
}

impl Default for StandardAugment {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            flip: true,
        }
    }
}

impl StandardAugment {
    pub fn apply(&self, img: &[f32], (c, h, w): (usize, usize, usize), rng: &mut Rng) -> Vec<f32> {
        let p = self.crop_padding as i64;
        let (dy, dx) = if p > 0 {
            (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize)
        } else {
            (0, 0)
        };
        let flip = self.flip && rng.random_bool(0.5);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        out
    }
}

/// A batch of normalized images with hard labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `(B, C, H, W)`
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl ImageBatch {
    pub fn new(images: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let (b, _, _, _) = images.dims4()?;
        if b != labels.len() {
            return Err(Error::Input(format!("{b} images but {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(B, classes)` one-hot label matrix in the batch dtype.
    pub fn one_hot(&self) -> Result<Tensor> {
        one_hot(
            &self.labels,
            self.num_classes,
            self.images.dtype(),
            self.images.device(),
        )
    }
}

pub fn one_hot(labels: &[u32], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l as usize] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

/// Index tuples assigning each sample its mixing partners.
///
/// Slot 0 is the sample itself; each further slot is an independent uniform
/// permutation of the batch, so every index appears exactly once per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    slots: Vec<Vec<usize>>,
}

impl Pairing {
    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn batch_size(&self) -> usize {
        self.slots.first().map_or(0, Vec::len)
    }

    pub fn slot(&self, i: usize) -> &[usize] {
        &self.slots[i]
    }

    pub fn tuple(&self, sample: usize) -> Vec<usize> {
        self.slots.iter().map(|s| s[sample]).collect()
    }

    pub fn from_slots(slots: Vec<Vec<usize>>) -> Result<Self> {
        let n = slots.first().map_or(0, Vec::len);
        if slots.iter().any(|s| s.len() != n || s.iter().any(|&i| i >= n)) {
            return Err(Error::Input(
                "pairing slots must be index vectors of equal length".into(),
            ));
        }
        Ok(Self { slots })
    }
}

pub fn pair_batch(batch_size: usize, k: usize, rng: &mut Rng) -> Pairing {
    let mut slots = vec![(0..batch_size).collect::<Vec<_>>()];
    for _ in 1..k {
        let mut perm: Vec<usize> = (0..batch_size).collect();
        perm.shuffle(rng);
        slots.push(perm);
    }
    Pairing { slots }
}

/// Loads the split named in `spec`; normalization statistics come from the
/// (identically subsetted) train split.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let split = load_split(spec, spec.split)?;
    let stats = match spec.split {
        Split::Train => split.stats.clone(),
        Split::Test => load_split(spec, Split::Train)?.stats,
    };
    Ok(split.with_stats(stats))
}

fn load_split(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    let (images, labels) = match spec.format {
        DatasetFormat::CifarBinary => cifar::read(spec, split)?,
        DatasetFormat::ImageFolder => folder::read(spec, split)?,
        DatasetFormat::Synthetic => synthetic::generate(spec, split)?,
    };
    let full = Dataset::from_parts(
        spec.name.clone(),
        split,
        (spec.channels, spec.height, spec.width),
        spec.num_classes,
        images,
        labels,
        None,
    )
    .map_err(|e| match e {
        Error::Input(m) => Error::Corrupt {
            path: spec.path.clone().unwrap_or_default(),
            message: m,
        },
        other => other,
    })?;
    if spec.subset_fraction >= 1.0 {
        return Ok(full);
    }
    let mut rng = SeedStreams::new(spec.seed).stream(&format!("subset/{}", split.name()));
    let keep = stratified_subset(full.labels(), spec.num_classes, spec.subset_fraction, &mut rng);
    let sub = full.select(&keep);
    let stats = NormStats::compute(&sub.images, sub.channels, sub.height * sub.width);
    Ok(sub.with_stats(stats))
}

/// Seeded class-stratified subset, indices returned in ascending order.
///
/// Per-class quotas are `floor(fraction * n_c)`; the remaining samples up to
/// `round(fraction * N)` go to the classes with the largest fractional parts.
pub fn stratified_subset(labels: &[u32], classes: usize, fraction: f64, rng: &mut Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let total = ((labels.len() as f64) * fraction).round() as usize;
    let exact: Vec<f64> = by_class.iter().map(|v| v.len() as f64 * fraction).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
        }
    }
    let mut keep = Vec::with_capacity(total);
    for (members, q) in by_class.iter_mut().zip(quota) {
        members.shuffle(rng);
        keep.extend_from_slice(&members[..q]);
    }
    keep.sort_unstable();
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_slots_are_permutations() {
        let mut rng = SeedStreams::new(1).stream("pairing");
        let p = pair_batch(128, 2, &mut rng);
        for s in 0..2 {
            let mut seen = p.slot(s).to_vec();
            seen.sort_unstable();
            assert_eq!(seen, (0..128).collect::<Vec<_>>());
        }
        let mut again = SeedStreams::new(1).stream("pairing");
        assert_eq!(p, pair_batch(128, 2, &mut again));
    }

    #[test]
    fn single_sample_pairs_with_itself() {
        let mut rng = SeedStreams::new(0).stream("pairing");
        let p = pair_batch(1, 2, &mut rng);
        assert_eq!(p.tuple(0), vec![0, 0]);
    }

    #[test]
    fn stratified_subset_one_per_class() {
        let labels: Vec<u32> = (0..100).map(|i| (i % 10) as u32).collect();
        let mut rng = SeedStreams::new(4).stream("subset");
        let keep = stratified_subset(&labels, 10, 0.1, &mut rng);
        assert_eq!(keep.len(), 10);
        let mut classes: Vec<u32> = keep.iter().map(|&i| labels[i]).collect();
        classes.sort_unstable();
        assert_eq!(classes, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_subset_within_one_when_not_divisible() {
        // class sizes 7, 13, 20
        let labels: Vec<u32> = (0..40)
            .map(|i| {
                if i < 7 {
                    0
                } else if i < 20 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let mut rng = SeedStreams::new(9).stream("subset");
        let keep = stratified_subset(&labels, 3, 0.3, &mut rng);
        assert_eq!(keep.len(), 12);
        for (c, n) in [(0u32, 7.0), (1, 13.0), (2, 20.0)] {
            let got = keep.iter().filter(|&&i| labels[i] == c).count() as f64;
            assert!((got - n * 0.3).abs() <= 1.0, "class {c}: {got}");
        }
    }

    #[test]
    fn augment_identity_when_disabled() {
        let aug = StandardAugment {
            crop_padding: 0,
            flip: false,
        };
        let img: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut rng = SeedStreams::new(0).stream("aug");
        assert_eq!(aug.apply(&img, (1, 3, 4), &mut rng), img);
    }

    #[test]
    fn rejects_labels_outside_class_count() {
        let r = Dataset::from_parts("x", Split::Train, (1, 1, 1), 2, vec![0.0, 1.0], vec![0, 2], None);
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
