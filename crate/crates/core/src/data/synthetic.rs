//! Procedural shape datasets for desk-scale experiments and tests.
//!
//! Class `c` draws shape `c % 4` (square, horizontal bar, vertical bar,
//! cross) in a colour selected by `c / 4`, at a random position on a noisy
//! background.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DatasetSpec, Split};
use crate::error::Result;
use crate::rng::{Rng, SeedStreams};

fn default_noise() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

pub(super) fn generate(spec: &DatasetSpec, split: Split) -> Result<(Vec<f32>, Vec<u32>)> {
    let syn = spec.synthetic.as_ref().expect("validated");
    let per_class = match split {
        Split::Train => syn.train_per_class,
        Split::Test => syn.test_per_class,
    };
    let mut rng = SeedStreams::new(spec.seed).stream(&format!("synthetic/{}", split.name()));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    // interleave classes so prefixes stay balanced
    for _ in 0..per_class {
        for class in 0..spec.num_classes {
            images.extend(draw(class, spec.channels, spec.height, spec.width, syn.noise, &mut rng));
            labels.push(class as u32);
        }
    }
    Ok((images, labels))
}

fn colour(class: usize, channels: usize) -> Vec<f32> {
    let tone = class / 4;
    if channels == 1 {
        return vec![[1.0, 0.65, 0.4][tone % 3]];
    }
    (0..channels)
        .map(|ch| {
            if ch == tone % channels {
                1.0
            } else {
                0.25 + 0.2 * ((tone / channels) % 2) as f32
            }
        })
        .collect()
}

fn draw(class: usize, channels: usize, h: usize, w: usize, noise: f64, rng: &mut Rng) -> Vec<f32> {
    let mut img: Vec<f32> = (0..channels * h * w)
        .map(|_| (rng.random::<f64>() * noise) as f32)
        .collect();
    let size = (h.min(w) * 3 / 8).max(2);
    let thick = (size / 3).max(1);
    let y0 = rng.random_range(0..=h - size.min(h));
    let x0 = rng.random_range(0..=w - size.min(w));
    let col = colour(class, channels);
    let inside = |dy: usize, dx: usize| -> bool {
        let mid = size / 2;
        let band = |d: usize| d + thick / 2 >= mid && d <= mid + thick / 2;
        match class % 4 {
            0 => true,
            1 => band(dy),
            2 => band(dx),
            _ => band(dy) || band(dx),
        }
    };
    for dy in 0..size.min(h) {
        for dx in 0..size.min(w) {
            if !inside(dy, dx) {
                continue;
            }
            for (ch, c) in col.iter().enumerate() {
                img[(ch * h + y0 + dy) * w + x0 + dx] = *c;
            }
        }
    }
    img
}
