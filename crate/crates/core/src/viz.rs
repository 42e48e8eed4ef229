//! Image grids for inspection and postmortem dumps.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};

use crate::data::NormStats;
use crate::error::{Error, Result};

/// One RGB tile with values in `[0, 1]`, stored `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
}

impl Tile {
    /// Grayscale tile from a row-major map; values are clamped to `[0, 1]`.
    pub fn gray(values: &[f64], height: usize, width: usize) -> Self {
        let plane: Vec<f32> = values.iter().map(|&v| clamp01(v as f32)).collect();
        Self {
            height,
            width,
            rgb: [plane.clone(), plane.clone(), plane].concat(),
        }
    }
}

fn clamp01(v: f32) -> f32 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Tiles for a `(B, C, H, W)` tensor. Images are mapped back through
/// `stats` when given, otherwise min-max scaled per image. One channel is
/// drawn as gray; three as RGB.
pub fn tensor_tiles(t: &Tensor, stats: Option<&NormStats>) -> Result<Vec<Tile>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 && c != 3 {
        return Err(Error::Input(format!("cannot draw {c}-channel images")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    Ok((0..b)
        .map(|i| {
            let mut img = data[i * per..(i + 1) * per].to_vec();
            match stats {
                Some(s) => {
                    for ch in 0..c {
                        let (m, sd) = (s.mean[ch] as f32, s.std[ch] as f32);
                        img[ch * h * w..(ch + 1) * h * w]
                            .iter_mut()
                            .for_each(|v| *v = *v * sd + m);
                    }
                }
                None => {
                    let finite = img.iter().copied().filter(|v| v.is_finite());
                    let lo = finite.clone().fold(f32::INFINITY, f32::min);
                    let hi = finite.fold(f32::NEG_INFINITY, f32::max);
                    let span = if hi > lo { hi - lo } else { 1.0 };
                    img.iter_mut().for_each(|v| *v = (*v - lo) / span);
                }
            }
            let rgb = if c == 1 {
                [img.clone(), img.clone(), img].concat()
            } else {
                img
            };
            Tile {
                height: h,
                width: w,
                rgb: rgb.into_iter().map(clamp01).collect(),
            }
        })
        .collect())
}

/// Rows of equally sized tiles separated by a one-pixel white gutter.
#[derive(Debug, Clone, Default)]
pub struct ImageGrid {
    rows: Vec<Vec<Tile>>,
}

const GUTTER: usize = 1;

impl ImageGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_row(&mut self, tiles: Vec<Tile>) {
        self.rows.push(tiles);
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn render(&self) -> Result<RgbImage> {
        let first = self
            .rows
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Input("grid has no tiles".into()))?;
        let (th, tw) = (first.height, first.width);
        if self.rows.iter().flatten().any(|t| (t.height, t.width) != (th, tw)) {
            return Err(Error::Input("grid tiles differ in size".into()));
        }
        let cols = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let width = cols * (tw + GUTTER) + GUTTER;
        let height = self.rows.len() * (th + GUTTER) + GUTTER;
        let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
        for (r, row) in self.rows.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                let (oy, ox) = (GUTTER + r * (th + GUTTER), GUTTER + c * (tw + GUTTER));
                for y in 0..th {
                    for x in 0..tw {
                        let px = |ch: usize| (tile.rgb[(ch * th + y) * tw + x] * 255.0).round() as u8;
                        img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb([px(0), px(1), px(2)]));
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        self.render()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn grid_dimensions_include_gutters() {
        let mut g = ImageGrid::new();
        g.push_row(vec![Tile::gray(&[0.0; 12], 3, 4); 2]);
        g.push_row(vec![Tile::gray(&[1.0; 12], 3, 4)]);
        let img = g.render().unwrap();
        assert_eq!((img.width(), img.height()), (2 * 5 + 1, 2 * 4 + 1));
        assert_eq!(img.get_pixel(1, 1), &Rgb([0, 0, 0]));
        assert_eq!(img.get_pixel(1, 5), &Rgb([255, 255, 255]));
    }

    #[test]
    fn non_finite_values_render_black() {
        let t = Tensor::from_vec(vec![f32::NAN, 0.0, 1.0, 2.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let tiles = tensor_tiles(&t, None).unwrap();
        assert_eq!(tiles[0].rgb[0], 0.0);
        assert_eq!(tiles[0].rgb[3], 1.0);
    }
}
