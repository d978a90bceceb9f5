//! Synthetic, seeded input scenes: smooth multi-channel images, region
//! masks and a config file tying them together.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fusecond_core::encoder::PixelGrid;
use fusecond_core::patch_grid::RegionMask;
use fusecond_core::rng::{derive_seed, SplitMix64};

use crate::error::{Error, Result};
use crate::mask::save_mask;
use crate::tensor::{save_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Full,
    /// Half-open pixel box `[y0, y1) x [x0, x1)`.
    Rect {
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
    },
    Disc {
        cy: f64,
        cx: f64,
        radius: f64,
    },
}

impl Region {
    pub fn mask(&self, height: usize, width: usize) -> RegionMask {
        let mut m = RegionMask::filled(height, width, false);
        for y in 0..height {
            for x in 0..width {
                let inside = match *self {
                    Region::Full => true,
                    Region::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
                    Region::Disc { cy, cx, radius } => {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        dy * dy + dx * dx <= radius * radius
                    }
                };
                m.set(y, x, inside);
            }
        }
        m
    }
}

/// Sum of a few random Gaussian blobs per channel on a gentle gradient,
/// values roughly in `[0, 1]`.
pub fn smooth_image(height: usize, width: usize, channels: usize, seed: u64) -> PixelGrid {
    let mut rng = SplitMix64::new(seed);
    let mut img = PixelGrid::zeros(height, width, channels);
    for c in 0..channels {
        let (gy, gx) = (rng.uniform(0.3), rng.uniform(0.3));
        let blobs: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.next_f64() * height as f64,
                    rng.next_f64() * width as f64,
                    (0.08 + 0.2 * rng.next_f64()) * height.max(width) as f64,
                    rng.uniform(1.0),
                ]
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let mut v =
                    0.5 + gy * (y as f64 / height as f64 - 0.5) + gx * (x as f64 / width as f64 - 0.5);
                for [by, bx, s, a] in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    v += a * (-d2 / (2.0 * s * s)).exp();
                }
                img.pixel_mut(y, x)[c] = v;
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// One local source per region.
    pub regions: Vec<Region>,
    pub image_seed: u64,
    /// Extra `key = value` config lines.
    pub settings: Vec<(String, String)>,
}

impl Scene {
    /// Two locals on 224 x 224 RGB images (16 x 16 patches of 14 px).
    pub fn desk(image_seed: u64) -> Self {
        Self {
            height: 224,
            width: 224,
            channels: 3,
            regions: vec![
                Region::Rect { y0: 0, x0: 0, y1: 224, x1: 126 },
                Region::Disc { cy: 112.0, cx: 112.0, radius: 97.0 },
            ],
            image_seed,
            settings: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.settings.retain(|(k, _)| k != key);
        self.settings.push((key.to_string(), value.to_string()));
        self
    }

    /// Writes images, masks and `config.txt` into `dir`; returns the config path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let image = |label: &str| {
            smooth_image(self.height, self.width, self.channels, derive_seed(self.image_seed, label))
        };
        save_tensor(dir.join("global.fus3"), &Tensor::from_pixels(&image("global")))?;
        let mut cfg = String::from("global.image = global.fus3\n");
        for (k, region) in self.regions.iter().enumerate() {
            save_tensor(
                dir.join(format!("local{k}.fus3")),
                &Tensor::from_pixels(&image(&format!("local{k}"))),
            )?;
            save_mask(dir.join(format!("local{k}.mask")), &region.mask(self.height, self.width))?;
            let _ = writeln!(cfg, "local.{k}.image = local{k}.fus3\nlocal.{k}.mask = local{k}.mask");
        }
        for (k, v) in &self.settings {
            let _ = writeln!(cfg, "{k} = {v}");
        }
        let path = dir.join("config.txt");
        fs::write(&path, cfg).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
