//! Few-shot datasets: image folders and a procedural synthetic set.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MixdlError, Result};
use crate::imaging::Image;
use crate::metrics::providers::pixel_l2;

pub const MAX_DATASET_SIZE: usize = 10_000;
/// Minimum pixel-L2 distance between two synthetic images.
pub const SYNTHETIC_MIN_SEPARATION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Folder(Vec<PathBuf>),
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotDataset {
    images: Vec<Image>,
    resolution: usize,
    source: DatasetSource,
}

impl FewShotDataset {
    pub fn new(images: Vec<Image>, resolution: usize, source: DatasetSource) -> Result<Self> {
        if images.is_empty() {
            return Err(MixdlError::Configuration("few-shot dataset is empty".into()));
        }
        if images.len() > MAX_DATASET_SIZE {
            return Err(MixdlError::Configuration(format!(
                "dataset has {} images; at most {MAX_DATASET_SIZE} are supported",
                images.len()
            )));
        }
        if let Some(bad) = images.iter().find(|i| i.shape() != [3, resolution, resolution]) {
            return Err(MixdlError::Configuration(format!(
                "dataset image has shape {:?}, expected [3, {resolution}, {resolution}]",
                bad.shape()
            )));
        }
        Ok(FewShotDataset {
            images,
            resolution,
            source,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn source(&self) -> &DatasetSource {
        &self.source
    }

    /// `count` images drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Image> {
        (0..count)
            .map(|_| self.images[rng.random_range(0..self.images.len())].clone())
            .collect()
    }

    /// Writes `000.png`, `001.png`, ... into `dir`.
    pub fn save_pngs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| MixdlError::io(dir, e))?;
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let path = dir.join(format!("{i:03}.png"));
                img.save_png(&path).map(|_| path)
            })
            .collect()
    }
}

/// Loads every PNG/JPEG in `path` (lexicographic order), center-cropped and
/// resized to `resolution`.
pub fn load_image_folder(path: &Path, resolution: usize) -> Result<FewShotDataset> {
    let entries = std::fs::read_dir(path).map_err(|e| MixdlError::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| MixdlError::io(path, e))?;
        let p = entry.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(MixdlError::Ingestion {
            path: path.to_path_buf(),
            reason: "directory contains no PNG or JPEG images".into(),
        });
    }
    let images = files
        .iter()
        .map(|f| Image::load(f, resolution))
        .collect::<Result<Vec<_>>>()?;
    FewShotDataset::new(images, resolution, DatasetSource::Folder(files))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
    Diamond,
}

#[derive(Clone, Debug)]
struct Attributes {
    shape: Shape,
    hue: f64,
    center: (f64, f64),
    radius: f64,
    background_hue: f64,
    background_value: f64,
}

impl Attributes {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let shape = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Diamond]
            [rng.random_range(0..5)];
        Attributes {
            shape,
            hue: rng.random(),
            center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
            radius: rng.random_range(0.18..0.3),
            background_hue: rng.random(),
            background_value: rng.random_range(0.1..0.45),
        }
    }

    /// Whether the unit-square point `(x, y)` lies inside the shape.
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let r = self.radius;
        match self.shape {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            Shape::Triangle => dy <= 0.7 * r && dy >= -r + 2.0 * dx.abs() * 1.2,
        }
    }

    fn render(&self, resolution: usize) -> Image {
        const SS: usize = 4;
        let fg = hsv_to_rgb(self.hue, 0.85, 0.95);
        let bg = hsv_to_rgb(self.background_hue, 0.5, self.background_value);
        let mut img = Image::filled(3, resolution, resolution, 0.0);
        for py in 0..resolution {
            for px in 0..resolution {
                let mut covered = 0usize;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = (px as f64 + (sx as f64 + 0.5) / SS as f64) / resolution as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) / SS as f64) / resolution as f64;
                        covered += usize::from(self.covers(x, y));
                    }
                }
                let t = covered as f64 / (SS * SS) as f64;
                for c in 0..3 {
                    let v = t * fg[c] + (1.0 - t) * bg[c];
                    img.set(c, py, px, 2.0 * v - 1.0);
                }
            }
        }
        img
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `n` procedurally drawn shape images, fully determined by `seed`. Any two
/// images are at least [`SYNTHETIC_MIN_SEPARATION`] apart in pixel L2.
pub fn make_synthetic_fewshot(seed: u64, n: usize, resolution: usize) -> Result<FewShotDataset> {
    if n == 0 {
        return Err(MixdlError::param("synthetic dataset needs n >= 1"));
    }
    if resolution < 4 {
        return Err(MixdlError::param("synthetic resolution must be at least 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images: Vec<Image> = Vec::with_capacity(n);
    let mut attempts = 0;
    while images.len() < n {
        attempts += 1;
        if attempts > 1000 * n {
            return Err(MixdlError::param(format!(
                "could not draw {n} separated synthetic images at resolution {resolution}"
            )));
        }
        let img = Attributes::draw(&mut rng).render(resolution);
        if images
            .iter()
            .all(|other| pixel_l2(other, &img) > SYNTHETIC_MIN_SEPARATION)
        {
            images.push(img);
        }
    }
    FewShotDataset::new(images, resolution, DatasetSource::Synthetic { seed })
}
