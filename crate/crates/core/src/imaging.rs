//! RGB images with channel-first `f64` pixels in `[-1, 1]`, plus PNG I/O.

use std::path::Path;

use image::{imageops, ImageReader, RgbImage};

use crate::error::{MixdlError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(MixdlError::param(format!(
                "{} pixels do not fill a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Splits an `[n, c, h, w]` tensor into images.
    pub fn batch_from_tensor(t: &Tensor) -> Vec<Image> {
        let s = t.shape();
        assert_eq!(s.len(), 4, "image batch must be [n, c, h, w], got {s:?}");
        (0..s[0])
            .map(|i| Image {
                channels: s[1],
                height: s[2],
                width: s[3],
                data: t.row(i).to_vec(),
            })
            .collect()
    }

    /// Stacks equally shaped images into an `[n, c, h, w]` tensor.
    pub fn batch_to_tensor(images: &[Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| MixdlError::param("empty image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.shape() != first.shape() {
                return Err(MixdlError::param("image batch mixes shapes"));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(
            vec![images.len(), first.channels, first.height, first.width],
            data,
        ))
    }

    /// 2x2 box downsampling; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Image {
        let (h, w) = (self.height / 2 * 2, self.width / 2 * 2);
        let mut cropped = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                let start = (c * self.height + y) * self.width;
                cropped.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Image {
            channels: self.channels,
            height: h / 2,
            width: w / 2,
            data: crate::autograd::avg_pool2_data(&cropped, self.channels, h, w),
        }
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(MixdlError::param(format!(
                "cannot encode a {}-channel image as RGB",
                self.channels
            )));
        }
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| to_u8(self.get(c, y, x)));
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        Ok(out)
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(3, h, w, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, from_u8(p.0[c]));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb(&self.to_rgb8()?, path)
    }

    /// Decodes any PNG/JPEG, center-crops it to a square and resizes it to
    /// `resolution` when the sizes differ.
    pub fn load(path: &Path, resolution: usize) -> Result<Image> {
        let ingest = |reason: String| MixdlError::Ingestion {
            path: path.to_path_buf(),
            reason,
        };
        let decoded = ImageReader::open(path)
            .map_err(|e| ingest(e.to_string()))?
            .with_guessed_format()
            .map_err(|e| ingest(e.to_string()))?
            .decode()
            .map_err(|e| ingest(e.to_string()))?
            .to_rgb8();
        let (w, h) = decoded.dimensions();
        if w == 0 || h == 0 {
            return Err(ingest("image has no pixels".into()));
        }
        let side = w.min(h);
        let square = imageops::crop_imm(&decoded, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let target = resolution as u32;
        let resized = if side == target {
            square
        } else {
            imageops::resize(&square, target, target, imageops::FilterType::Triangle)
        };
        Ok(Image::from_rgb8(&resized))
    }
}

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| MixdlError::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => MixdlError::io(path, io),
            other => MixdlError::io(path, std::io::Error::other(other.to_string())),
        })
}

/// Tiles images row-major into a grid with `cols` columns and a 1-pixel
/// black gutter.
pub fn save_grid(images: &[Image], cols: usize, path: &Path) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| MixdlError::param("cannot write an empty grid"))?;
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (h, w) = (first.height() as u32, first.width() as u32);
    let mut canvas = RgbImage::new(cols as u32 * (w + 1) + 1, rows as u32 * (h + 1) + 1);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(MixdlError::param("grid images must share a shape"));
        }
        let tile = img.to_rgb8()?;
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        imageops::replace(&mut canvas, &tile, (1 + c * (w + 1)).into(), (1 + r * (h + 1)).into());
    }
    save_rgb(&canvas, path)
}
