use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// ITU-R BT.601 luma of an RGB pixel.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Height × width × channels image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
            .expect("valid zero image")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, 1, data).expect("valid grayscale image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Single-channel copy: luma for RGB, identity for grayscale.
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luminance(p[0], p[1], p[2]))
            .collect();
        Image::new(self.height, self.width, 1, data).expect("same geometry")
    }

    /// `(H·W) × C` matrix, one pixel per row.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.height * self.width, self.channels, self.data.clone())
    }

    /// Stacks single-channel images into one multi-channel image.
    pub fn stack_channels(planes: &[&Image]) -> Result<Image> {
        let first = planes.first().ok_or(Error::EmptySources)?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(h * w * planes.len());
        for p in planes {
            if p.channels != 1 || p.height != h || p.width != w {
                return Err(Error::ShapeMismatch("channel stacking needs equal single-channel planes".into()));
            }
        }
        for i in 0..h * w {
            for p in planes {
                data.push(p.data[i]);
            }
        }
        Image::new(h, w, planes.len(), data)
    }

    /// Per-image min-max rescaling to `[0, 1]`. Constant images become zero.
    pub fn min_max_normalized(&self) -> Image {
        let min = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let data = if range > 0.0 {
            self.data.iter().map(|v| (v - min) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image { data, ..self.clone() }
    }

    /// Reads a PNG (8/16-bit, grayscale or colour) and min-max normalizes it.
    /// Alpha is dropped; grayscale-with-alpha becomes one channel.
    pub fn load(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let decoded = image::open(path)?;
        let gray = decoded.color().channel_count() <= 2;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let raw = if gray {
            let buf = decoded.to_luma16();
            Image::new(h, w, 1, buf.into_raw().into_iter().map(f64::from).collect())?
        } else {
            let buf = decoded.to_rgb16();
            Image::new(h, w, 3, buf.into_raw().into_iter().map(f64::from).collect())?
        };
        Ok(raw.min_max_normalized())
    }

    fn to_dynamic16(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        let px: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        if self.channels == 1 {
            DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, px).expect("geometry"))
        } else {
            DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, px).expect("geometry"))
        }
    }

    /// Writes a 16-bit PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dynamic16().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    /// Encodes an 8-bit PNG, for display.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let wide = self.to_dynamic16();
        let img = if self.channels == 1 {
            DynamicImage::ImageLuma8(wide.to_luma8())
        } else {
            DynamicImage::ImageRgb8(wide.to_rgb8())
        };
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}
