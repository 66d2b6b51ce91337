//! Image planes: decoded pixel data in `[0, 1]`, height x width x channels.

use std::path::Path;

use image::DynamicImage;
use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("unsupported channel count {channels} (expected 1 or 3)")]
    UnsupportedChannels { channels: usize },
    #[error("pixel value {value} outside [0, 1]")]
    OutOfRange { value: f64 },
    #[error("image dimensions must be at least 1x1")]
    Empty,
}

/// A decoded image: values in `[0, 1]`, shape `(height, width, channels)`
/// with 1 (luma) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    values: Array3<f64>,
}

impl ImagePlane {
    pub fn new(values: Array3<f64>) -> Result<Self, ImageError> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 {
            return Err(ImageError::Empty);
        }
        if c != 1 && c != 3 {
            return Err(ImageError::UnsupportedChannels { channels: c });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange { value: *v });
        }
        Ok(Self { values })
    }

    /// Decode a PNG or BMP file. 8-bit samples are scaled by 1/255 and
    /// 16-bit by 1/65535; alpha channels are dropped.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: DynamicImage) -> Result<Self, ImageError> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = match img {
            DynamicImage::ImageLuma8(buf) => {
                Array3::from_shape_fn((h, w, 1), |(y, x, _)| buf[(x as u32, y as u32)][0] as f64 / 255.0)
            }
            DynamicImage::ImageLuma16(buf) => {
                Array3::from_shape_fn((h, w, 1), |(y, x, _)| buf[(x as u32, y as u32)][0] as f64 / 65535.0)
            }
            DynamicImage::ImageLumaA8(buf) => {
                Array3::from_shape_fn((h, w, 1), |(y, x, _)| buf[(x as u32, y as u32)][0] as f64 / 255.0)
            }
            DynamicImage::ImageLumaA16(buf) => {
                Array3::from_shape_fn((h, w, 1), |(y, x, _)| buf[(x as u32, y as u32)][0] as f64 / 65535.0)
            }
            DynamicImage::ImageRgb8(buf) => {
                Array3::from_shape_fn((h, w, 3), |(y, x, c)| buf[(x as u32, y as u32)][c] as f64 / 255.0)
            }
            DynamicImage::ImageRgba8(buf) => {
                Array3::from_shape_fn((h, w, 3), |(y, x, c)| buf[(x as u32, y as u32)][c] as f64 / 255.0)
            }
            DynamicImage::ImageRgb16(buf) => {
                Array3::from_shape_fn((h, w, 3), |(y, x, c)| buf[(x as u32, y as u32)][c] as f64 / 65535.0)
            }
            DynamicImage::ImageRgba16(buf) => {
                Array3::from_shape_fn((h, w, 3), |(y, x, c)| buf[(x as u32, y as u32)][c] as f64 / 65535.0)
            }
            other => {
                // float formats: convert through rgb32f and clamp
                let buf = other.to_rgb32f();
                Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                    f64::from(buf[(x as u32, y as u32)][c]).clamp(0.0, 1.0)
                })
            }
        };
        Self::new(values)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Luminance plane: BT.601 weights for RGB, identity for grayscale.
    pub fn luminance(&self) -> ndarray::Array2<f64> {
        let (h, w, c) = self.values.dim();
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            if c == 1 {
                self.values[(y, x, 0)]
            } else {
                0.299 * self.values[(y, x, 0)]
                    + 0.587 * self.values[(y, x, 1)]
                    + 0.114 * self.values[(y, x, 2)]
            }
        })
    }

    /// RGB view used by the feature backbones: grayscale is replicated.
    pub fn to_rgb(&self) -> Array3<f64> {
        let (h, w, c) = self.values.dim();
        if c == 3 {
            self.values.clone()
        } else {
            Array3::from_shape_fn((h, w, 3), |(y, x, _)| self.values[(y, x, 0)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_out_of_range_values() {
        let arr = Array3::from_elem((4, 4, 1), 1.5);
        assert!(matches!(
            ImagePlane::new(arr),
            Err(ImageError::OutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_bad_channel_count() {
        let arr = Array3::zeros((4, 4, 2));
        assert!(matches!(
            ImagePlane::new(arr),
            Err(ImageError::UnsupportedChannels { channels: 2 })
        ));
    }

    #[test]
    fn luminance_uses_bt601_weights() {
        let mut arr = Array3::zeros((1, 1, 3));
        arr[(0, 0, 0)] = 1.0;
        arr[(0, 0, 1)] = 0.5;
        arr[(0, 0, 2)] = 0.25;
        let plane = ImagePlane::new(arr).unwrap();
        let y = plane.luminance();
        assert!((y[(0, 0)] - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn decodes_png_and_bmp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = image::RgbImage::new(5, 3);
        for (i, p) in buf.pixels_mut().enumerate() {
            *p = image::Rgb([(i * 17 % 256) as u8, (i * 29 % 256) as u8, (i * 43 % 256) as u8]);
        }
        let png = dir.path().join("t.png");
        let bmp = dir.path().join("t.bmp");
        buf.save(&png).unwrap();
        buf.save(&bmp).unwrap();
        let a = ImagePlane::from_path(&png).unwrap();
        let b = ImagePlane::from_path(&bmp).unwrap();
        assert_eq!(a.height(), 3);
        assert_eq!(a.width(), 5);
        assert_eq!(a.channels(), 3);
        assert_eq!(a, b);
        assert!((a.values()[(0, 1, 0)] - 17.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn decodes_16_bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(4, 4);
        for (i, p) in buf.pixels_mut().enumerate() {
            *p = image::Luma([(i * 4097) as u16]);
        }
        let path = dir.path().join("t16.png");
        buf.save(&path).unwrap();
        let plane = ImagePlane::from_path(&path).unwrap();
        assert_eq!(plane.channels(), 1);
        assert!((plane.values()[(0, 1, 0)] - 4097.0 / 65535.0).abs() < 1e-12);
    }
}
