//! Real-valued rasters and their 8-bit file representation.
//!
//! Pixels are stored interleaved (`(row * width + col) * channels + channel`).
//! Loading scales 8-bit samples by 1/255; saving clamps to `[0, 255]` and rounds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, GrayImage, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{ensure_dims, Error, Result};

pub const MIN_EXTENT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            channels == 1 || channels == 3,
            "image must have 1 or 3 channels, got {channels}"
        );
        ensure_dims!(
            height >= MIN_EXTENT && width >= MIN_EXTENT,
            "image must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {height}x{width}"
        );
        ensure_dims!(
            data.len() == height * width * channels,
            "image data has {} values, expected {}",
            data.len(),
            height * width * channels
        );
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn same_extent(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(img)
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self> {
        let gray = matches!(
            img,
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_)
        );
        if gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Self::new(h as usize, w as usize, 1, data)
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Self::new(h as usize, w as usize, 3, data)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Writes PNG, or binary PGM/PPM when the extension is `pgm`/`ppm`/`pnm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("pgm" | "ppm" | "pnm") => ImageFormat::Pnm,
            _ => ImageFormat::Png,
        };
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_bytes();
        let img = if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("extent checked"))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("extent checked"))
        };
        if format == ImageFormat::Png {
            return img.save_with_format(path, format).map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            });
        }
        if self.channels == 3 && path.extension().is_some_and(|e| e == "pgm") {
            return Err(Error::Usage(format!(
                "{}: cannot write a 3-channel image as PGM",
                path.display()
            )));
        }
        let subtype = if self.channels == 1 {
            PnmSubtype::Graymap(SampleEncoding::Binary)
        } else {
            PnmSubtype::Pixmap(SampleEncoding::Binary)
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        PnmEncoder::new(&mut writer)
            .with_subtype(subtype)
            .write_image(img.as_bytes(), w, h, img.color().into())
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?;
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
