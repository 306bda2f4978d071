//! Float rasters in `[0, 1]`, PNG I/O and image stores.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image `{0}` not found")]
    NotFound(String),
    #[error("cannot decode `{path}`: {message}")]
    Decode { path: String, message: String },
    #[error("cannot encode `{path}`: {message}")]
    Encode { path: String, message: String },
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major, channel-interleaved float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Raster { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels, "raster data length");
        Raster { width, height, channels, data }
    }

    /// Single-channel raster from a function of (x, y).
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster { width, height, channels: 1, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn offset(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.offset(x, y, c)]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let o = self.offset(x, y, c);
        self.data[o] = v;
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Window of `w`×`h` pixels anchored at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside raster");
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = self.offset(x0, y, 0);
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Raster { width: w, height: h, channels: self.channels, data }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// SHA-256 over the dimensions and the raw little-endian sample bits.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in [self.width, self.height, self.channels] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn mse(&self, other: &Raster) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "mse needs equal shapes");
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n
    }

    pub fn from_dynamic(img: &DynamicImage) -> Raster {
        match img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                let g = img.to_luma32f();
                let (w, h) = g.dimensions();
                Raster::from_vec(w as usize, h as usize, 1, g.into_raw())
            }
            _ => {
                let c = img.to_rgb32f();
                let (w, h) = c.dimensions();
                Raster::from_vec(w as usize, h as usize, 3, c.into_raw())
            }
        }
    }

    fn quantize(v: f32) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn to_dynamic(&self) -> Result<DynamicImage, RasterError> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes: Vec<u8> = self.data.iter().map(|&v| Self::quantize(v)).collect();
        match self.channels {
            1 => {
                let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("gray buffer");
                Ok(DynamicImage::ImageLuma8(img))
            }
            3 => {
                let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("rgb buffer");
                Ok(DynamicImage::ImageRgb8(img))
            }
            c => Err(RasterError::Channels(c)),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| RasterError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Raster::from_dynamic(&img))
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.to_dynamic()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| RasterError::Encode { path: path.display().to_string(), message: e.to_string() })
    }

    /// Rounds every sample to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Raster {
        let data = self.data.iter().map(|&v| Self::quantize(v) as f32 / 255.0).collect();
        Raster { data, ..*self }
    }
}

/// Where manifest image paths resolve.
pub trait ImageStore: Sync {
    fn load(&self, path: &str) -> Result<Raster, RasterError>;
    fn save(&self, path: &str, raster: &Raster) -> Result<(), RasterError>;
}

/// Reads from the first root containing the path; writes under `write_root`.
#[derive(Debug, Clone)]
pub struct FsImageStore {
    pub read_roots: Vec<PathBuf>,
    pub write_root: PathBuf,
}

impl FsImageStore {
    pub fn new(read_roots: Vec<PathBuf>, write_root: PathBuf) -> Self {
        FsImageStore { read_roots, write_root }
    }

    pub fn resolve(&self, path: &str) -> Option<PathBuf> {
        let p = Path::new(path);
        if p.is_absolute() {
            return p.exists().then(|| p.to_path_buf());
        }
        std::iter::once(&self.write_root)
            .chain(&self.read_roots)
            .map(|root| root.join(p))
            .find(|candidate| candidate.exists())
    }
}

impl ImageStore for FsImageStore {
    fn load(&self, path: &str) -> Result<Raster, RasterError> {
        let full = self.resolve(path).ok_or_else(|| RasterError::NotFound(path.to_string()))?;
        Raster::load_png(full)
    }

    fn save(&self, path: &str, raster: &Raster) -> Result<(), RasterError> {
        raster.save_png(self.write_root.join(path))
    }
}

/// In-memory store; saves keep full float precision.
#[derive(Debug, Default)]
pub struct MemoryImageStore {
    images: Mutex<HashMap<String, Raster>>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, path: &str, raster: Raster) {
        self.images.lock().expect("store lock").insert(path.to_string(), raster);
    }

    pub fn get(&self, path: &str) -> Option<Raster> {
        self.images.lock().expect("store lock").get(path).cloned()
    }

    pub fn len(&self) -> usize {
        self.images.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageStore for MemoryImageStore {
    fn load(&self, path: &str) -> Result<Raster, RasterError> {
        self.get(path).ok_or_else(|| RasterError::NotFound(path.to_string()))
    }

    fn save(&self, path: &str, raster: &Raster) -> Result<(), RasterError> {
        self.insert(path, raster.clone());
        Ok(())
    }
}
