//! Plain row-major image containers shared by every stage of the pipeline.

use std::path::Path;

use crate::error::{invalid, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return invalid(format!(
                "buffer of {} bytes does not match {width}x{height}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Loads an 8-bit PGM or PNG. Color inputs are converted with the
    /// standard luma weighting.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        let luma = match img {
            image::DynamicImage::ImageLuma8(l) => l,
            other => other.to_luma8(),
        };
        let (w, h) = luma.dimensions();
        Self::from_vec(w as usize, h as usize, luma.into_raw())
    }

    /// Writes an 8-bit grayscale PNG (or PGM when the extension says so).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer size checked at construction");
        buf.save(path.as_ref())?;
        Ok(())
    }
}

/// Real-valued single-channel image (difference maps, accumulated errors).
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return invalid(format!(
                "buffer of {} values does not match {width}x{height}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Writes the map as an 8-bit PNG scaled so that the maximum maps to 255.
    pub fn save_normalized_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let max = self.max();
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8)
            .collect();
        GrayImage::from_vec(self.width, self.height, bytes)?.save(path)
    }
}

/// Per-pixel disparity with a validity flag.
///
/// Matcher output holds integer levels; ground truth and fused estimates may
/// hold fractional values.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    disp: Vec<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            disp: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<f32>,
    ) -> Self {
        let mut map = Self::invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some(d) = f(x, y) {
                    map.set(x, y, d);
                }
            }
        }
        map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.disp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disp.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        self.at(y * self.width + x)
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Option<f32> {
        self.valid[idx].then(|| self.disp[idx])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        let idx = y * self.width + x;
        self.set_at(idx, d);
    }

    #[inline]
    pub fn set_at(&mut self, idx: usize, d: f32) {
        self.disp[idx] = d;
        self.valid[idx] = true;
    }

    #[inline]
    pub fn clear_at(&mut self, idx: usize) {
        self.disp[idx] = 0.0;
        self.valid[idx] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f32], &mut [bool]) {
        (&mut self.disp, &mut self.valid)
    }
}
