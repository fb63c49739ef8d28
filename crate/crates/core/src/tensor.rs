//! Dense arrays used throughout the crate.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A batch of feature maps in `[batch, channels, height, width]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims(n, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks single-channel square images into a `[n, 1, s, s]` batch.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut data = Vec::new();
        let mut n = 0;
        let mut size = None;
        for img in images {
            match size {
                None => size = Some(img.size()),
                Some(s) if s != img.size() => return Err(Error::dims(s, img.size())),
                _ => {}
            }
            data.extend_from_slice(img.pixels());
            n += 1;
        }
        let s = size.ok_or(Error::Empty("image batch"))?;
        Ok(Tensor {
            shape: [n, 1, s, s],
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Number of elements in one `height × width` plane.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[channels, height, width]` slice of batch item `b`.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }
}

/// A square single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::dims(size * size, pixels.len()));
        }
        Ok(Image { size, pixels })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Image {
            size,
            pixels: vec![value; size * size],
        }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.size + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn clip_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

/// A square map of class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    size: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(size: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != size * size {
            return Err(Error::dims(size * size, labels.len()));
        }
        Ok(Mask { size, labels })
    }

    pub fn empty(size: usize) -> Self {
        Mask {
            size,
            labels: vec![0; size * size],
        }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.labels[y * self.size + x] = class;
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&c| c == class).count()
    }

    pub fn max_class(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}
