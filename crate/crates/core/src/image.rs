//! The `ImagePlane` container: an H×W×C array of normalized intensities,
//! stored interleaved (pixel-major) like most image libraries.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: (f64, f64),
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty image {height}x{width}")));
        }
        if !(1..=3).contains(&channels) {
            return Err(Error::shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value at index {i}")));
        }
        Ok(Self { height, width, channels, data, range: (0.0, 1.0) })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Declares a value range other than the default `[0, 1]`.
    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = (lo, hi);
        self
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

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn require_channels(&self, c: usize, what: &str) -> Result<()> {
        if self.channels != c {
            return Err(Error::shape(format!(
                "{what} expects {c} channels, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn require_same_shape(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Copies a rectangular window (no bounds wrap).
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImagePlane> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        ImagePlane::new(h, w, c, data)
    }

    pub fn flip_horizontal(&self) -> ImagePlane {
        let c = self.channels;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * c;
                let dst = (y * self.width + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    /// Reflection padding on the bottom/right edges up to the given size.
    /// Falls back to edge replication where the image is too small to reflect.
    pub fn pad_reflect(&self, height: usize, width: usize) -> ImagePlane {
        debug_assert!(height >= self.height && width >= self.width);
        let reflect = |i: usize, n: usize| -> usize {
            if i < n {
                i
            } else if n == 1 {
                0
            } else {
                let over = i - n + 1;
                let r = (n - 1).saturating_sub(over);
                r.min(n - 1)
            }
        };
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = reflect(y, self.height);
            for x in 0..width {
                let sx = reflect(x, self.width);
                data.extend_from_slice(self.pixel(sy, sx));
            }
        }
        ImagePlane { height, width, channels: c, data, range: self.range }
    }

    /// Converts to a 1×C×H×W tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = self.dims();
        let mut t = Tensor::zeros([1, c, h, w]);
        let out = t.data_mut();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.get(y, x, ch);
                }
            }
        }
        t
    }

    /// Extracts sample `n` of an N×C×H×W tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<ImagePlane> {
        let [_, c, h, w] = t.shape();
        let plane = t.sample(n);
        ImagePlane::from_fn(h, w, c, |y, x, ch| plane[(ch * h + y) * w + x])
    }
}

/// Stacks equally-shaped images into an N×C×H×W batch tensor.
pub fn stack(images: &[ImagePlane]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("empty batch"))?;
    let (h, w, c) = first.dims();
    let mut t = Tensor::zeros([images.len(), c, h, w]);
    let per = c * h * w;
    for (n, img) in images.iter().enumerate() {
        img.require_same_shape(first, "batch stacking")?;
        let single = img.to_tensor();
        t.data_mut()[n * per..(n + 1) * per].copy_from_slice(single.data());
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(ImagePlane::new(0, 2, 3, vec![]).is_err());
        assert!(ImagePlane::new(1, 1, 4, vec![0.0; 4]).is_err());
        assert!(ImagePlane::new(1, 1, 3, vec![0.0; 2]).is_err());
        assert!(ImagePlane::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let img = ImagePlane::new(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let p = img.pad_reflect(1, 5);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0]);
        let single = ImagePlane::new(1, 1, 1, vec![7.0]).unwrap();
        assert_eq!(single.pad_reflect(2, 2).data(), &[7.0; 4]);
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImagePlane::from_fn(3, 4, 3, |y, x, c| (y * 12 + x * 3 + c) as f64 / 40.0).unwrap();
        let back = ImagePlane::from_tensor(&img.to_tensor(), 0).unwrap();
        assert_eq!(img, back);
    }
}
