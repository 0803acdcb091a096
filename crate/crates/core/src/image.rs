//! Image containers shared by the networks, losses, metrics and data loaders.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sg_autodiff::Tensor;

use crate::error::{Error, Result};

/// Closed interval the values of an [`ImageTensor`] must lie in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// `[-1, 1]`, used for network inputs and outputs.
    Signed,
    /// `[0, 255]`, used by the evaluation metrics.
    Byte,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Signed => (-1.0, 1.0),
            ValueRange::Byte => (0.0, 255.0),
        }
    }
}

/// Planar `channels x height x width` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Shape(format!("value {v} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64, range: ValueRange) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width], range)
    }

    /// Builds an image from batch item `index` of an NCHW tensor, clamping
    /// into `range` to absorb rounding at the bounds.
    pub fn from_batch(t: &Tensor, index: usize, range: ValueRange) -> Self {
        let (_, c, h, w) = t.dims4();
        let (lo, hi) = range.bounds();
        let data = t.batch_item(index).into_data().into_iter().map(|v| v.clamp(lo, hi)).collect();
        Self {
            channels: c,
            height: h,
            width: w,
            data,
            range,
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

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.same_size(other) && self.channels == other.channels
    }

    /// `[1, C, H, W]` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Affine map `[-1, 1] -> [0, 255]` with round-to-nearest.
    pub fn to_byte_space(&self) -> ImageTensor {
        match self.range {
            ValueRange::Byte => self.clone(),
            ValueRange::Signed => ImageTensor {
                data: self.data.iter().map(|&v| signed_to_byte(v) as f64).collect(),
                range: ValueRange::Byte,
                ..*self
            },
        }
    }

    /// Affine map `[0, 255] -> [-1, 1]` as `v / 127.5 - 1`.
    pub fn to_signed(&self) -> ImageTensor {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Byte => ImageTensor {
                data: self.data.iter().map(|&v| (v / 127.5 - 1.0).clamp(-1.0, 1.0)).collect(),
                range: ValueRange::Signed,
                ..*self
            },
        }
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in (0..self.width).rev() {
                    data.push(self.get(c, y, x));
                }
            }
        }
        ImageTensor { data, ..*self }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                for x in left..left + width {
                    data.push(self.get(c, y, x));
                }
            }
        }
        Ok(ImageTensor {
            height,
            width,
            data,
            ..*self
        })
    }

    /// Bilinear resize with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ty = fy - y0 as f64;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let tx = fx - x0 as f64;
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bottom = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    data.push(top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        ImageTensor {
            height,
            width,
            data,
            ..*self
        }
    }

    /// 8-bit RGB (or grayscale for one channel) raster in byte space.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Shape(format!("cannot encode {} channels as RGB", self.channels)));
        }
        let bytes = self.to_byte_space();
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = if self.channels == 1 {
                    let v = bytes.get(0, y, x) as u8;
                    [v, v, v]
                } else {
                    [bytes.get(0, y, x) as u8, bytes.get(1, y, x) as u8, bytes.get(2, y, x) as u8]
                };
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        Ok(img)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> ImageTensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        ImageTensor {
            channels: 3,
            height: h,
            width: w,
            data: data.into_iter().map(|v: f64| v.clamp(-1.0, 1.0)).collect(),
            range: ValueRange::Signed,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }

    /// Decodes an 8-bit image file into `[-1, 1]`.
    pub fn load_png(path: &Path) -> Result<ImageTensor> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

pub fn signed_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Ordered list of class colours; index = class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub Vec<[u8; 3]>);

impl Palette {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Nearest palette entry to an RGB colour in byte space; ties go to the
    /// lower index.
    pub fn nearest(&self, rgb: [f64; 3]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, col) in self.0.iter().enumerate() {
            let d: f64 = (0..3).map(|c| (rgb[c] - col[c] as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Palette-coloured semantic layout of a view.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    pub image: ImageTensor,
    pub palette: Palette,
}

impl SemanticMap {
    pub fn new(image: ImageTensor, palette: Palette) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Shape("semantic maps are RGB palette images".into()));
        }
        Ok(Self { image, palette })
    }

    /// Renders a label grid with the palette into `[-1, 1]`.
    pub fn from_labels(labels: &[usize], height: usize, width: usize, palette: Palette) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape("label grid size mismatch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= palette.len()) {
            return Err(Error::Shape(format!("label {bad} outside palette")));
        }
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for (p, &l) in labels.iter().enumerate() {
            for c in 0..3 {
                data[c * hw + p] = palette.0[l][c] as f64 / 127.5 - 1.0;
            }
        }
        let image = ImageTensor::new(3, height, width, data, ValueRange::Signed)?;
        Ok(Self { image, palette })
    }

    /// Decodes every pixel to the nearest palette class.
    pub fn labels(&self) -> Result<Vec<usize>> {
        if self.palette.is_empty() {
            return Err(Error::Metric("empty palette".into()));
        }
        let bytes = self.image.to_byte_space();
        let hw = bytes.height() * bytes.width();
        Ok((0..hw)
            .map(|p| {
                let rgb = [bytes.data()[p], bytes.data()[hw + p], bytes.data()[2 * hw + p]];
                self.palette.nearest(rgb)
            })
            .collect())
    }
}

/// One training unit: condition view, target view and target-view semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub condition_image: ImageTensor,
    pub target_image: ImageTensor,
    pub target_semantic: SemanticMap,
    pub sample_id: String,
}

impl PairedSample {
    pub fn new(
        condition_image: ImageTensor,
        target_image: ImageTensor,
        target_semantic: SemanticMap,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        if !condition_image.same_size(&target_image) || !condition_image.same_size(&target_semantic.image) {
            return Err(Error::Shape(format!(
                "sample grids differ: condition {}x{}, target {}x{}, semantic {}x{}",
                condition_image.height(),
                condition_image.width(),
                target_image.height(),
                target_image.width(),
                target_semantic.image.height(),
                target_semantic.image.width()
            )));
        }
        Ok(Self {
            condition_image,
            target_image,
            target_semantic,
            sample_id: sample_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.condition_image.height()
    }

    pub fn width(&self) -> usize {
        self.condition_image.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 1.5], ValueRange::Signed).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 255.0], ValueRange::Byte).is_ok());
    }

    #[test]
    fn byte_mapping_rounds_to_nearest() {
        let img = ImageTensor::new(1, 1, 3, vec![-1.0, 0.0, 1.0], ValueRange::Signed).unwrap();
        assert_eq!(img.to_byte_space().data(), &[0.0, 128.0, 255.0]);
    }

    #[test]
    fn label_roundtrip_through_palette() {
        let palette = Palette(vec![[0, 0, 0], [200, 30, 30], [30, 200, 30]]);
        let labels = vec![0, 1, 2, 1, 0, 2];
        let map = SemanticMap::from_labels(&labels, 2, 3, palette).unwrap();
        assert_eq!(map.labels().unwrap(), labels);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageTensor::filled(3, 8, 8, 0.25, ValueRange::Signed).unwrap();
        let r = img.resize_bilinear(5, 7);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(img.resize_bilinear(8, 8), img);
    }

    #[test]
    fn sample_requires_matching_grids() {
        let a = ImageTensor::filled(3, 8, 8, 0.0, ValueRange::Signed).unwrap();
        let b = ImageTensor::filled(3, 8, 4, 0.0, ValueRange::Signed).unwrap();
        let s = SemanticMap::new(a.clone(), Palette(vec![[0, 0, 0]])).unwrap();
        assert!(PairedSample::new(a.clone(), b, s.clone(), "x").is_err());
        assert!(PairedSample::new(a.clone(), a, s, "x").is_ok());
    }
}
