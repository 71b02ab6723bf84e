//! Real-valued raster images and the pixel-level operations shared by the
//! filter bank, augmentation and robustness perturbations.

use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// An `H x W x C` image with real-valued samples. Images decoded from disk
/// hold values in `[0, 1]`; residual views may hold any finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((height, width, channels), value),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn((height, width, channels), f),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[[y, x, c]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        let (h, w, c) = self.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidImage(format!("empty image {h}x{w}x{c}")));
        }
        if !self.is_finite() {
            return Err(Error::InvalidImage("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, 3, |(y, x, c)| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        })
    }

    /// Quantizes to 8-bit RGB (clamped to `[0, 1]`, rounded to nearest).
    /// Single-channel images are replicated; extra channels are dropped.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w, ch) = self.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v = self.data[[y as usize, x as usize, c.min(ch - 1)]];
                *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            image::Rgb(px)
        })
    }

    /// Decodes any supported file as 8-bit RGB in `[0, 1]`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| Error::Decode {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Bilinear resampling with half-pixel centres. Returns a clone when the
    /// size already matches.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let (h, w, c) = self.dim();
        if h == height && w == width {
            return self.clone();
        }
        let sy = h as f64 / height as f64;
        let sx = w as f64 / width as f64;
        let src = |pos: f64, n: usize| -> (usize, usize, f64) {
            let p = (pos.max(0.0)).min((n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        };
        let mut out = Array3::zeros((height, width, c));
        for y in 0..height {
            let (y0, y1, fy) = src((y as f64 + 0.5) * sy - 0.5, h);
            for x in 0..width {
                let (x0, x1, fx) = src((x as f64 + 0.5) * sx - 0.5, w);
                for ch in 0..c {
                    let top = self.data[[y0, x0, ch]] * (1.0 - fx) + self.data[[y0, x1, ch]] * fx;
                    let bot = self.data[[y1, x0, ch]] * (1.0 - fx) + self.data[[y1, x1, ch]] * fx;
                    out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Image::new(out)
    }

    /// Separable Gaussian blur with a truncated kernel of radius `ceil(3 sigma)`
    /// and reflective boundaries. `sigma <= 0` is the identity.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        let kernel = gaussian_kernel(sigma);
        if kernel.len() <= 1 {
            return self.clone();
        }
        let radius = (kernel.len() / 2) as isize;
        let (h, w, c) = self.dim();
        let mut tmp = Array3::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, k) in kernel.iter().enumerate() {
                        let xx = reflect(x as isize + t as isize - radius, w);
                        acc += k * self.data[[y, xx, ch]];
                    }
                    tmp[[y, x, ch]] = acc;
                }
            }
        }
        let mut out = Array3::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, k) in kernel.iter().enumerate() {
                        let yy = reflect(y as isize + t as isize - radius, h);
                        acc += k * tmp[[yy, x, ch]];
                    }
                    out[[y, x, ch]] = acc;
                }
            }
        }
        Image::new(out)
    }

    /// Encodes as baseline JPEG at `quality` (1..=100) and decodes back.
    pub fn jpeg_roundtrip(&self, quality: u8) -> std::result::Result<Image, image::ImageError> {
        let rgb = self.to_rgb8();
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100)).encode_image(&rgb)?;
        let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?;
        Ok(Image::from_rgb8(&decoded.to_rgb8()))
    }
}

/// Normalized 1-D Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= total);
    taps
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
        assert_eq!(reflect(-3, 2), 1);
        for n in 1..6 {
            for i in -20..20 {
                assert!(reflect(i, n) < n);
            }
        }
    }

    #[test]
    fn rgb8_roundtrip_is_exact() {
        let img = Image::from_fn(4, 5, 3, |(y, x, c)| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0);
        let back = Image::from_rgb8(&img.to_rgb8());
        assert_eq!(img, back);
    }

    #[test]
    fn resize_same_size_is_identity_and_constant_stays_constant() {
        let img = Image::filled(8, 8, 3, 0.25);
        assert_eq!(img.resize_bilinear(8, 8), img);
        let r = img.resize_bilinear(5, 11);
        assert_eq!(r.dim(), (5, 11, 3));
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        for sigma in [0.5, 1.0, 2.0, 3.7] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }
}
