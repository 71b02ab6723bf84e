//! Averaged Fourier spectra of images or of their residual views.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::filterbank::{group_residual, FilterBank, FilterGroup};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Mean `ln(1 + |F|)` over images and channels, DC at `(n/2, n/2)`.
    pub map: Array2<f64>,
    /// Share of the mean power `|F|^2` inside the central low-frequency box.
    pub low_band_fraction: f64,
}

impl Spectrum {
    pub fn size(&self) -> usize {
        self.map.nrows()
    }

    /// Grayscale rendering scaled so the largest value is white.
    pub fn to_gray(&self) -> GrayImage {
        let n = self.size() as u32;
        let max = self.map.fold(0.0f64, |a, &b| a.max(b));
        GrayImage::from_fn(n, n, |x, y| {
            let v = self.map[[y as usize, x as usize]];
            let g = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            Luma([g as u8])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray().save(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Side and start index of the low-frequency box in an `n x n` shifted spectrum.
pub fn low_band_box(n: usize) -> (usize, usize) {
    let side = (n / 8).max(1);
    (side, n / 2 - side / 2)
}

/// Unshifted 2-D DFT of one channel.
pub fn fft2(plane: &Array2<f64>) -> Array2<Complex<f64>> {
    let (h, w) = plane.dim();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut data = plane.mapv(|v| Complex::new(v, 0.0));
    for mut row in data.rows_mut() {
        let mut buf: Vec<Complex<f64>> = row.to_vec();
        row_fft.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    for mut col in data.columns_mut() {
        let mut buf: Vec<Complex<f64>> = col.to_vec();
        col_fft.process(&mut buf);
        col.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    data
}

/// Resizes each image to `size x size`, optionally replaces it with the
/// residual of `group`, and averages the centred spectra.
pub fn average_spectrum(
    images: &[Image],
    group: Option<&FilterGroup>,
    bank: &FilterBank,
    size: usize,
) -> Result<Spectrum> {
    if images.is_empty() {
        return Err(Error::Ingestion {
            message: "spectrum needs at least one image".into(),
            paths: Vec::new(),
        });
    }
    if size == 0 {
        return Err(Error::config("analysis_size", "must be positive"));
    }
    let n = size;
    let mut log_mag = Array2::<f64>::zeros((n, n));
    let mut power = Array2::<f64>::zeros((n, n));
    let mut planes = 0usize;
    for img in images {
        let img = img.resize_bilinear(n, n);
        let src = match group {
            Some(g) => group_residual(&img, g, bank)?.pixels,
            None => img,
        };
        for c in 0..src.channels() {
            let plane = src.data().index_axis(ndarray::Axis(2), c).to_owned();
            let f = fft2(&plane);
            for ((y, x), z) in f.indexed_iter() {
                let (sy, sx) = ((y + n / 2) % n, (x + n / 2) % n);
                let mag = z.norm();
                log_mag[[sy, sx]] += mag.ln_1p();
                power[[sy, sx]] += mag * mag;
            }
            planes += 1;
        }
    }
    log_mag.mapv_inplace(|v| v / planes as f64);
    let total: f64 = power.sum();
    let (side, start) = low_band_box(n);
    let low: f64 = power.slice(ndarray::s![start..start + side, start..start + side]).sum();
    let low_band_fraction = if total > 0.0 { low / total } else { 0.0 };
    Ok(Spectrum {
        map: log_mag,
        low_band_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_puts_everything_at_dc() {
        let bank = FilterBank::builtin();
        let s = average_spectrum(&[Image::filled(16, 16, 3, 0.4)], None, &bank, 16).unwrap();
        assert!((s.low_band_fraction - 1.0).abs() < 1e-12);
        let dc = s.map[[8, 8]];
        assert!(dc > 0.0);
        assert_eq!(s.map.iter().filter(|&&v| v > 1e-9).count(), 1);
    }

    #[test]
    fn constant_image_residuals_have_an_empty_spectrum() {
        let bank = FilterBank::builtin();
        for g in FilterGroup::all() {
            let s = average_spectrum(&[Image::filled(16, 16, 3, 0.4)], Some(&g), &bank, 16).unwrap();
            assert!(s.map.iter().all(|&v| v == 0.0));
            assert_eq!(s.low_band_fraction, 0.0);
        }
    }

    #[test]
    fn magnitude_is_point_symmetric_for_real_input() {
        let plane = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 7 + x * 13) % 11) as f64 / 11.0 - 0.3);
        let f = fft2(&plane);
        for y in 0..8 {
            for x in 0..8 {
                let m = f[[(8 - y) % 8, (8 - x) % 8]].norm();
                assert!((f[[y, x]].norm() - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn band_box_is_centred() {
        assert_eq!(low_band_box(64), (8, 28));
        assert_eq!(low_band_box(4), (1, 2));
    }
}
