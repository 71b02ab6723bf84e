//! Synthetic separable dataset: smooth random "real" images and "fake"
//! copies carrying an additive pixel-level checkerboard.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub size: usize,
    /// Real/fake pairs in the train split.
    pub train_pairs: usize,
    /// Real/fake pairs in the test split.
    pub test_pairs: usize,
    pub checker_amplitude: f64,
    /// Standard deviation of per-pixel noise added to every base image.
    pub noise: f64,
    pub seed: u64,
    pub generator: String,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            size: 32,
            train_pairs: 100,
            test_pairs: 50,
            checker_amplitude: 0.1,
            noise: 0.01,
            seed: 0,
            generator: "checker".into(),
        }
    }
}

/// A smooth image in `[0.15, 0.85]`: a random 4x4 grid per channel upsampled
/// bilinearly, plus a little pixel noise.
pub fn smooth_image(size: usize, noise: f64, rng: &mut impl Rng) -> Image {
    let coarse = Image::from_fn(4, 4, 3, |_| rng.random_range(0.2..0.8));
    let mut img = coarse.resize_bilinear(size, size);
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("positive noise");
        img.data_mut().mapv_inplace(|v| v + dist.sample(rng));
    }
    img.data_mut().mapv_inplace(|v| v.clamp(0.15, 0.85));
    img
}

/// `image + amplitude * (-1)^(x + y)` on every channel.
pub fn add_checker(image: &Image, amplitude: f64) -> Image {
    let mut out = image.clone();
    for ((y, x, _), v) in out.data_mut().indexed_iter_mut() {
        *v += if (x + y) % 2 == 0 { amplitude } else { -amplitude };
    }
    out
}

/// Writes `<root>/{train,test}/<generator>/{real,fake}/NNNN.png`.
pub fn write_toy_dataset(root: impl AsRef<Path>, spec: &ToySpec) -> Result<PathBuf> {
    let root = root.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (split, pairs) in [("train", spec.train_pairs), ("test", spec.test_pairs)] {
        let real_dir = root.join(split).join(&spec.generator).join("real");
        let fake_dir = root.join(split).join(&spec.generator).join("fake");
        for d in [&real_dir, &fake_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for i in 0..pairs {
            let base = smooth_image(spec.size, spec.noise, &mut rng);
            base.save_png(real_dir.join(format!("{i:04}.png")))?;
            add_checker(&base, spec.checker_amplitude).save_png(fake_dir.join(format!("{i:04}.png")))?;
        }
    }
    Ok(root.to_path_buf())
}
