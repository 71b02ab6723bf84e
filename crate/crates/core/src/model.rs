//! The trainable detector: frozen backbone, hypernetwork and head.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterGrads, Backbone, BackboneSpec, BackboneVariant, ClassificationHead, ExpertAdapters};
use crate::error::{Error, Result};
use crate::filterbank::{make_views, FilterBank, ResidualView};
use crate::hyperlora::{HyperConfig, HyperNetwork, NUM_EXPERTS};
use crate::imaging::Image;
use crate::nn::sigmoid;
use crate::tensors::{ParamGroup, TensorMut, TensorRef, TensorStore};

/// Per-channel standardization applied to every view before the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Preprocess {
    /// CLIP image statistics.
    fn default() -> Self {
        Self {
            mean: vec![0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: vec![0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub hyper: HyperConfig,
    pub preprocess: Preprocess,
    pub head_init_std: Option<f64>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hyper.validate()?;
        let c = self.backbone.in_channels;
        if self.preprocess.mean.len() != c || self.preprocess.std.len() != c {
            return Err(Error::config(
                "preprocess",
                format!("mean and std need {c} entries, one per channel"),
            ));
        }
        if self.preprocess.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("preprocess.std", "entries must be positive"));
        }
        Ok(())
    }

    pub fn head_std(&self) -> f64 {
        self.head_init_std.unwrap_or(0.02)
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub hyper: HyperNetwork,
    pub head: ClassificationHead,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        Self {
            hyper: self.hyper.zeros_like(),
            head: ClassificationHead::zeros(self.head.weight.len()),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Trainable) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.data.iter_mut().zip(src.data).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl ParamGroup for Trainable {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = self.hyper.tensors();
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = self.hyper.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct HyperDetModel {
    config: ModelConfig,
    pub backbone: Backbone,
    pub trainable: Trainable,
}

/// Gradients of one `(sample, expert)` pass.
pub struct PassGrads {
    pub head: ClassificationHead,
    pub adapters: AdapterGrads,
}

impl HyperDetModel {
    /// Builds a model with every random tensor drawn from `seed`, in the order
    /// backbone, hypernetwork, head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = &config.backbone;
        let backbone = match spec.variant {
            BackboneVariant::Toy => Backbone::new_random(spec.clone(), &mut rng)?,
            BackboneVariant::PretrainedAdapter => {
                let path = spec.pretrained_weights.as_ref().expect("validated");
                let mut b = Backbone::zeros(spec.clone())?;
                b.load_store(&TensorStore::read(path)?)?;
                b
            }
        };
        let hyper = HyperNetwork::new(&config.hyper, spec.adapted_blocks(), spec.site_shapes(), &mut rng)?;
        let head = ClassificationHead::random(spec.feature_dim, config.head_std(), &mut rng);
        Ok(Self {
            config,
            backbone,
            trainable: Trainable { hyper, head },
        })
    }

    pub fn from_parts(config: ModelConfig, backbone: Backbone, trainable: Trainable) -> Result<Self> {
        config.validate()?;
        if backbone.spec() != &config.backbone {
            return Err(Error::Checkpoint("backbone spec does not match model config".into()));
        }
        Ok(Self {
            config,
            backbone,
            trainable,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.config.backbone
    }

    /// Standardizes a view and flattens it into the `num_patches x patch_dim`
    /// backbone input. Patches are taken row-major over the grid; within a
    /// patch the order is (row, column, channel).
    pub fn prepare(&self, pixels: &Image) -> Result<Array2<f64>> {
        let spec = self.spec();
        let (h, w, c) = pixels.dim();
        if (h, w, c) != (spec.image_size, spec.image_size, spec.in_channels) {
            return Err(Error::InputSize {
                expected_h: spec.image_size,
                expected_w: spec.image_size,
                expected_c: spec.in_channels,
                got_h: h,
                got_w: w,
                got_c: c,
            });
        }
        pixels.ensure_valid()?;
        let p = spec.patch_size;
        let grid = spec.grid();
        let mean = &self.config.preprocess.mean;
        let std = &self.config.preprocess.std;
        let data = pixels.data();
        let mut out = Array2::zeros((spec.num_patches(), spec.patch_dim()));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = out.row_mut(gy * grid + gx);
                let mut idx = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            row[idx] = (data[[gy * p + py, gx * p + px, ch]] - mean[ch]) / std[ch];
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// The six views of `image`, each resized bilinearly to the backbone's
    /// input size when needed.
    pub fn views(&self, image: &Image, bank: &FilterBank) -> Result<Vec<ResidualView>> {
        let n = self.spec().image_size;
        let mut views = make_views(image, bank)?;
        for v in &mut views {
            if v.pixels.height() != n || v.pixels.width() != n {
                v.pixels = v.pixels.resize_bilinear(n, n);
            }
        }
        Ok(views)
    }

    /// Generates the adapters of `expert` for every injection site.
    pub fn adapters(&self, expert: usize) -> Result<ExpertAdapters> {
        if expert == 0 || expert > NUM_EXPERTS {
            return Err(Error::UnknownExpert(expert));
        }
        let spec = self.spec();
        let mut layers = vec![[None, None]; spec.adapted_blocks()];
        for site in spec.injection_sites() {
            layers[site.layer][site.position - 1] = Some(self.trainable.hyper.generate_lora(expert, site)?);
        }
        Ok(ExpertAdapters {
            expert,
            scale: self.config.hyper.lora_scale,
            layers,
        })
    }

    pub fn logit_prepared(&self, patches: &Array2<f64>, adapters: &ExpertAdapters) -> Result<f64> {
        let f = self.backbone.features(patches.view(), Some(adapters))?;
        Ok(self.trainable.head.logit(f.view()))
    }

    pub fn logit(&self, view: &ResidualView, expert: usize) -> Result<f64> {
        let patches = self.prepare(&view.pixels)?;
        self.logit_prepared(&patches, &self.adapters(expert)?)
    }

    /// Probability that `view` is fake, scored by `expert`.
    pub fn forward(&self, view: &ResidualView, expert: usize) -> Result<f64> {
        Ok(sigmoid(self.logit(view, expert)?))
    }

    pub fn extract_features(&self, view: &ResidualView, expert: usize) -> Result<Array1<f64>> {
        let patches = self.prepare(&view.pixels)?;
        self.backbone.features(patches.view(), Some(&self.adapters(expert)?))
    }

    /// Features of the backbone without any adapter.
    pub fn frozen_features(&self, view: &ResidualView) -> Result<Array1<f64>> {
        let patches = self.prepare(&view.pixels)?;
        self.backbone.features(patches.view(), None)
    }

    /// Forward and backward for one prepared view. `d_loss_d_logit` maps the
    /// logit to the loss gradient at that logit. Returns the logit and the
    /// gradients of the head and of each adapter factor.
    pub fn pass_backward(
        &self,
        patches: &Array2<f64>,
        adapters: &ExpertAdapters,
        d_loss_d_logit: impl FnOnce(f64) -> f64,
    ) -> Result<(f64, PassGrads)> {
        let (feat, trace) = self.backbone.features_traced(patches.view(), adapters)?;
        let logit = self.trainable.head.logit(feat.view());
        let d_logit = d_loss_d_logit(logit);
        let mut head = ClassificationHead::zeros(feat.len());
        let d_feat = self.trainable.head.backward(feat.view(), d_logit, &mut head);
        let adapters = self.backbone.backward(&trace, d_feat.view(), adapters);
        Ok((logit, PassGrads { head, adapters }))
    }
}
