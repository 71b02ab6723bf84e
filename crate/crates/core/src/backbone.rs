//! Vision-transformer backbone with adapter sites on the MLP linears of its
//! last blocks, plus the sigmoid classification head.
//!
//! The encoder follows the CLIP image tower layout: linear patch embedding,
//! class token, learned positions, a pre-norm, pre-LN transformer blocks
//! (`x + attn(ln1(x))`, then `x + fc2(gelu(fc1(ln2(x))))`), a post-norm on the
//! pooled token and a linear projection to the feature width.
//!
//! Backbone weights are frozen. The backward pass only produces gradients
//! for the adapter factors and stops below the lowest adapted block.

use std::path::PathBuf;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperlora::{tmut, tmut1, tref, tref1, LoRAWeights, Site, SiteShape, NUM_POSITIONS};
use crate::nn::{fill_normal, quick_gelu, quick_gelu_grad, sigmoid, softmax_rows, LayerNorm, LayerNormCache, Linear};
use crate::tensors::{ParamGroup, TensorMut, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    /// Randomly initialized from the model seed.
    #[default]
    Toy,
    /// Weights read from a tensor blob (`pretrained_weights`) using the
    /// same tensor names as the toy backbone.
    PretrainedAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub variant: BackboneVariant,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    pub heads: usize,
    pub feature_dim: usize,
    /// Number of trailing blocks that receive adapters. Values above
    /// `depth` are clamped to `depth`.
    pub fine_tuned_blocks: usize,
    /// MLP positions that receive adapters (1 = expansion, 2 = projection).
    pub lora_positions: Vec<usize>,
    pub pooling: Pooling,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Toy,
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            depth: 4,
            width: 64,
            mlp_ratio: 4,
            heads: 4,
            feature_dim: 64,
            fine_tuned_blocks: 8,
            lora_positions: vec![1, 2],
            pooling: Pooling::Cls,
            pretrained_weights: None,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("depth", self.depth),
            ("width", self.width),
            ("mlp_ratio", self.mlp_ratio),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
            ("fine_tuned_blocks", self.fine_tuned_blocks),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!("must divide image_size {}", self.image_size),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config("heads", format!("must divide width {}", self.width)));
        }
        if self.lora_positions.is_empty()
            || self.lora_positions.iter().any(|p| !(1..=NUM_POSITIONS).contains(p))
        {
            return Err(Error::config("lora_positions", "must be a non-empty subset of {1, 2}"));
        }
        if self.variant == BackboneVariant::PretrainedAdapter && self.pretrained_weights.is_none() {
            return Err(Error::config(
                "pretrained_weights",
                "required for the pretrained-adapter variant",
            ));
        }
        Ok(())
    }

    /// Number of adapted blocks after clamping to `depth`.
    pub fn adapted_blocks(&self) -> usize {
        self.fine_tuned_blocks.min(self.depth)
    }

    pub fn first_adapted_block(&self) -> usize {
        self.depth - self.adapted_blocks()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn hidden_width(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Weight shapes of the two MLP linears.
    pub fn site_shapes(&self) -> [SiteShape; NUM_POSITIONS] {
        [
            SiteShape {
                d_out: self.hidden_width(),
                d_in: self.width,
            },
            SiteShape {
                d_out: self.width,
                d_in: self.hidden_width(),
            },
        ]
    }

    /// Adapter sites as `(layer row, position)`, layer rows counting from the
    /// first adapted block.
    pub fn injection_sites(&self) -> Vec<Site> {
        let mut positions = self.lora_positions.clone();
        positions.sort_unstable();
        positions.dedup();
        (0..self.adapted_blocks())
            .flat_map(|layer| positions.iter().map(move |&position| Site { layer, position }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    pub patch_embed: Linear,
    pub cls_token: Array1<f64>,
    pub pos_embed: Array2<f64>,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
    /// `feature_dim x width`
    pub proj: Array2<f64>,
}

/// Generated adapters of one expert for every adapted block, indexed by
/// layer row then position.
#[derive(Debug, Clone)]
pub struct ExpertAdapters {
    pub expert: usize,
    pub scale: f64,
    pub layers: Vec<[Option<LoRAWeights>; NUM_POSITIONS]>,
}

impl ExpertAdapters {
    pub fn count(&self) -> usize {
        self.layers.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Adapter-factor gradients, shaped like [`ExpertAdapters::layers`].
pub type AdapterGrads = Vec<[Option<(Array2<f64>, Array2<f64>)>; NUM_POSITIONS]>;

struct BlockTrace {
    ln1: LayerNormCache,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    low1: Option<Array2<f64>>,
    pre1: Array2<f64>,
    g: Array2<f64>,
    low2: Option<Array2<f64>>,
}

/// Activations recorded during a forward pass for [`Backbone::backward`].
pub struct Trace {
    blocks: Vec<BlockTrace>,
    ln_post: LayerNormCache,
}

impl Backbone {
    pub fn new_random(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.width;
        let hid = spec.hidden_width();
        let ln = |dim: usize, rng: &mut dyn rand::RngCore| {
            let mut l = LayerNorm::identity(dim);
            let mut jitter = Array1::zeros(dim);
            fill_normal(jitter.as_slice_mut().expect("contiguous"), 0.1, rng);
            l.gamma += &jitter;
            fill_normal(l.beta.as_slice_mut().expect("contiguous"), 0.05, rng);
            l
        };
        let linear = |out: usize, inp: usize, rng: &mut dyn rand::RngCore| {
            let mut lin = Linear::normal(out, inp, (1.0 / inp as f64).sqrt(), rng);
            fill_normal(lin.bias.as_slice_mut().expect("contiguous"), 0.02, rng);
            lin
        };
        let patch_embed = linear(d, spec.patch_dim(), rng);
        let mut cls_token = Array1::zeros(d);
        fill_normal(cls_token.as_slice_mut().expect("contiguous"), 0.5, rng);
        let mut pos_embed = Array2::zeros((spec.num_tokens(), d));
        fill_normal(pos_embed.as_slice_mut().expect("contiguous"), 0.1, rng);
        let ln_pre = ln(d, rng);
        let blocks = (0..spec.depth)
            .map(|_| Block {
                ln1: ln(d, rng),
                qkv: linear(3 * d, d, rng),
                attn_out: linear(d, d, rng),
                ln2: ln(d, rng),
                fc1: linear(hid, d, rng),
                fc2: linear(d, hid, rng),
            })
            .collect();
        let ln_post = ln(d, rng);
        let mut proj = Array2::zeros((spec.feature_dim, d));
        fill_normal(proj.as_slice_mut().expect("contiguous"), (1.0 / d as f64).sqrt(), rng);
        Ok(Self {
            spec,
            patch_embed,
            cls_token,
            pos_embed,
            ln_pre,
            blocks,
            ln_post,
            proj,
        })
    }

    /// Zero-initialized backbone of the right shape, for loading weights into.
    pub fn zeros(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.width;
        let hid = spec.hidden_width();
        let blocks = (0..spec.depth)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                qkv: Linear::zeros(3 * d, d),
                attn_out: Linear::zeros(d, d),
                ln2: LayerNorm::identity(d),
                fc1: Linear::zeros(hid, d),
                fc2: Linear::zeros(d, hid),
            })
            .collect();
        Ok(Self {
            patch_embed: Linear::zeros(d, spec.patch_dim()),
            cls_token: Array1::zeros(d),
            pos_embed: Array2::zeros((spec.num_tokens(), d)),
            ln_pre: LayerNorm::identity(d),
            blocks,
            ln_post: LayerNorm::identity(d),
            proj: Array2::zeros((spec.feature_dim, d)),
            spec,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Runs the encoder on `num_patches x patch_dim` inputs.
    pub fn features(&self, patches: ArrayView2<'_, f64>, adapters: Option<&ExpertAdapters>) -> Result<Array1<f64>> {
        self.run(patches, adapters, false).map(|(f, _)| f)
    }

    /// Forward pass that also records what [`Backbone::backward`] needs.
    pub fn features_traced(
        &self,
        patches: ArrayView2<'_, f64>,
        adapters: &ExpertAdapters,
    ) -> Result<(Array1<f64>, Trace)> {
        let (f, trace) = self.run(patches, Some(adapters), true)?;
        Ok((f, trace.expect("recorded")))
    }

    fn check_adapters(&self, adapters: &ExpertAdapters) -> Result<()> {
        if adapters.layers.len() != self.spec.adapted_blocks() {
            return Err(Error::Shape(format!(
                "{} adapter layers supplied, backbone adapts {} blocks",
                adapters.layers.len(),
                self.spec.adapted_blocks()
            )));
        }
        let shapes = self.spec.site_shapes();
        for slot in &adapters.layers {
            for (k, lora) in slot.iter().enumerate() {
                if let Some(l) = lora {
                    if l.a.nrows() != shapes[k].d_out || l.b.ncols() != shapes[k].d_in || l.a.ncols() != l.b.nrows() {
                        return Err(Error::Shape(format!(
                            "adapter at position {} has A {:?}, B {:?}",
                            k + 1,
                            l.a.dim(),
                            l.b.dim()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn run(
        &self,
        patches: ArrayView2<'_, f64>,
        adapters: Option<&ExpertAdapters>,
        record: bool,
    ) -> Result<(Array1<f64>, Option<Trace>)> {
        let spec = &self.spec;
        if patches.dim() != (spec.num_patches(), spec.patch_dim()) {
            return Err(Error::Shape(format!(
                "patch matrix {:?}, expected {:?}",
                patches.dim(),
                (spec.num_patches(), spec.patch_dim())
            )));
        }
        if let Some(a) = adapters {
            self.check_adapters(a)?;
        }
        let d = spec.width;
        let mut x0 = Array2::zeros((spec.num_tokens(), d));
        x0.row_mut(0).assign(&self.cls_token);
        x0.slice_mut(s![1.., ..]).assign(&self.patch_embed.forward(patches));
        x0 += &self.pos_embed;
        let (mut x, _) = self.ln_pre.forward(x0.view());

        let first = spec.first_adapted_block();
        let mut traces = Vec::new();
        for (bi, blk) in self.blocks.iter().enumerate() {
            let slot = if bi >= first {
                adapters.map(|a| (&a.layers[bi - first], a.scale))
            } else {
                None
            };
            let keep = record && bi >= first;
            let (nx, trace) = self.block_forward(blk, x, slot, keep);
            x = nx;
            if let Some(t) = trace {
                traces.push(t);
            }
        }
        let pooled = match spec.pooling {
            Pooling::Cls => x.row(0).to_owned(),
            Pooling::Mean => x.mean_axis(Axis(0)).expect("non-empty"),
        };
        let (normed, ln_post) = self.ln_post.forward(pooled.view().insert_axis(Axis(0)));
        let feat = self.proj.dot(&normed.row(0));
        let trace = record.then(|| Trace {
            blocks: traces,
            ln_post,
        });
        Ok((feat, trace))
    }

    fn block_forward(
        &self,
        blk: &Block,
        x: Array2<f64>,
        slot: Option<(&[Option<LoRAWeights>; NUM_POSITIONS], f64)>,
        record: bool,
    ) -> (Array2<f64>, Option<BlockTrace>) {
        let (h, ln1) = blk.ln1.forward(x.view());
        let qkv = blk.qkv.forward(h.view());
        let (concat, probs) = attention(&qkv, self.spec.heads);
        let x = x + blk.attn_out.forward(concat.view());
        let (h2, ln2) = blk.ln2.forward(x.view());
        let (l1, l2, scale) = match slot {
            Some((pair, scale)) => (pair[0].as_ref(), pair[1].as_ref(), scale),
            None => (None, None, 0.0),
        };
        let (pre1, low1) = lora_linear(&blk.fc1, h2.view(), l1, scale);
        let g = pre1.mapv(quick_gelu);
        let (m, low2) = lora_linear(&blk.fc2, g.view(), l2, scale);
        let out = x + m;
        let trace = record.then(|| BlockTrace {
            ln1,
            qkv,
            probs,
            ln2,
            h2,
            low1,
            pre1,
            g,
            low2,
        });
        (out, trace)
    }

    /// Gradients of a scalar loss with respect to every adapter factor, given
    /// the loss gradient with respect to the feature vector.
    pub fn backward(
        &self,
        trace: &Trace,
        d_feat: ArrayView1<'_, f64>,
        adapters: &ExpertAdapters,
    ) -> AdapterGrads {
        let spec = &self.spec;
        let t = spec.num_tokens();
        let d_normed = self.proj.t().dot(&d_feat);
        let d_pooled = self
            .ln_post
            .backward(d_normed.view().insert_axis(Axis(0)), &trace.ln_post);
        let mut dx = Array2::zeros((t, spec.width));
        match spec.pooling {
            Pooling::Cls => dx.row_mut(0).assign(&d_pooled.row(0)),
            Pooling::Mean => {
                let share = d_pooled.row(0).mapv(|v| v / t as f64);
                for mut row in dx.axis_iter_mut(Axis(0)) {
                    row.assign(&share);
                }
            }
        }

        let first = spec.first_adapted_block();
        let mut grads: AdapterGrads = vec![[None, None]; spec.adapted_blocks()];
        for (layer, bt) in trace.blocks.iter().enumerate().rev() {
            let blk = &self.blocks[first + layer];
            let pair = &adapters.layers[layer];
            let scale = adapters.scale;
            let (dg, g2) = lora_linear_backward(&blk.fc2, bt.g.view(), bt.low2.as_ref(), pair[1].as_ref(), dx.view(), scale);
            let dpre1 = dg * &bt.pre1.mapv(quick_gelu_grad);
            let (dh2, g1) = lora_linear_backward(&blk.fc1, bt.h2.view(), bt.low1.as_ref(), pair[0].as_ref(), dpre1.view(), scale);
            grads[layer] = [g1, g2];
            if layer == 0 {
                break;
            }
            dx += &blk.ln2.backward(dh2.view(), &bt.ln2);
            let d_concat = dx.dot(&blk.attn_out.weight);
            let d_qkv = attention_backward(&bt.qkv, &bt.probs, &d_concat, spec.heads);
            let dh = d_qkv.dot(&blk.qkv.weight);
            dx += &blk.ln1.backward(dh.view(), &bt.ln1);
        }
        grads
    }
}

/// Multi-head scaled dot-product self-attention over a packed `[q | k | v]`
/// matrix. Returns the concatenated head outputs and each head's weights.
fn attention(qkv: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::zeros((qkv.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut p = q.dot(&k.t()) * scale;
        softmax_rows(&mut p);
        concat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
        probs.push(p);
    }
    (concat, probs)
}

fn attention_backward(
    qkv: &Array2<f64>,
    probs: &[Array2<f64>],
    d_concat: &Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_qkv = Array2::zeros(qkv.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let d_out = d_concat.slice(s![.., h * dh..(h + 1) * dh]);
        let dp = d_out.dot(&v.t());
        let dv = p.t().dot(&d_out);
        let mut ds = &dp * p;
        for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
            let total = row.sum();
            row.zip_mut_with(&prow, |g, &pv| *g -= pv * total);
        }
        let dq = ds.dot(&k) * scale;
        let dk = ds.t().dot(&q) * scale;
        d_qkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
        d_qkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
        d_qkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
    }
    d_qkv
}

/// `x W^T + b + scale * (x B^T) A^T`; also returns `x B^T` when adapted.
fn lora_linear(
    lin: &Linear,
    x: ArrayView2<'_, f64>,
    lora: Option<&LoRAWeights>,
    scale: f64,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = lin.forward(x);
    let low = lora.map(|l| {
        let low = x.dot(&l.b.t());
        y.scaled_add(scale, &low.dot(&l.a.t()));
        low
    });
    (y, low)
}

/// Gradients of the two LoRA factors, `(dA, dB)`.
type LoraGrads = (Array2<f64>, Array2<f64>);

fn lora_linear_backward(
    lin: &Linear,
    x: ArrayView2<'_, f64>,
    low: Option<&Array2<f64>>,
    lora: Option<&LoRAWeights>,
    dy: ArrayView2<'_, f64>,
    scale: f64,
) -> (Array2<f64>, Option<LoraGrads>) {
    let mut dx = dy.dot(&lin.weight);
    let grads = match (lora, low) {
        (Some(l), Some(low)) => {
            let dy_a = dy.dot(&l.a);
            dx.scaled_add(scale, &dy_a.dot(&l.b));
            let da = dy.t().dot(low) * scale;
            let db = dy_a.t().dot(&x) * scale;
            Some((da, db))
        }
        _ => None,
    };
    (dx, grads)
}

impl ParamGroup for Backbone {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            tref("backbone.patch_embed.weight", &self.patch_embed.weight),
            tref1("backbone.patch_embed.bias", &self.patch_embed.bias),
            tref1("backbone.cls_token", &self.cls_token),
            tref("backbone.pos_embed", &self.pos_embed),
            tref1("backbone.ln_pre.gamma", &self.ln_pre.gamma),
            tref1("backbone.ln_pre.beta", &self.ln_pre.beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("backbone.blocks.{i}");
            out.push(tref1(&format!("{p}.ln1.gamma"), &b.ln1.gamma));
            out.push(tref1(&format!("{p}.ln1.beta"), &b.ln1.beta));
            out.push(tref(&format!("{p}.qkv.weight"), &b.qkv.weight));
            out.push(tref1(&format!("{p}.qkv.bias"), &b.qkv.bias));
            out.push(tref(&format!("{p}.attn_out.weight"), &b.attn_out.weight));
            out.push(tref1(&format!("{p}.attn_out.bias"), &b.attn_out.bias));
            out.push(tref1(&format!("{p}.ln2.gamma"), &b.ln2.gamma));
            out.push(tref1(&format!("{p}.ln2.beta"), &b.ln2.beta));
            out.push(tref(&format!("{p}.fc1.weight"), &b.fc1.weight));
            out.push(tref1(&format!("{p}.fc1.bias"), &b.fc1.bias));
            out.push(tref(&format!("{p}.fc2.weight"), &b.fc2.weight));
            out.push(tref1(&format!("{p}.fc2.bias"), &b.fc2.bias));
        }
        out.push(tref1("backbone.ln_post.gamma", &self.ln_post.gamma));
        out.push(tref1("backbone.ln_post.beta", &self.ln_post.beta));
        out.push(tref("backbone.proj", &self.proj));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            tmut("backbone.patch_embed.weight", &mut self.patch_embed.weight),
            tmut1("backbone.patch_embed.bias", &mut self.patch_embed.bias),
            tmut1("backbone.cls_token", &mut self.cls_token),
            tmut("backbone.pos_embed", &mut self.pos_embed),
            tmut1("backbone.ln_pre.gamma", &mut self.ln_pre.gamma),
            tmut1("backbone.ln_pre.beta", &mut self.ln_pre.beta),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("backbone.blocks.{i}");
            out.push(tmut1(&format!("{p}.ln1.gamma"), &mut b.ln1.gamma));
            out.push(tmut1(&format!("{p}.ln1.beta"), &mut b.ln1.beta));
            out.push(tmut(&format!("{p}.qkv.weight"), &mut b.qkv.weight));
            out.push(tmut1(&format!("{p}.qkv.bias"), &mut b.qkv.bias));
            out.push(tmut(&format!("{p}.attn_out.weight"), &mut b.attn_out.weight));
            out.push(tmut1(&format!("{p}.attn_out.bias"), &mut b.attn_out.bias));
            out.push(tmut1(&format!("{p}.ln2.gamma"), &mut b.ln2.gamma));
            out.push(tmut1(&format!("{p}.ln2.beta"), &mut b.ln2.beta));
            out.push(tmut(&format!("{p}.fc1.weight"), &mut b.fc1.weight));
            out.push(tmut1(&format!("{p}.fc1.bias"), &mut b.fc1.bias));
            out.push(tmut(&format!("{p}.fc2.weight"), &mut b.fc2.weight));
            out.push(tmut1(&format!("{p}.fc2.bias"), &mut b.fc2.bias));
        }
        out.push(tmut1("backbone.ln_post.gamma", &mut self.ln_post.gamma));
        out.push(tmut1("backbone.ln_post.beta", &mut self.ln_post.beta));
        out.push(tmut("backbone.proj", &mut self.proj));
        out
    }
}

/// `sigmoid(w . f + b)` over the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

impl ClassificationHead {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            weight: Array1::zeros(feature_dim),
            bias: Array1::zeros(1),
        }
    }

    pub fn random(feature_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut head = Self::zeros(feature_dim);
        fill_normal(head.weight.as_slice_mut().expect("contiguous"), std, rng);
        head
    }

    pub fn logit(&self, features: ArrayView1<'_, f64>) -> f64 {
        self.weight.dot(&features) + self.bias[0]
    }

    pub fn probability(&self, features: ArrayView1<'_, f64>) -> f64 {
        sigmoid(self.logit(features))
    }

    /// Accumulates head gradients for `d_logit` and returns the feature gradient.
    pub fn backward(&self, features: ArrayView1<'_, f64>, d_logit: f64, grad: &mut ClassificationHead) -> Array1<f64> {
        grad.weight.scaled_add(d_logit, &features);
        grad.bias[0] += d_logit;
        self.weight.mapv(|w| w * d_logit)
    }
}

impl ParamGroup for ClassificationHead {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![tref1("head.weight", &self.weight), tref1("head.bias", &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![tmut1("head.weight", &mut self.weight), tmut1("head.bias", &mut self.bias)]
    }
}
