//! Hypernetwork-generated low-rank adapters.
//!
//! Every adapter is addressed by an expert (which view it serves), a layer
//! (which fine-tuned backbone block) and a position (the block's expansion or
//! projection linear). The hypernetwork concatenates the three learned
//! embeddings, passes them through one hidden layer and two linear heads, and
//! reshapes the heads' outputs into the factors `A` (`d_out x r`) and `B`
//! (`r x d_in`). The adapted layer computes `W x + b + scale * A (B x)`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fill_normal, Activation, Linear};
use crate::tensors::{ParamGroup, TensorMut, TensorRef};

/// Experts 1..=5 serve the filtered views, expert 6 the original image.
pub const NUM_EXPERTS: usize = 6;
pub const ORIGINAL_EXPERT: usize = 6;
/// Position 1 is the MLP expansion (`d -> 4d`), position 2 the projection (`4d -> d`).
pub const NUM_POSITIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub rank: usize,
    pub activation: Activation,
    pub lora_scale: f64,
    /// Keep the task/layer/position tables at their initial values.
    pub freeze_embeddings: bool,
    pub head_a_init_std: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            rank: 16,
            activation: Activation::Tanh,
            lora_scale: 1.0,
            freeze_embeddings: false,
            head_a_init_std: 0.02,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank", "must be positive"));
        }
        if !self.lora_scale.is_finite() {
            return Err(Error::config("lora_scale", "must be finite"));
        }
        if !(self.head_a_init_std >= 0.0) {
            return Err(Error::config("head_a_init_std", "must be >= 0"));
        }
        Ok(())
    }
}

/// An injection site: `layer` indexes the fine-tuned blocks (0-based),
/// `position` is 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteShape {
    pub d_out: usize,
    pub d_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub task: Array2<f64>,
    pub layer: Array2<f64>,
    pub position: Array2<f64>,
}

impl EmbeddingTables {
    pub fn zeros(num_tasks: usize, num_layers: usize, embed_dim: usize) -> Self {
        Self {
            task: Array2::zeros((num_tasks, embed_dim)),
            layer: Array2::zeros((num_layers, embed_dim)),
            position: Array2::zeros((NUM_POSITIONS, embed_dim)),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.task.ncols()
    }
}

/// A generated `(A, B)` pair for one expert at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRAWeights {
    pub site: Site,
    pub expert: usize,
    /// `d_out x r`
    pub a: Array2<f64>,
    /// `r x d_in`
    pub b: Array2<f64>,
}

impl LoRAWeights {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// The dense update `A B`.
    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetwork {
    pub tables: EmbeddingTables,
    pub combiner: Linear,
    /// One head per position, emitting `d_out * r` values.
    pub head_a: [Linear; NUM_POSITIONS],
    /// One head per position, emitting `r * d_in` values.
    pub head_b: [Linear; NUM_POSITIONS],
    rank: usize,
    activation: Activation,
    shapes: [SiteShape; NUM_POSITIONS],
}

/// Intermediate values of one generation, kept for the backward pass.
struct Code {
    input: Array1<f64>,
    pre: Array1<f64>,
    hidden: Array1<f64>,
}

impl HyperNetwork {
    /// Randomly initialized hypernetwork with the standard six task rows.
    pub fn new(
        cfg: &HyperConfig,
        num_layers: usize,
        shapes: [SiteShape; NUM_POSITIONS],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_tasks(cfg, NUM_EXPERTS, num_layers, shapes, rng)
    }

    /// As [`HyperNetwork::new`] with an arbitrary number of task rows.
    ///
    /// Initialization: embeddings `N(0, 1)`, combiner `N(0, 1 / 3e)`,
    /// `head_a` `N(0, head_a_init_std^2)`, `head_b` all zero so every
    /// generated `B` starts at zero.
    pub fn with_tasks(
        cfg: &HyperConfig,
        num_tasks: usize,
        num_layers: usize,
        shapes: [SiteShape; NUM_POSITIONS],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut net = Self::zeros(cfg, num_tasks, num_layers, shapes)?;
        let e = cfg.embed_dim;
        fill_normal(net.tables.task.as_slice_mut().expect("contiguous"), 1.0, rng);
        fill_normal(net.tables.layer.as_slice_mut().expect("contiguous"), 1.0, rng);
        fill_normal(net.tables.position.as_slice_mut().expect("contiguous"), 1.0, rng);
        net.combiner = Linear::normal(cfg.hidden_dim, 3 * e, (1.0 / (3 * e) as f64).sqrt(), rng);
        for (head, shape) in net.head_a.iter_mut().zip(&shapes) {
            *head = Linear::normal(
                shape.d_out * cfg.rank,
                cfg.hidden_dim,
                cfg.head_a_init_std,
                rng,
            );
        }
        Ok(net)
    }

    /// All-zero parameters (also the shape of a gradient buffer).
    pub fn zeros(
        cfg: &HyperConfig,
        num_tasks: usize,
        num_layers: usize,
        shapes: [SiteShape; NUM_POSITIONS],
    ) -> Result<Self> {
        for (k, shape) in shapes.iter().enumerate() {
            let limit = shape.d_out.min(shape.d_in) / 2;
            if cfg.rank > limit {
                return Err(Error::config(
                    "rank",
                    format!(
                        "rank {} exceeds min(d_out, d_in) / 2 = {limit} at position {}",
                        cfg.rank,
                        k + 1
                    ),
                ));
            }
        }
        if num_tasks == 0 || num_layers == 0 {
            return Err(Error::config("fine_tuned_blocks", "need at least one task and one layer"));
        }
        let e = cfg.embed_dim;
        Ok(Self {
            tables: EmbeddingTables::zeros(num_tasks, num_layers, e),
            combiner: Linear::zeros(cfg.hidden_dim, 3 * e),
            head_a: [0, 1].map(|k| Linear::zeros(shapes[k].d_out * cfg.rank, cfg.hidden_dim)),
            head_b: [0, 1].map(|k| Linear::zeros(cfg.rank * shapes[k].d_in, cfg.hidden_dim)),
            rank: cfg.rank,
            activation: cfg.activation,
            shapes,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_tasks(&self) -> usize {
        self.tables.task.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.tables.layer.nrows()
    }

    pub fn site_shape(&self, position: usize) -> Option<SiteShape> {
        position
            .checked_sub(1)
            .and_then(|k| self.shapes.get(k))
            .copied()
    }

    fn check(&self, expert: usize, site: Site) -> Result<()> {
        if expert == 0 || expert > self.num_tasks() {
            return Err(Error::UnknownExpert(expert));
        }
        if site.layer >= self.num_layers() || !(1..=NUM_POSITIONS).contains(&site.position) {
            return Err(Error::UnknownSite {
                block: site.layer,
                position: site.position,
            });
        }
        Ok(())
    }

    fn code(&self, expert: usize, site: Site) -> Code {
        let input = concatenate(
            Axis(0),
            &[
                self.tables.task.row(expert - 1),
                self.tables.layer.row(site.layer),
                self.tables.position.row(site.position - 1),
            ],
        )
        .expect("equal embedding widths");
        let pre = self.combiner.forward_vec(input.view());
        let hidden = pre.mapv(|v| self.activation.apply(v));
        Code { input, pre, hidden }
    }

    /// Generates the adapter for `expert` (1-based) at `site`.
    pub fn generate_lora(&self, expert: usize, site: Site) -> Result<LoRAWeights> {
        self.check(expert, site)?;
        let code = self.code(expert, site);
        let k = site.position - 1;
        let shape = self.shapes[k];
        let a = self.head_a[k]
            .forward_vec(code.hidden.view())
            .into_shape_with_order((shape.d_out, self.rank))
            .expect("head_a width");
        let b = self.head_b[k]
            .forward_vec(code.hidden.view())
            .into_shape_with_order((self.rank, shape.d_in))
            .expect("head_b width");
        Ok(LoRAWeights { site, expert, a, b })
    }

    /// Back-propagates `dL/dA` and `dL/dB` for one generated pair into
    /// `grads`, which must be shaped like `self`.
    pub fn backward_lora(
        &self,
        expert: usize,
        site: Site,
        d_a: ArrayView2<'_, f64>,
        d_b: ArrayView2<'_, f64>,
        grads: &mut HyperNetwork,
    ) -> Result<()> {
        self.check(expert, site)?;
        let k = site.position - 1;
        let shape = self.shapes[k];
        if d_a.dim() != (shape.d_out, self.rank) || d_b.dim() != (self.rank, shape.d_in) {
            return Err(Error::Shape(format!(
                "adapter gradient shapes {:?}/{:?} do not match site {:?}",
                d_a.dim(),
                d_b.dim(),
                shape
            )));
        }
        let code = self.code(expert, site);
        // row-major flattening, matching the reshape in `generate_lora`
        let flat_a: Array1<f64> = d_a.iter().copied().collect();
        let flat_b: Array1<f64> = d_b.iter().copied().collect();
        let mut d_hidden = self.head_a[k].backward_vec(code.hidden.view(), flat_a.view(), &mut grads.head_a[k]);
        d_hidden += &self.head_b[k].backward_vec(code.hidden.view(), flat_b.view(), &mut grads.head_b[k]);
        let d_pre: Array1<f64> = d_hidden
            .iter()
            .zip(code.pre.iter())
            .map(|(g, &p)| g * self.activation.derivative(p))
            .collect();
        let d_input = self
            .combiner
            .backward_vec(code.input.view(), d_pre.view(), &mut grads.combiner);
        let e = self.tables.embed_dim();
        let mut row = grads.tables.task.row_mut(expert - 1);
        row += &d_input.slice(s![0..e]);
        let mut row = grads.tables.layer.row_mut(site.layer);
        row += &d_input.slice(s![e..2 * e]);
        let mut row = grads.tables.position.row_mut(site.position - 1);
        row += &d_input.slice(s![2 * e..3 * e]);
        Ok(())
    }

    pub fn is_embedding_tensor(name: &str) -> bool {
        matches!(name, "hyper.task" | "hyper.layer" | "hyper.position")
    }
}

impl ParamGroup for HyperNetwork {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            tref("hyper.task", &self.tables.task),
            tref("hyper.layer", &self.tables.layer),
            tref("hyper.position", &self.tables.position),
            tref("hyper.combiner.weight", &self.combiner.weight),
            tref1("hyper.combiner.bias", &self.combiner.bias),
        ];
        for k in 0..NUM_POSITIONS {
            out.push(tref(&format!("hyper.head_a{}.weight", k + 1), &self.head_a[k].weight));
            out.push(tref1(&format!("hyper.head_a{}.bias", k + 1), &self.head_a[k].bias));
            out.push(tref(&format!("hyper.head_b{}.weight", k + 1), &self.head_b[k].weight));
            out.push(tref1(&format!("hyper.head_b{}.bias", k + 1), &self.head_b[k].bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let [a1, a2] = &mut self.head_a;
        let [b1, b2] = &mut self.head_b;
        vec![
            tmut("hyper.task", &mut self.tables.task),
            tmut("hyper.layer", &mut self.tables.layer),
            tmut("hyper.position", &mut self.tables.position),
            tmut("hyper.combiner.weight", &mut self.combiner.weight),
            tmut1("hyper.combiner.bias", &mut self.combiner.bias),
            tmut("hyper.head_a1.weight", &mut a1.weight),
            tmut1("hyper.head_a1.bias", &mut a1.bias),
            tmut("hyper.head_b1.weight", &mut b1.weight),
            tmut1("hyper.head_b1.bias", &mut b1.bias),
            tmut("hyper.head_a2.weight", &mut a2.weight),
            tmut1("hyper.head_a2.bias", &mut a2.bias),
            tmut("hyper.head_b2.weight", &mut b2.weight),
            tmut1("hyper.head_b2.bias", &mut b2.bias),
        ]
    }
}

pub(crate) fn tref<'a>(name: &str, a: &'a Array2<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn tref1<'a>(name: &str, a: &'a Array1<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn tmut<'a>(name: &str, a: &'a mut Array2<f64>) -> TensorMut<'a> {
    TensorMut {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("standard layout"),
    }
}

pub(crate) fn tmut1<'a>(name: &str, a: &'a mut Array1<f64>) -> TensorMut<'a> {
    TensorMut {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("standard layout"),
    }
}

/// `x W^T + bias + scale * (x B^T) A^T` for a row batch `x` (`n x d_in`).
pub fn adapted_forward(
    x: ArrayView2<'_, f64>,
    weight: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
    lora: &LoRAWeights,
    scale: f64,
) -> Result<Array2<f64>> {
    let (d_out, d_in) = weight.dim();
    if x.ncols() != d_in
        || bias.len() != d_out
        || lora.a.nrows() != d_out
        || lora.b.ncols() != d_in
        || lora.a.ncols() != lora.b.nrows()
    {
        return Err(Error::Shape(format!(
            "x {:?}, W {:?}, bias {}, A {:?}, B {:?}",
            x.dim(),
            weight.dim(),
            bias.len(),
            lora.a.dim(),
            lora.b.dim()
        )));
    }
    let mut y = x.dot(&weight.t()) + bias;
    if scale != 0.0 {
        let low = x.dot(&lora.b.t());
        y.scaled_add(scale, &low.dot(&lora.a.t()));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(rng_seed: u64) -> HyperNetwork {
        let cfg = HyperConfig {
            embed_dim: 4,
            hidden_dim: 8,
            rank: 2,
            ..HyperConfig::default()
        };
        let shapes = [SiteShape { d_out: 24, d_in: 6 }, SiteShape { d_out: 6, d_in: 24 }];
        HyperNetwork::new(&cfg, 2, shapes, &mut ChaCha8Rng::seed_from_u64(rng_seed)).unwrap()
    }

    #[test]
    fn zero_head_b_gives_zero_b() {
        let net = toy(1);
        for expert in 1..=6 {
            for layer in 0..2 {
                for position in 1..=2 {
                    let l = net.generate_lora(expert, Site { layer, position }).unwrap();
                    assert!(l.b.iter().all(|&v| v == 0.0));
                    assert!(l.a.iter().any(|&v| v != 0.0));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_task_dependent() {
        let mut net = toy(2);
        fill_normal(
            net.head_b[0].weight.as_slice_mut().unwrap(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        let site = Site { layer: 1, position: 1 };
        let x = net.generate_lora(3, site).unwrap();
        let y = net.generate_lora(3, site).unwrap();
        assert_eq!(x, y);
        let t1 = net.generate_lora(1, site).unwrap();
        let t2 = net.generate_lora(2, site).unwrap();
        assert_ne!(t1.a, t2.a);
        assert_ne!(t1.b, t2.b);
    }

    #[test]
    fn out_of_range_indices_are_rejected() {
        let net = toy(1);
        let site = Site { layer: 0, position: 1 };
        assert_eq!(net.generate_lora(0, site).unwrap_err().kind(), "unknown-expert");
        assert_eq!(net.generate_lora(7, site).unwrap_err().kind(), "unknown-expert");
        let bad = Site { layer: 2, position: 1 };
        assert_eq!(net.generate_lora(1, bad).unwrap_err().kind(), "unknown-site");
        let bad = Site { layer: 0, position: 3 };
        assert_eq!(net.generate_lora(1, bad).unwrap_err().kind(), "unknown-site");
    }

    #[test]
    fn rank_limit_is_validated() {
        let cfg = HyperConfig {
            rank: 4,
            ..HyperConfig::default()
        };
        let shapes = [SiteShape { d_out: 24, d_in: 6 }, SiteShape { d_out: 6, d_in: 24 }];
        let err = HyperNetwork::zeros(&cfg, 6, 2, shapes).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn adapted_forward_hand_case() {
        let lora = LoRAWeights {
            site: Site { layer: 0, position: 1 },
            expert: 1,
            a: array![[1.0], [0.0]],
            b: array![[0.0, 1.0]],
        };
        let w = Array2::eye(2);
        let y = adapted_forward(array![[3.0, 5.0]].view(), w.view(), array![0.0, 0.0].view(), &lora, 1.0).unwrap();
        assert_eq!(y, array![[8.0, 5.0]]);
    }

    #[test]
    fn adapted_forward_rejects_bad_shapes() {
        let lora = LoRAWeights {
            site: Site { layer: 0, position: 1 },
            expert: 1,
            a: Array2::zeros((3, 1)),
            b: Array2::zeros((1, 2)),
        };
        let w = Array2::eye(2);
        let err = adapted_forward(array![[1.0, 2.0]].view(), w.view(), array![0.0, 0.0].view(), &lora, 1.0)
            .unwrap_err();
        assert_eq!(err.kind(), "shape");
    }

    #[test]
    fn adding_an_expert_adds_one_embedding_row() {
        let cfg = HyperConfig::default();
        let shapes = [SiteShape { d_out: 256, d_in: 64 }, SiteShape { d_out: 64, d_in: 256 }];
        let six = HyperNetwork::zeros(&cfg, 6, 4, shapes).unwrap().param_count();
        let seven = HyperNetwork::zeros(&cfg, 7, 4, shapes).unwrap().param_count();
        assert_eq!(seven - six, cfg.embed_dim);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = toy(5);
        fill_normal(
            net.head_b[1].weight.as_slice_mut().unwrap(),
            0.2,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let site = Site { layer: 1, position: 2 };
        let expert = 4;
        // loss = <G_a, A> + <G_b, B> with fixed random G
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ga = Array2::zeros((6, 2));
        fill_normal(ga.as_slice_mut().unwrap(), 1.0, &mut rng);
        let mut gb = Array2::zeros((2, 24));
        fill_normal(gb.as_slice_mut().unwrap(), 1.0, &mut rng);
        let loss = |n: &HyperNetwork| {
            let l = n.generate_lora(expert, site).unwrap();
            (&l.a * &ga).sum() + (&l.b * &gb).sum()
        };
        let mut grads = net.zeros_like();
        net.backward_lora(expert, site, ga.view(), gb.view(), &mut grads).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
        let mut idx = 0;
        let h = 1e-5;
        let n_tensors = net.tensors().len();
        for ti in 0..n_tensors {
            let len = net.tensors()[ti].data.len();
            for j in 0..len {
                let orig = net.tensors()[ti].data[j];
                net.tensors_mut()[ti].data[j] = orig + h;
                let lp = loss(&net);
                net.tensors_mut()[ti].data[j] = orig - h;
                let lm = loss(&net);
                net.tensors_mut()[ti].data[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[idx];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                    "tensor {ti} coord {j}: fd {fd} analytic {a}"
                );
                idx += 1;
            }
        }
    }
}
