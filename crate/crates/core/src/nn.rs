//! Dense layers with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

/// `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Weights drawn from `N(0, std^2)`, zero bias.
    pub fn normal<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, std: f64, rng: &mut R) -> Self {
        let mut lin = Self::zeros(out_dim, in_dim);
        fill_normal(lin.weight.as_slice_mut().expect("contiguous"), std, rng);
        lin
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-batched forward: `x` is `n x in`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients for a single-vector forward and
    /// returns the input gradient.
    pub fn backward_vec(
        &self,
        x: ArrayView1<'_, f64>,
        dy: ArrayView1<'_, f64>,
        grad: &mut Linear,
    ) -> Array1<f64> {
        outer_add(&mut grad.weight, dy, x);
        grad.bias += &dy;
        self.weight.t().dot(&dy)
    }
}

pub fn fill_normal<R: Rng + ?Sized>(data: &mut [f64], std: f64, rng: &mut R) {
    if std == 0.0 {
        data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let dist = Normal::new(0.0, std).expect("positive std");
    data.iter_mut().for_each(|v| *v = dist.sample(rng));
}

/// `m += a b^T`
pub fn outer_add(m: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let ai = a[i];
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LN_EPS).sqrt();
            let inv = *s;
            row.mapv_inplace(|v| v * inv);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    /// Input gradient only; the affine parameters are frozen.
    pub fn backward(&self, dy: ArrayView2<'_, f64>, cache: &LayerNormCache) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &s) in dx
            .axis_iter_mut(Axis(0))
            .zip(dxhat.axis_iter(Axis(0)))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = s / d * (d * gi - sum_g - xi * sum_gx);
            }
        }
        dx
    }
}

/// Pointwise nonlinearity used by the hypernetwork combiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Purely affine combiner.
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `x * sigmoid(1.702 x)`, the GELU approximation used in CLIP's MLPs.
pub fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

pub fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + 1.702 * x * s * (1.0 - s)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax, in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let ln = LayerNorm {
            gamma: array![1.5, -0.5, 2.0, 0.7],
            beta: array![0.1, 0.2, -0.3, 0.0],
        };
        let x = array![[0.3, -1.2, 2.2, 0.5], [1.0, 0.9, -0.4, 0.05]];
        let w = array![[0.2, -1.0, 0.5, 1.3], [0.7, 0.1, -0.2, 0.4]];
        let loss = |x: &Array2<f64>| (ln.forward(x.view()).0 * &w).sum();
        let (_, cache) = ln.forward(x.view());
        let dx = ln.backward(w.view(), &cache);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (quick_gelu(x + 1e-6) - quick_gelu(x - 1e-6)) / 2e-6;
            assert!((fd - quick_gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_and_in_range() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
