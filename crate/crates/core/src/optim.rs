//! Adam over the trainable parameters.

use crate::error::{Error, Result};
use crate::model::Trainable;
use crate::tensors::{ParamGroup, TensorStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Trainable,
    v: Trainable,
}

impl Adam {
    pub fn new(params: &Trainable, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Tensors for which `frozen(name)` holds are
    /// left untouched and keep zero moments.
    pub fn step(&mut self, params: &mut Trainable, grads: &Trainable, frozen: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let p_all = params.tensors_mut();
        let g_all = grads.tensors();
        let m_all = self.m.tensors_mut();
        let v_all = self.v.tensors_mut();
        for (((p, g), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
            if frozen(&p.name) {
                continue;
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::default();
        store.insert("adam.step".into(), vec![1], vec![self.step as f64]);
        store.insert("adam.hyper".into(), vec![4], vec![self.lr, self.beta1, self.beta2, self.eps]);
        for (prefix, group) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for t in group.tensors() {
                store.insert(format!("{prefix}{}", t.name), t.shape.clone(), t.data.to_vec());
            }
        }
        store
    }

    /// Restores moments saved by [`Adam::to_store`] for parameters shaped like `params`.
    pub fn from_store(params: &Trainable, store: &TensorStore) -> Result<Self> {
        let missing = |name: &str| Error::Checkpoint(format!("optimizer state lacks `{name}`"));
        let step = store.get("adam.step").ok_or_else(|| missing("adam.step"))?.1[0] as u64;
        let hyper = &store.get("adam.hyper").ok_or_else(|| missing("adam.hyper"))?.1;
        if hyper.len() != 4 {
            return Err(Error::Checkpoint("malformed adam.hyper".into()));
        }
        let mut opt = Adam::new(params, hyper[0]);
        opt.beta1 = hyper[1];
        opt.beta2 = hyper[2];
        opt.eps = hyper[3];
        opt.step = step;
        for (prefix, group) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
            for t in group.tensors_mut() {
                let key = format!("{prefix}{}", t.name);
                let (shape, data) = store.get(&key).ok_or_else(|| missing(&key))?;
                if *shape != t.shape {
                    return Err(Error::Checkpoint(format!("`{key}` has shape {shape:?}, expected {:?}", t.shape)));
                }
                t.data.copy_from_slice(data);
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ClassificationHead;
    use crate::hyperlora::{HyperConfig, HyperNetwork, SiteShape};
    use ndarray::array;

    fn params() -> Trainable {
        let cfg = HyperConfig {
            embed_dim: 2,
            hidden_dim: 3,
            rank: 1,
            ..HyperConfig::default()
        };
        let shapes = [SiteShape { d_out: 4, d_in: 2 }, SiteShape { d_out: 2, d_in: 4 }];
        Trainable {
            hyper: HyperNetwork::zeros(&cfg, 6, 1, shapes).unwrap(),
            head: ClassificationHead {
                weight: array![1.0, -2.0],
                bias: array![0.5],
            },
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.head.weight = array![3.0, -0.01];
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &g, |_| false);
        assert!((p.head.weight[0] - 0.9).abs() < 1e-9);
        assert!((p.head.weight[1] - -1.9).abs() < 1e-6);
        assert_eq!(p.head.bias[0], 0.5);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.head.weight = array![1.0, 1.0];
        let mut opt = Adam::new(&p, 0.0);
        opt.step(&mut p, &g, |_| false);
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_tensors_are_skipped_and_state_round_trips() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.hyper.tables.task.fill(1.0);
        g.head.bias[0] = 1.0;
        let mut opt = Adam::new(&p, 0.01);
        opt.step(&mut p, &g, HyperNetwork::is_embedding_tensor);
        assert!(p.hyper.tables.task.iter().all(|&v| v == 0.0));
        assert!(p.head.bias[0] < 0.5);
        let back = Adam::from_store(&p, &opt.to_store()).unwrap();
        assert_eq!(back, opt);
    }
}
