//! Small layer helpers shared by the backbone and the pipeline heads: a
//! convolution parameter bundle usable both as pure inference and as graph
//! nodes, plus SGD with momentum and weight decay.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2d {
    /// He-style Gaussian init for a conv followed by a ReLU.
    pub fn kaiming(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Conv2d {
        let std = (2.0 / (kh * kw * cin) as f64).sqrt();
        Conv2d::gaussian(kh, kw, cin, cout, std, rng)
    }

    pub fn gaussian(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Conv2d {
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Tensor::from_vec(
            kh * kw,
            cin,
            cout,
            (0..kh * kw * cin * cout)
                .map(|_| normal.sample(rng))
                .collect(),
        );
        Conv2d {
            w,
            b: Tensor::zeros(1, 1, cout),
            kh,
            kw,
        }
    }

    pub fn cin(&self) -> usize {
        self.w.w
    }

    pub fn cout(&self) -> usize {
        self.w.c
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        tensor::conv2d_same(x, &self.w, &self.b, self.kh, self.kw)
    }

    /// Insert this layer's parameters into a graph as trainable leaves.
    pub fn vars(&self, g: &mut Graph) -> ConvVars {
        ConvVars {
            w: g.param(self.w.clone()),
            b: g.param(self.b.clone()),
            kh: self.kh,
            kw: self.kw,
        }
    }

    /// Insert as frozen constants (no gradient).
    pub fn const_vars(&self, g: &mut Graph) -> ConvVars {
        ConvVars {
            w: g.constant(self.w.clone()),
            b: g.constant(self.b.clone()),
            kh: self.kh,
            kw: self.kw,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub kh: usize,
    pub kw: usize,
}

impl ConvVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.conv2d_same(x, self.w, self.b, self.kh, self.kw)
    }
}

/// SGD with momentum and decoupled-from-nothing weight decay (the classic
/// formulation: g ← ∇ + wd·p, v ← m·v + g, p ← p − lr·v).
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64, param_sizes: &[usize]) -> SgdMomentum {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.velocity.len()
    }

    /// Apply one step. `params` and `grads` must align with the sizes the
    /// optimizer was built with.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for i in 0..p.data.len() {
                let grad = g[i] + self.weight_decay * p.data[i];
                v[i] = self.momentum * v[i] + grad;
                p.data[i] -= lr * v[i];
            }
        }
    }

    pub fn velocity_flat(&self) -> Vec<f64> {
        self.velocity.iter().flatten().copied().collect()
    }

    pub fn load_velocity_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for v in self.velocity.iter_mut() {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_matches_hand_computation() {
        // One parameter, two steps, momentum 0.9, wd 0.
        let mut p = Tensor::scalar(1.0);
        let mut opt = SgdMomentum::new(0.9, 0.0, &[1]);
        opt.step(0.1, &mut [&mut p], &[vec![2.0]]);
        assert!((p.data[0] - 0.8).abs() < 1e-12); // v=2, p=1-0.2
        opt.step(0.1, &mut [&mut p], &[vec![1.0]]);
        // v = 0.9*2 + 1 = 2.8, p = 0.8 - 0.28 = 0.52
        assert!((p.data[0] - 0.52).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let mut p = Tensor::scalar(2.0);
        let mut opt = SgdMomentum::new(0.0, 0.5, &[1]);
        opt.step(0.1, &mut [&mut p], &[vec![0.0]]);
        // g = 0 + 0.5*2 = 1, p = 2 - 0.1 = 1.9
        assert!((p.data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn conv_layer_graph_and_pure_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Conv2d::kaiming(3, 3, 4, 5, &mut rng);
        let x = Tensor::from_vec(
            6,
            6,
            4,
            (0..6 * 6 * 4).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let pure = layer.forward(&x);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let lv = layer.vars(&mut g);
        let yv = lv.apply(&mut g, xv);
        assert_eq!(g.value(yv), &pure);
    }
}
