//! Background mining and elimination around a single learned general
//! background prototype: a shared two-layer 3×3 head predicts per-pixel
//! background probability for query and support, a mining loss supervises it
//! using only target-object ground truth, and a 1×1 projection filters
//! background information out of the query feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvVars};
use crate::tensor::{broadcast_vector, FeatureMap, Tensor};
use crate::types::{BinaryMask, Prototype};

#[derive(Debug, Clone, Copy)]
pub struct BgLossConfig {
    /// Weight of the regularizer that forces valid background regions.
    pub alpha: f64,
    /// Probability clamp applied before logs.
    pub epsilon: f64,
}

impl Default for BgLossConfig {
    fn default() -> Self {
        BgLossConfig {
            alpha: 1.0,
            epsilon: 1e-7,
        }
    }
}

impl BgLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be ≥ 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Learnable state: the background prototype (length D), the shared
/// prediction head, and the elimination projection.
#[derive(Debug, Clone)]
pub struct BackgroundUnit {
    /// P_BG, randomly initialized and learned on base classes.
    pub prototype: Tensor,
    pub head1: Conv2d,
    pub head2: Conv2d,
    pub proj: Conv2d,
}

impl BackgroundUnit {
    /// `c` is the feature channel count, `d` the prototype channel count
    /// (they may differ; concatenations carry c + d channels).
    pub fn new(c: usize, d: usize, hidden: usize, rng: &mut impl Rng) -> BackgroundUnit {
        BackgroundUnit {
            prototype: Conv2d::gaussian(1, 1, 1, d, 0.02, rng).w,
            head1: Conv2d::kaiming(3, 3, c + d, hidden, rng),
            head2: Conv2d::kaiming(3, 3, hidden, 1, rng),
            proj: Conv2d::kaiming(1, 1, c + d, c, rng),
        }
    }

    /// As [`BackgroundUnit::new`] but with the elimination projection set to
    /// [identity | low-amplitude noise]: elimination starts as a no-op on
    /// the query feature and learns what to subtract.
    pub fn identity_init(c: usize, d: usize, hidden: usize, rng: &mut impl Rng) -> BackgroundUnit {
        let mut unit = BackgroundUnit::new(c, d, hidden, rng);
        unit.proj = Conv2d::gaussian(1, 1, c + d, c, 0.02, rng);
        for i in 0..c {
            unit.proj.w.data[i * c + i] = 1.0;
        }
        unit
    }

    pub fn vars(&self, g: &mut Graph) -> BgVars {
        BgVars {
            prototype: g.param(self.prototype.clone()),
            head1: self.head1.vars(g),
            head2: self.head2.vars(g),
            proj: self.proj.vars(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BgVars {
    pub prototype: Var,
    pub head1: ConvVars,
    pub head2: ConvVars,
    pub proj: ConvVars,
}

impl BgVars {
    /// Background probability map: sigmoid of the shared two-layer 3×3 head
    /// over the feature map concatenated with the expanded prototype. The
    /// same weights serve query and support calls.
    pub fn predict_background(&self, g: &mut Graph, x: Var) -> Var {
        let v = g.value(x);
        let (h, w) = (v.h, v.w);
        let p = g.broadcast(self.prototype, h, w);
        let cat = g.concat_channels(&[x, p]);
        let a = self.head1.apply(g, cat);
        let a = g.relu(a);
        let logits = self.head2.apply(g, a);
        g.sigmoid(logits)
    }

    /// Background elimination: 1×1 projection of the feature map
    /// concatenated with the expanded prototype, back to C channels.
    pub fn eliminate_background(&self, g: &mut Graph, x: Var) -> Var {
        let v = g.value(x);
        let (h, w) = (v.h, v.w);
        let p = g.broadcast(self.prototype, h, w);
        let cat = g.concat_channels(&[x, p]);
        self.proj.apply(g, cat)
    }
}

/// Spatially broadcast a prototype to H×W (every pixel holds the embedding).
pub fn expand_prototype(p: &Prototype, height: usize, width: usize) -> FeatureMap {
    broadcast_vector(&Tensor::vector(p.as_slice()), height, width)
}

/// Mining loss for a background probability map given the target-object
/// mask; see [`Graph::bg_mining_loss`] for the formula.
pub fn background_mining_loss(
    y_bg: &crate::types::ProbMap,
    m: &BinaryMask,
    cfg: &BgLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut g = Graph::new();
    let y = g.constant(y_bg.0.clone());
    let loss = g.bg_mining_loss(y, m, cfg.alpha, cfg.epsilon)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{central_difference, relative_error};
    use crate::tensor::sigmoid;
    use crate::types::ProbMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prob_map(h: usize, w: usize, v: f64) -> ProbMap {
        ProbMap::new(Tensor::filled(h, w, 1, v)).unwrap()
    }

    #[test]
    fn expand_prototype_examples() {
        let p = Prototype::new(vec![1.0, 2.0, 3.0]);
        let m = expand_prototype(&p, 2, 2);
        assert_eq!((m.h, m.w, m.c), (2, 2, 3));
        for i in 0..4 {
            assert_eq!(&m.data[i * 3..(i + 1) * 3], &[1.0, 2.0, 3.0]);
        }
        // 1×1 expansion leaves the vector unchanged.
        let one = expand_prototype(&p, 1, 1);
        assert_eq!(one.data, vec![1.0, 2.0, 3.0]);
        // All-ones MAP over the expansion recovers the prototype exactly.
        let mut g = Graph::new();
        let mv = g.constant(m);
        let pooled = g.masked_avg_pool(mv, &BinaryMask::ones(2, 2)).unwrap();
        assert_eq!(g.value(pooled).data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zeroed_head_predicts_half_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut unit = BackgroundUnit::new(4, 6, 5, &mut rng);
        unit.head1.w.data.fill(0.0);
        unit.head1.b.data.fill(0.0);
        unit.head2.w.data.fill(0.0);
        unit.head2.b.data.fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(3, 3, 4, (0..36).map(|i| i as f64).collect()));
        let vars = unit.vars(&mut g);
        let y = vars.predict_background(&mut g, x);
        assert!(g.value(y).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn query_and_support_calls_share_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut unit = BackgroundUnit::new(3, 3, 4, &mut rng);
        let input = Tensor::from_vec(4, 4, 3, (0..48).map(|i| (i as f64 * 0.3).sin()).collect());

        let run = |u: &BackgroundUnit| {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let vars = u.vars(&mut g);
            // "Query" and "support" call sites use the same var set.
            let yq = vars.predict_background(&mut g, x);
            let ys = vars.predict_background(&mut g, x);
            (g.value(yq).clone(), g.value(ys).clone())
        };
        let (yq, ys) = run(&unit);
        assert_eq!(yq, ys);

        // Mutating the single parameter set moves both outputs identically.
        unit.head1.w.data[0] += 0.5;
        let (yq2, ys2) = run(&unit);
        assert_eq!(yq2, ys2);
        assert_ne!(yq, yq2);
    }

    #[test]
    fn predict_background_matches_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unit = BackgroundUnit::new(2, 3, 4, &mut rng);
        let x = Tensor::from_vec(8, 8, 2, (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = unit.vars(&mut g);
        let y = vars.predict_background(&mut g, xv);

        // Oracle: explicit concat, two nested-loop convolutions, relu,
        // sigmoid.
        let expanded = broadcast_vector(&unit.prototype, 8, 8);
        let cat = crate::tensor::concat_channels(&[&x, &expanded]);
        let a = unit.head1.forward(&cat).map(|v| v.max(0.0));
        let logits = unit.head2.forward(&a);
        for (got, l) in g.value(y).data.iter().zip(&logits.data) {
            assert!((got - sigmoid(*l)).abs() < 1e-6);
        }
    }

    #[test]
    fn mining_loss_closed_forms() {
        // y = 0.5 everywhere, any non-empty mask, α = 1 → 2·ln 2.
        let m = BinaryMask::from_data(2, 2, vec![1, 1, 0, 0]).unwrap();
        let cfg = BgLossConfig::default();
        let l = background_mining_loss(&prob_map(2, 2, 0.5), &m, &cfg).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);

        // Perfect background head on a 2×2 grid with 2 target pixels:
        // ŷ = ε on target pixels, 1−ε elsewhere. The regularizer still
        // penalizes the ε entries, giving ≈ −(1/2)·ln ε ≈ 8.059.
        let y = ProbMap::new(Tensor::from_vec(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0])).unwrap();
        let l = background_mining_loss(&y, &m, &cfg).unwrap();
        let eps: f64 = 1e-7;
        let expect = -(1.0f64 - eps).ln() - 0.25 * (2.0 * eps.ln() + 2.0 * (1.0 - eps).ln());
        assert!((l - expect).abs() < 1e-9);
        assert!((l - 8.059).abs() < 2e-3);

        // Claiming everything is background: first term dominates, ≈ 16.118.
        let l = background_mining_loss(&prob_map(2, 2, 1.0), &m, &cfg).unwrap();
        let expect = -eps.ln() - (1.0 - eps).ln();
        assert!((l - expect).abs() < 1e-9);
        assert!((l - 16.118).abs() < 2e-3);
    }

    #[test]
    fn mining_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = BinaryMask::from_data(3, 3, (0..9).map(|i| u8::from(i % 2 == 0)).collect()).unwrap();
        let y0 = Tensor::from_vec(3, 3, 1, (0..9).map(|_| rng.gen_range(0.05..0.95)).collect());
        let mut g = Graph::new();
        let y = g.param(y0.clone());
        let loss = g.bg_mining_loss(y, &m, 1.0, 1e-7).unwrap();
        let grads = g.backward(loss);
        let analytic = grads.get(y).unwrap();
        for i in 0..9 {
            let num = central_difference(
                |v| {
                    let mut y2 = y0.clone();
                    y2.data[i] = v;
                    let mut g2 = Graph::new();
                    let yv = g2.param(y2);
                    let l = g2.bg_mining_loss(yv, &m, 1.0, 1e-7).unwrap();
                    g2.scalar(l)
                },
                y0.data[i],
                1e-5,
            );
            assert!(relative_error(analytic.data[i], num) <= 1e-4);
        }
    }

    #[test]
    fn mining_loss_partial_signs() {
        // First term (α = 0): increasing in ŷ on target pixels, flat off
        // them. Second term alone (empty mask): decreasing everywhere.
        let y0 = Tensor::from_vec(2, 2, 1, vec![0.3, 0.6, 0.2, 0.8]);
        let m = BinaryMask::from_data(2, 2, vec![1, 0, 1, 0]).unwrap();
        let mut g = Graph::new();
        let y = g.param(y0.clone());
        let loss = g.bg_mining_loss(y, &m, 0.0, 1e-7).unwrap();
        let grads = g.backward(loss);
        let gy = grads.get(y).unwrap();
        assert!(gy.data[0] > 0.0 && gy.data[2] > 0.0);
        assert_eq!(gy.data[1], 0.0);
        assert_eq!(gy.data[3], 0.0);

        let empty = BinaryMask::zeros(2, 2);
        let mut g = Graph::new();
        let y = g.param(y0);
        let loss = g.bg_mining_loss(y, &empty, 1.0, 1e-7).unwrap();
        let grads = g.backward(loss);
        assert!(grads.get(y).unwrap().data.iter().all(|&v| v < 0.0));
    }

    #[test]
    fn all_zero_solution_loses_to_true_background() {
        // Predicting "no background anywhere" must cost more than the true
        // background indicator on any grid with non-trivial background.
        let m = BinaryMask::from_data(2, 2, vec![1, 0, 0, 0]).unwrap();
        let cfg = BgLossConfig::default();
        let all_zero = prob_map(2, 2, 0.0);
        let true_bg = ProbMap::new(Tensor::from_vec(2, 2, 1, vec![0.0, 1.0, 1.0, 1.0])).unwrap();
        let l_zero = background_mining_loss(&all_zero, &m, &cfg).unwrap();
        let l_true = background_mining_loss(&true_bg, &m, &cfg).unwrap();
        assert!(l_zero > l_true);
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let d = 2;
        let mut unit = BackgroundUnit::new(c, d, 4, &mut rng);
        // proj = [identity | zeros]: output channel co copies input channel
        // co and ignores the prototype channels.
        unit.proj.w.data.fill(0.0);
        unit.proj.b.data.fill(0.0);
        for ci in 0..c {
            unit.proj.w.data[ci * c + ci] = 1.0;
        }
        let x = Tensor::from_vec(4, 4, c, (0..48).map(|i| (i as f64 * 0.7).cos()).collect());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = unit.vars(&mut g);
        let out = vars.eliminate_background(&mut g, xv);
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn elimination_output_shape_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for d in [1usize, 4, 9] {
            let unit = BackgroundUnit::new(3, d, 4, &mut rng);
            let x = Tensor::from_vec(5, 4, 3, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let vars = unit.vars(&mut g);
            let out = vars.eliminate_background(&mut g, xv);
            let ov = g.value(out);
            assert_eq!((ov.h, ov.w, ov.c), (5, 4, 3));

            // Per-pixel matrix multiply oracle for the 1×1 conv.
            for y in 0..5 {
                for xx in 0..4 {
                    for co in 0..3 {
                        let mut acc = unit.proj.b.data[co];
                        for ci in 0..3 + d {
                            let inp = if ci < 3 {
                                x.at(y, xx, ci)
                            } else {
                                unit.prototype.data[ci - 3]
                            };
                            acc += inp * unit.proj.w.data[ci * 3 + co];
                        }
                        assert!((ov.at(y, xx, co) - acc).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn loss_config_validation() {
        assert!(BgLossConfig { alpha: -0.1, epsilon: 1e-7 }.validate().is_err());
        assert!(BgLossConfig { alpha: 1.0, epsilon: 0.5 }.validate().is_err());
        assert!(BgLossConfig { alpha: 0.0, epsilon: 1e-3 }.validate().is_ok());
    }
}
