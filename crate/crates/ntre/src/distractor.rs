//! Distractor-object elimination: mask algebra that carves the
//! distractor-object region out of the grid, the pooled distractor
//! prototype, and the multi-scale segmentation head producing the final
//! background- and distractor-free prediction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvVars};
use crate::tensor::FeatureMap;
use crate::types::{BinaryMask, ProbMap, Prototype};

/// Threshold a probability map at `tau`; ties (y = τ) map to 1.
pub fn binarize(y: &ProbMap, tau: f64) -> BinaryMask {
    BinaryMask {
        h: y.h(),
        w: y.w(),
        data: y.0.data.iter().map(|&v| u8::from(v >= tau)).collect(),
    }
}

/// Distractor-object mask: the complement of the union of the background
/// mask and the (initial) target mask.
pub fn distractor_mask(y_bg_bin: &BinaryMask, y_ini_bin: &BinaryMask) -> Result<BinaryMask> {
    Ok(y_bg_bin.union(y_ini_bin)?.complement())
}

/// Support-side distractor mask: same algebra with the support's ground
/// truth target mask in place of the initial prediction.
pub fn support_do_mask(m_s: &BinaryMask, y_bg_s_bin: &BinaryMask) -> Result<BinaryMask> {
    distractor_mask(y_bg_s_bin, m_s)
}

/// A pooled prototype that may be absent (its source mask was empty). The
/// embedding is the zero vector in that case; consumers skip absent
/// prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct DoPrototype {
    pub prototype: Prototype,
    pub absent: bool,
}

/// MAP over the distractor mask; an all-zero mask yields the zero prototype
/// flagged absent instead of an error.
pub fn distractor_prototype(x: &FeatureMap, y_do: &BinaryMask) -> Result<DoPrototype> {
    if x.h != y_do.h || x.w != y_do.w {
        return Err(Error::Shape(format!(
            "features {}x{} vs DO mask {}x{}",
            x.h, x.w, y_do.h, y_do.w
        )));
    }
    if y_do.is_all_zero() {
        return Ok(DoPrototype {
            prototype: Prototype::new(vec![0.0; x.c]),
            absent: true,
        });
    }
    Ok(DoPrototype {
        prototype: crate::matching::masked_average_pool(x, y_do)?,
        absent: false,
    })
}

/// Multi-scale segmentation head: a 1×1 fusion of the activated feature with
/// the expanded distractor prototype, an average-pool pyramid (each scale
/// followed by a 1×1 convolution and bilinear upsampling), concatenation,
/// two 3×3 convolutions, 1-channel sigmoid output.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub scales: Vec<usize>,
    pub fuse: Conv2d,
    pub pyramid: Vec<Conv2d>,
    pub out1: Conv2d,
    pub out2: Conv2d,
    /// Binarization threshold shared by every mask derivation.
    pub tau: f64,
}

impl SegHead {
    pub fn new(c: usize, hidden: usize, scales: &[usize], tau: f64, rng: &mut impl Rng) -> SegHead {
        assert!(!scales.is_empty());
        assert!(tau > 0.0 && tau < 1.0);
        let merged = c * (1 + scales.len());
        SegHead {
            scales: scales.to_vec(),
            fuse: Conv2d::kaiming(1, 1, 2 * c, c, rng),
            pyramid: scales.iter().map(|_| Conv2d::kaiming(1, 1, c, c, rng)).collect(),
            out1: Conv2d::kaiming(3, 3, merged, hidden, rng),
            out2: Conv2d::kaiming(3, 3, hidden, 1, rng),
            tau,
        }
    }

    /// Initialization mirroring [`crate::matching::MatchingHead::prior_passthrough`]:
    /// the fused map keeps the activated feature's channel 0 (which carries
    /// the prior at initialization), and the output head begins as a
    /// calibrated readout of it, so the final prediction starts where the
    /// initial prediction does.
    pub fn prior_passthrough(
        c: usize,
        hidden: usize,
        scales: &[usize],
        tau: f64,
        rng: &mut impl Rng,
    ) -> SegHead {
        let mut head = SegHead::new(c, hidden, scales, tau, rng);
        let merged = c * (1 + scales.len());
        head.fuse = Conv2d::gaussian(1, 1, 2 * c, c, 0.02, rng);
        for i in 0..c {
            head.fuse.w.data[i * c + i] = 1.0;
        }
        for conv in head.pyramid.iter_mut() {
            *conv = Conv2d::gaussian(1, 1, c, c, 0.02, rng);
        }
        let center = 4;
        head.out1 = Conv2d::gaussian(3, 3, merged, hidden, 0.03, rng);
        head.out1.w.data[(center * merged) * hidden] = 1.0;
        head.out2 = Conv2d::gaussian(3, 3, hidden, 1, 0.03, rng);
        head.out2.w.data[center * hidden] = crate::matching::PRIOR_GAIN;
        head.out2.b.data[0] = crate::matching::PRIOR_BIAS;
        head
    }

    pub fn vars(&self, g: &mut Graph) -> SegVars {
        SegVars {
            scales: self.scales.clone(),
            fuse: self.fuse.vars(g),
            pyramid: self.pyramid.iter().map(|l| l.vars(g)).collect(),
            out1: self.out1.vars(g),
            out2: self.out2.vars(g),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegVars {
    pub scales: Vec<usize>,
    pub fuse: ConvVars,
    pub pyramid: Vec<ConvVars>,
    pub out1: ConvVars,
    pub out2: ConvVars,
}

impl SegVars {
    /// Final prediction from the activated query feature and the distractor
    /// prototype (`p_do` is a 1×1×C vector var, zero when absent).
    pub fn final_prediction(&self, g: &mut Graph, x_act: Var, p_do: Var) -> Var {
        let v = g.value(x_act);
        let (h, w) = (v.h, v.w);
        let pdo_map = g.broadcast(p_do, h, w);
        let cat = g.concat_channels(&[x_act, pdo_map]);
        let fused = self.fuse.apply(g, cat);
        let fused = g.relu(fused);
        let mut branches = vec![fused];
        for (scale, conv) in self.scales.iter().zip(&self.pyramid) {
            let pooled = g.adaptive_avg_pool(fused, *scale, *scale);
            let projected = conv.apply(g, pooled);
            let up = g.bilinear_resize(projected, h, w);
            branches.push(up);
        }
        let merged = g.concat_channels(&branches);
        let a = self.out1.apply(g, merged);
        let a = g.relu(a);
        let logits = self.out2.apply(g, a);
        g.sigmoid(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{self, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prob(data: Vec<f64>, h: usize, w: usize) -> ProbMap {
        ProbMap::new(Tensor::from_vec(h, w, 1, data)).unwrap()
    }

    #[test]
    fn binarize_examples() {
        let y = prob(vec![0.4, 0.6], 1, 2);
        assert_eq!(binarize(&y, 0.5).data, vec![0, 1]);
        // Ties map to 1.
        let y = prob(vec![0.5, 0.499999], 1, 2);
        assert_eq!(binarize(&y, 0.5).data, vec![1, 0]);
        // Idempotence: re-thresholding a binarized map changes nothing.
        let y = prob(vec![0.1, 0.5, 0.9, 0.3], 2, 2);
        let once = binarize(&y, 0.5);
        let twice = binarize(&ProbMap::new(once.to_tensor()).unwrap(), 0.5);
        assert_eq!(once, twice);
    }

    #[test]
    fn distractor_mask_hand_examples() {
        let bg = BinaryMask::from_data(1, 4, vec![1, 0, 0, 0]).unwrap();
        let ini = BinaryMask::from_data(1, 4, vec![0, 1, 0, 0]).unwrap();
        assert_eq!(distractor_mask(&bg, &ini).unwrap().data, vec![0, 0, 1, 1]);

        // Union covering the grid leaves no distractor region.
        let bg = BinaryMask::from_data(1, 4, vec![1, 1, 0, 0]).unwrap();
        let ini = BinaryMask::from_data(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert!(distractor_mask(&bg, &ini).unwrap().is_all_zero());

        // Overlapping inputs still excluded everywhere they are set.
        let bg = BinaryMask::from_data(1, 4, vec![1, 1, 1, 0]).unwrap();
        let ini = BinaryMask::from_data(1, 4, vec![0, 1, 1, 0]).unwrap();
        let d = distractor_mask(&bg, &ini).unwrap();
        for i in 0..4 {
            assert!(!(d.data[i] == 1 && (bg.data[i] == 1 || ini.data[i] == 1)));
        }
    }

    #[test]
    fn mask_partition_is_exact_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let bg = BinaryMask::from_data(4, 4, (0..16).map(|_| u8::from(rng.gen_bool(0.5))).collect()).unwrap();
            let ini = BinaryMask::from_data(4, 4, (0..16).map(|_| u8::from(rng.gen_bool(0.5))).collect()).unwrap();
            let d = distractor_mask(&bg, &ini).unwrap();
            assert_eq!(d.intersection(&bg).unwrap().count_ones(), 0);
            assert_eq!(d.intersection(&ini).unwrap().count_ones(), 0);
            let all = d.union(&bg).unwrap().union(&ini).unwrap();
            assert_eq!(all.count_ones(), 16);
        }
    }

    #[test]
    fn distractor_mask_is_monotone_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let bg = BinaryMask::from_data(3, 3, (0..9).map(|_| u8::from(rng.gen_bool(0.4))).collect()).unwrap();
            let ini = BinaryMask::from_data(3, 3, (0..9).map(|_| u8::from(rng.gen_bool(0.4))).collect()).unwrap();
            let d0 = distractor_mask(&bg, &ini).unwrap();
            // Grow bg by one random pixel.
            let mut bigger = bg.clone();
            bigger.data[rng.gen_range(0..9)] = 1;
            let d1 = distractor_mask(&bigger, &ini).unwrap();
            for i in 0..9 {
                assert!(d1.data[i] <= d0.data[i]);
            }
        }
    }

    #[test]
    fn support_mask_shares_the_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let m_s = BinaryMask::from_data(3, 3, (0..9).map(|_| u8::from(rng.gen_bool(0.5))).collect()).unwrap();
            let bg = BinaryMask::from_data(3, 3, (0..9).map(|_| u8::from(rng.gen_bool(0.5))).collect()).unwrap();
            assert_eq!(
                support_do_mask(&m_s, &bg).unwrap(),
                distractor_mask(&bg, &m_s).unwrap()
            );
        }
        // M^s covering everything leaves nothing.
        let all = BinaryMask::ones(2, 2);
        let none = BinaryMask::zeros(2, 2);
        assert!(support_do_mask(&all, &none).unwrap().is_all_zero());
        // Disjoint halves: DO mask is the remaining half.
        let m_s = BinaryMask::from_data(1, 4, vec![1, 0, 0, 0]).unwrap();
        let bg = BinaryMask::from_data(1, 4, vec![0, 1, 0, 0]).unwrap();
        assert_eq!(support_do_mask(&m_s, &bg).unwrap().data, vec![0, 0, 1, 1]);
    }

    #[test]
    fn distractor_prototype_degenerate_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = Tensor::from_vec(4, 4, 3, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let empty = BinaryMask::zeros(4, 4);
        let p = distractor_prototype(&x, &empty).unwrap();
        assert!(p.absent);
        assert!(p.prototype.as_slice().iter().all(|&v| v == 0.0));

        let full = BinaryMask::ones(4, 4);
        let p = distractor_prototype(&x, &full).unwrap();
        assert!(!p.absent);
        for ch in 0..3 {
            let mean: f64 = (0..16).map(|i| x.data[i * 3 + ch]).sum::<f64>() / 16.0;
            assert!((p.prototype.as_slice()[ch] - mean).abs() < 1e-9);
        }

        // Convex-combination check: pooled value must equal the 1/|m|
        // weighting of the selected pixels.
        let m = BinaryMask::from_data(4, 4, (0..16).map(|i| u8::from(i % 5 == 0)).collect()).unwrap();
        let p = distractor_prototype(&x, &m).unwrap();
        let picked: Vec<usize> = (0..16).filter(|&i| m.data[i] == 1).collect();
        for ch in 0..3 {
            let want: f64 =
                picked.iter().map(|&i| x.data[i * 3 + ch]).sum::<f64>() / picked.len() as f64;
            assert!((p.prototype.as_slice()[ch] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn final_prediction_contract_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let c = 4;
        let mut head = SegHead::new(c, 5, &[1, 2, 4], 0.5, &mut rng);
        let x = Tensor::from_vec(8, 8, c, (0..8 * 8 * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let pdo = Tensor::vector(&[0.1, -0.2, 0.3, 0.4]);
        let run = |h: &SegHead| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let pv = g.constant(pdo.clone());
            let vars = h.vars(&mut g);
            let y = vars.final_prediction(&mut g, xv, pv);
            g.value(y).clone()
        };
        let y = run(&head);
        assert_eq!((y.h, y.w, y.c), (8, 8, 1));
        assert!(y.data.iter().all(|&v| (0.0..=1.0).contains(&v)));

        head.out2.w.data.fill(0.0);
        head.out2.b.data.fill(0.0);
        let y = run(&head);
        assert!(y.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn final_prediction_matches_naive_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let c = 3;
        let head = SegHead::new(c, 4, &[1, 2, 4], 0.5, &mut rng);
        let x = Tensor::from_vec(8, 8, c, (0..8 * 8 * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let pdo = Tensor::vector(&[0.5, -0.1, 0.2]);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = g.constant(pdo.clone());
        let vars = head.vars(&mut g);
        let yv = vars.final_prediction(&mut g, xv, pv);
        let got = g.value(yv).clone();

        // Straightforward reimplementation with the pure kernels.
        let pdo_map = tensor::broadcast_vector(&pdo, 8, 8);
        let cat = tensor::concat_channels(&[&x, &pdo_map]);
        let fused = head.fuse.forward(&cat).map(|v| v.max(0.0));
        let mut branches = vec![fused.clone()];
        for (scale, conv) in head.scales.iter().zip(&head.pyramid) {
            let pooled = tensor::adaptive_avg_pool(&fused, *scale, *scale);
            let proj = conv.forward(&pooled);
            branches.push(tensor::bilinear_resize(&proj, 8, 8));
        }
        let refs: Vec<&Tensor> = branches.iter().collect();
        let merged = tensor::concat_channels(&refs);
        let a = head.out1.forward(&merged).map(|v| v.max(0.0));
        let logits = head.out2.forward(&a);
        for (g_v, l) in got.data.iter().zip(&logits.data) {
            assert!((g_v - tensor::sigmoid(*l)).abs() < 1e-5);
        }
    }
}
