//! Frozen feature extractor and the prior confidence map.
//!
//! The extractor is a four-block convolutional encoder at overall stride 4.
//! It is either pretrained briefly as a base-class shape classifier and then
//! frozen, or (as a configuration fallback) frozen at its seeded random
//! initialization. Extraction is pure tensor math — no graph is built, so no
//! gradient can ever reach these weights during episodic training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::render_shape_crop;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Conv2d, SgdMomentum};
use crate::serial::{fnv1a, Reader, Writer};
use crate::tensor::{self, FeatureMap, Tensor};
use crate::types::{BinaryMask, ProbMap};

const BACKBONE_MAGIC: &[u8; 8] = b"NTREBKB\0";
const BACKBONE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output channel count C.
    pub feature_channels: usize,
    pub seed: u64,
    /// When false, the encoder stays at its seeded random initialization.
    pub pretrained: bool,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Side length of the pretraining crops.
    pub pretrain_crop: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            feature_channels: 64,
            seed: 0,
            pretrained: true,
            pretrain_steps: 240,
            pretrain_batch: 8,
            pretrain_lr: 0.05,
            pretrain_crop: 32,
        }
    }
}

impl BackboneConfig {
    pub fn canonical_string(&self, base_classes: &[usize], num_classes: usize) -> String {
        format!(
            "backbone c={} seed={} pretrained={} steps={} batch={} lr={} crop={} base={:?} nc={}",
            self.feature_channels,
            self.seed,
            self.pretrained,
            self.pretrain_steps,
            self.pretrain_batch,
            self.pretrain_lr,
            self.pretrain_crop,
            base_classes,
            num_classes
        )
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    convs: Vec<Conv2d>,
    /// Fixed calibration mean subtracted from every pixel feature before
    /// normalization; computed once at build time, frozen thereafter.
    center: Vec<f64>,
    pub feature_channels: usize,
    /// FNV-1a of the canonical config string this backbone was built under.
    pub config_hash: u64,
}

impl Backbone {
    fn architecture(c: usize, rng: &mut impl Rng) -> Vec<Conv2d> {
        let c1 = (c / 4).max(8);
        let c2 = (c / 2).max(16);
        vec![
            Conv2d::kaiming(3, 3, 3, c1, rng),
            Conv2d::kaiming(3, 3, c1, c2, rng),
            Conv2d::kaiming(3, 3, c2, c, rng),
            Conv2d::kaiming(3, 3, c, c, rng),
        ]
    }

    /// Build the encoder: seeded random init, then the short classification
    /// pretraining on base-class shape crops when configured.
    pub fn build(cfg: &BackboneConfig, base_classes: &[usize], num_classes: usize) -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb0b0);
        let mut convs = Self::architecture(cfg.feature_channels, &mut rng);
        let config_hash = fnv1a(&cfg.canonical_string(base_classes, num_classes));
        if cfg.pretrained && !base_classes.is_empty() {
            pretrain(&mut convs, cfg, base_classes, num_classes, &mut rng);
        }
        let mut backbone = Backbone {
            convs,
            center: vec![0.0; cfg.feature_channels],
            feature_channels: cfg.feature_channels,
            config_hash,
        };
        backbone.center = backbone.calibrate_center(cfg, base_classes, num_classes, &mut rng);
        backbone
    }

    /// Mean pixel feature over a small calibration batch of shape crops.
    /// Centering the features makes cosine similarities signed, which
    /// sharpens the prior confidence map's contrast.
    fn calibrate_center(
        &self,
        cfg: &BackboneConfig,
        base_classes: &[usize],
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        if base_classes.is_empty() {
            return vec![0.0; cfg.feature_channels];
        }
        let mut acc = vec![0.0; cfg.feature_channels];
        let mut count = 0.0;
        for i in 0..48 {
            let class = base_classes[i % base_classes.len()];
            let crop = render_shape_crop(class, num_classes, cfg.pretrain_crop, rng);
            let f = self
                .extract_raw(&crop.image)
                .expect("calibration crop is large enough");
            for px in 0..f.h * f.w {
                for ch in 0..f.c {
                    acc[ch] += f.data[px * f.c + ch];
                }
            }
            count += (f.h * f.w) as f64;
        }
        for a in acc.iter_mut() {
            *a /= count;
        }
        acc
    }

    /// Raw convolutional features before centering and normalization.
    fn extract_raw(&self, image: &Tensor) -> Result<FeatureMap> {
        if image.c != 3 {
            return Err(Error::Shape(format!("expected H×W×3 input, got {}", image.shape_str())));
        }
        if image.h < 8 || image.w < 8 {
            return Err(Error::Shape(format!(
                "input {}x{} below minimum stride support (8x8)",
                image.h, image.w
            )));
        }
        let mut x = self.convs[0].forward(image).map(|v| v.max(0.0));
        x = tensor::adaptive_avg_pool(&x, x.h / 2, x.w / 2);
        x = self.convs[1].forward(&x).map(|v| v.max(0.0));
        x = tensor::adaptive_avg_pool(&x, x.h / 2, x.w / 2);
        x = self.convs[2].forward(&x).map(|v| v.max(0.0));
        x = self.convs[3].forward(&x).map(|v| v.max(0.0));
        Ok(x)
    }

    /// Deterministic stride-4 feature extraction. Fails on inputs too small
    /// to survive two pooling stages.
    ///
    /// The raw activations are centered by the frozen calibration mean and
    /// then L2-normalized per pixel: the pipeline consumes feature
    /// directions (cosine matching), and bounded inputs keep the learned
    /// heads well-conditioned regardless of pretraining scale drift.
    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut x = self.extract_raw(image)?;
        for i in 0..x.h * x.w {
            let px = &mut x.data[i * x.c..(i + 1) * x.c];
            for (v, c) in px.iter_mut().zip(&self.center) {
                *v -= c;
            }
            let norm = px.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in px.iter_mut() {
                    *v /= norm;
                }
            }
        }
        Ok(x)
    }

    /// Flat view of every weight (including the calibration center), used
    /// to assert frozenness and for checkpoint embedding.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for conv in &self.convs {
            out.extend_from_slice(&conv.w.data);
            out.extend_from_slice(&conv.b.data);
        }
        out.extend_from_slice(&self.center);
        out
    }

    /// Overwrite every weight from a flat view (checkpoint restore).
    pub fn load_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expect: usize = self.convs.iter().map(|c| c.w.len() + c.b.len()).sum::<usize>()
            + self.center.len();
        if flat.len() != expect {
            return Err(Error::Checkpoint(format!(
                "backbone parameter count {} != expected {expect}",
                flat.len()
            )));
        }
        let mut off = 0;
        for conv in &mut self.convs {
            for t in [&mut conv.w, &mut conv.b] {
                let n = t.data.len();
                t.data.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        self.center.copy_from_slice(&flat[off..]);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(BACKBONE_MAGIC, BACKBONE_VERSION);
        w.u64(self.config_hash);
        w.u64(self.feature_channels as u64);
        w.f64_slice(&self.center);
        w.u64(self.convs.len() as u64);
        for conv in &self.convs {
            w.u64(conv.kh as u64);
            w.u64(conv.kw as u64);
            w.tensor(&conv.w);
            w.tensor(&conv.b);
        }
        w.save(path)
    }

    /// Load a backbone file, refusing on config-hash mismatch.
    pub fn load(path: &Path, expected_hash: u64) -> Result<Backbone> {
        let mut r = Reader::open(path, BACKBONE_MAGIC, BACKBONE_VERSION)?;
        let config_hash = r.u64()?;
        if config_hash != expected_hash {
            return Err(Error::Checkpoint(format!(
                "{}: backbone config hash {:016x} does not match expected {:016x}",
                path.display(),
                config_hash,
                expected_hash
            )));
        }
        let feature_channels = r.u64()? as usize;
        let center = r.f64_slice()?;
        let n = r.u64()? as usize;
        let mut convs = Vec::with_capacity(n);
        for _ in 0..n {
            let kh = r.u64()? as usize;
            let kw = r.u64()? as usize;
            let w = r.tensor()?;
            let b = r.tensor()?;
            convs.push(Conv2d { w, b, kh, kw });
        }
        Ok(Backbone {
            convs,
            center,
            feature_channels,
            config_hash,
        })
    }
}

/// Short supervised pretraining: classify single-shape crops of the base
/// classes, global-average-pool head, SGD with momentum. The classifier head
/// is discarded afterwards.
fn pretrain(
    convs: &mut [Conv2d],
    cfg: &BackboneConfig,
    base_classes: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    let c = cfg.feature_channels;
    let mut head = Conv2d::gaussian(1, 1, c, base_classes.len(), 0.01, rng);
    let sizes: Vec<usize> = convs
        .iter()
        .chain(std::iter::once(&head))
        .flat_map(|l| [l.w.len(), l.b.len()])
        .collect();
    let mut opt = SgdMomentum::new(0.9, 1e-4, &sizes);

    for step in 0..cfg.pretrain_steps {
        let mut grad_acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for _ in 0..cfg.pretrain_batch {
            let label = rng.gen_range(0..base_classes.len());
            let crop = render_shape_crop(base_classes[label], num_classes, cfg.pretrain_crop, rng);

            let mut g = Graph::new();
            let vars: Vec<_> = convs
                .iter()
                .chain(std::iter::once(&head))
                .map(|l| l.vars(&mut g))
                .collect();
            let img = g.constant(crop.image);
            let mut x = vars[0].apply(&mut g, img);
            x = g.relu(x);
            let v = g.value(x);
            let (h2, w2) = (v.h / 2, v.w / 2);
            x = g.adaptive_avg_pool(x, h2, w2);
            x = vars[1].apply(&mut g, x);
            x = g.relu(x);
            let v = g.value(x);
            let (h4, w4) = (v.h / 2, v.w / 2);
            x = g.adaptive_avg_pool(x, h4, w4);
            x = vars[2].apply(&mut g, x);
            x = g.relu(x);
            x = vars[3].apply(&mut g, x);
            x = g.relu(x);
            x = g.adaptive_avg_pool(x, 1, 1);
            let logits = vars[4].apply(&mut g, x);
            let loss = g.softmax_cross_entropy(logits, label);

            let grads = g.backward(loss);
            for (i, lv) in vars.iter().enumerate() {
                if let Some(gw) = grads.get(lv.w) {
                    for (a, b) in grad_acc[2 * i].iter_mut().zip(&gw.data) {
                        *a += b;
                    }
                }
                if let Some(gb) = grads.get(lv.b) {
                    for (a, b) in grad_acc[2 * i + 1].iter_mut().zip(&gb.data) {
                        *a += b;
                    }
                }
            }
        }
        let inv = 1.0 / cfg.pretrain_batch as f64;
        for g in grad_acc.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        let lr = cfg.pretrain_lr * (1.0 - step as f64 / cfg.pretrain_steps as f64);
        let mut params: Vec<&mut Tensor> = Vec::new();
        for l in convs.iter_mut() {
            params.push(&mut l.w);
            params.push(&mut l.b);
        }
        params.push(&mut head.w);
        params.push(&mut head.b);
        opt.step(lr, &mut params, &grad_acc);
    }
}

/// Prior confidence map: per query pixel, the maximum cosine similarity to
/// any masked support pixel, then min-max normalized to [0,1] (a constant
/// map becomes all ones). The mask must be at feature resolution.
pub fn prior_confidence_map(
    query: &FeatureMap,
    support: &FeatureMap,
    support_mask: &BinaryMask,
) -> Result<ProbMap> {
    if query.c != support.c {
        return Err(Error::Shape(format!(
            "query channels {} != support channels {}",
            query.c, support.c
        )));
    }
    tensor::check_same_spatial(support, support_mask.h, support_mask.w, "prior map mask")?;
    if support_mask.is_all_zero() {
        return Err(Error::EmptyMask("prior confidence map support mask"));
    }
    let fg: Vec<usize> = (0..support_mask.h * support_mask.w)
        .filter(|&i| support_mask.data[i] == 1)
        .collect();
    let mut raw = Tensor::zeros(query.h, query.w, 1);
    for i in 0..query.h * query.w {
        let qi = &query.data[i * query.c..(i + 1) * query.c];
        let mut best = f64::NEG_INFINITY;
        for &j in &fg {
            let sj = &support.data[j * support.c..(j + 1) * support.c];
            let c = tensor::cosine(qi, sj);
            if c > best {
                best = c;
            }
        }
        raw.data[i] = best;
    }
    ProbMap::new(tensor::min_max_normalize(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_backbone(c: usize) -> Backbone {
        let cfg = BackboneConfig {
            feature_channels: c,
            pretrained: false,
            ..BackboneConfig::default()
        };
        Backbone::build(&cfg, &[], 6)
    }

    #[test]
    fn stride_4_shape_contract() {
        let bb = random_backbone(16);
        let img = Tensor::zeros(64, 64, 3);
        let f = bb.extract_features(&img).unwrap();
        assert_eq!((f.h, f.w, f.c), (16, 16, 16));
    }

    #[test]
    fn tiny_inputs_rejected() {
        let bb = random_backbone(16);
        assert!(bb.extract_features(&Tensor::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let bb = random_backbone(16);
        let img = Tensor::from_vec(
            32,
            32,
            3,
            (0..32 * 32 * 3).map(|i| ((i * 37) % 255) as f64 / 255.0).collect(),
        );
        let a = bb.extract_features(&img).unwrap();
        let b = bb.extract_features(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_deltas_are_local_to_an_edit() {
        // Edit a small block of the input; features further than the
        // receptive-field radius from the block must be unchanged. The
        // encoder stacks 3x3 convs around two /2 pools, for a receptive
        // field of 26 source pixels, i.e. a 7-cell radius at stride 4
        // including the pooling offset.
        let bb = random_backbone(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut base = Tensor::zeros(64, 64, 3);
        for v in base.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut edited = base.clone();
        for y in 8..16 {
            for x in 40..48 {
                for ch in 0..3 {
                    *edited.at_mut(y, x, ch) = 1.0 - edited.at(y, x, ch);
                }
            }
        }
        let fa = bb.extract_features(&base).unwrap();
        let fb = bb.extract_features(&edited).unwrap();
        // Sliding-window oracle: per feature cell, the max |delta| across
        // channels, compared against the cell's distance to the edited box.
        let edit_cells_y = 2..=3usize; // rows 8..16 at stride 4
        let edit_cells_x = 10..=11usize;
        let radius = 7usize;
        let mut far_delta: f64 = 0.0;
        let mut near_delta: f64 = 0.0;
        for cy in 0..16 {
            for cx in 0..16 {
                let dy = if cy < *edit_cells_y.start() {
                    edit_cells_y.start() - cy
                } else {
                    cy.saturating_sub(*edit_cells_y.end())
                };
                let dx = if cx < *edit_cells_x.start() {
                    edit_cells_x.start() - cx
                } else {
                    cx.saturating_sub(*edit_cells_x.end())
                };
                let mut d: f64 = 0.0;
                for ch in 0..16 {
                    d = d.max((fa.at(cy, cx, ch) - fb.at(cy, cx, ch)).abs());
                }
                if dy.max(dx) > radius {
                    far_delta = far_delta.max(d);
                } else {
                    near_delta = near_delta.max(d);
                }
            }
        }
        assert!(near_delta > 0.0, "edit must move nearby features");
        assert_eq!(far_delta, 0.0, "edit leaked outside the receptive field");
    }

    #[test]
    fn prior_map_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::from_vec(8, 8, 4, (0..8 * 8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let s = Tensor::from_vec(8, 8, 4, (0..8 * 8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mask = BinaryMask::from_data(
            8,
            8,
            (0..64).map(|_| u8::from(rng.gen_bool(0.4))).collect(),
        )
        .unwrap();
        if mask.is_all_zero() {
            return;
        }
        let got = prior_confidence_map(&q, &s, &mask).unwrap();

        // Brute-force oracle with its own cosine/max/normalize.
        let mut raw = vec![f64::NEG_INFINITY; 64];
        for (i, r) in raw.iter_mut().enumerate() {
            let (qy, qx) = (i / 8, i % 8);
            for sy in 0..8 {
                for sx in 0..8 {
                    if mask.at(sy, sx) == 0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    let mut nq = 0.0;
                    let mut ns = 0.0;
                    for ch in 0..4 {
                        dot += q.at(qy, qx, ch) * s.at(sy, sx, ch);
                        nq += q.at(qy, qx, ch) * q.at(qy, qx, ch);
                        ns += s.at(sy, sx, ch) * s.at(sy, sx, ch);
                    }
                    let c = if nq == 0.0 || ns == 0.0 {
                        0.0
                    } else {
                        dot / (nq.sqrt() * ns.sqrt())
                    };
                    if c > *r {
                        *r = c;
                    }
                }
            }
        }
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, &r) in raw.iter().enumerate() {
            let want = if hi - lo <= 0.0 { 1.0 } else { (r - lo) / (hi - lo) };
            assert!((got.0.data[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn prior_map_self_similarity_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = Tensor::from_vec(4, 4, 3, (0..48).map(|_| rng.gen_range(0.1..1.0)).collect());
        let m = BinaryMask::ones(4, 4);
        let p = prior_confidence_map(&q, &q, &m).unwrap();
        // Every pixel's best match is itself (cosine 1), the map is constant,
        // and the degenerate min-max rule yields all ones.
        assert!(p.0.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn prior_map_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = Tensor::from_vec(6, 6, 5, (0..180).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let s = Tensor::from_vec(6, 6, 5, (0..180).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mask = BinaryMask::from_data(6, 6, (0..36).map(|i| u8::from(i % 3 == 0)).collect()).unwrap();
        let a = prior_confidence_map(&q, &s, &mask).unwrap();
        let qs = q.map(|v| v * 37.5);
        let ss = s.map(|v| v * 0.004);
        let b = prior_confidence_map(&qs, &ss, &mask).unwrap();
        for (x, y) in a.0.data.iter().zip(&b.0.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn prior_map_empty_mask_is_error() {
        let q = Tensor::zeros(4, 4, 2);
        assert!(prior_confidence_map(&q, &q, &BinaryMask::zeros(4, 4)).is_err());
    }

    #[test]
    fn save_load_respects_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.bin");
        let bb = random_backbone(8);
        bb.save(&path).unwrap();
        let loaded = Backbone::load(&path, bb.config_hash).unwrap();
        assert_eq!(loaded.params_flat(), bb.params_flat());
        assert!(Backbone::load(&path, bb.config_hash ^ 1).is_err());
    }
}
