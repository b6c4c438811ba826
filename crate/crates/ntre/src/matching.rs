//! Support feature matching: masked average pooling, k-shot prototype
//! fusion, query activation against the support prototype and prior map, and
//! the initial target prediction head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvVars};
use crate::tensor::FeatureMap;
use crate::types::{BinaryMask, Prototype};

/// Masked average pooling: prototype(c) = Σ_i X(i,c)·m(i) / Σ_i m(i).
/// Fails on an empty mask.
pub fn masked_average_pool(x: &FeatureMap, mask: &BinaryMask) -> Result<Prototype> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pooled = g.masked_avg_pool(xv, mask)?;
    Ok(Prototype::new(g.value(pooled).data.clone()))
}

/// Element-wise mean of equally sized prototypes.
pub fn fuse_k_shot(prototypes: &[Prototype]) -> Result<Prototype> {
    if prototypes.is_empty() {
        return Err(Error::Shape("cannot fuse an empty prototype list".into()));
    }
    let len = prototypes[0].len();
    if prototypes.iter().any(|p| p.len() != len) {
        return Err(Error::Shape("prototype lengths differ".into()));
    }
    let mut out = vec![0.0; len];
    for p in prototypes {
        for (o, v) in out.iter_mut().zip(p.as_slice()) {
            *o += v;
        }
    }
    let inv = 1.0 / prototypes.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(Prototype::new(out))
}

/// Learnable matching state: the 1×1 activation projection over
/// (features ⊕ expanded support prototype ⊕ prior map) and the two-layer
/// 3×3 initial-prediction head.
#[derive(Debug, Clone)]
pub struct MatchingHead {
    pub act_proj: Conv2d,
    pub head1: Conv2d,
    pub head2: Conv2d,
}

/// Logit gain/bias wiring the prior map through freshly initialized heads:
/// logit ≈ gain·prior + bias, neutral around prior ≈ 0.7.
pub(crate) const PRIOR_GAIN: f64 = 4.0;
pub(crate) const PRIOR_BIAS: f64 = -2.8;

impl MatchingHead {
    pub fn new(c: usize, hidden: usize, rng: &mut impl Rng) -> MatchingHead {
        MatchingHead {
            act_proj: Conv2d::kaiming(1, 1, c + c + 1, c, rng),
            head1: Conv2d::kaiming(3, 3, c, hidden, rng),
            head2: Conv2d::kaiming(3, 3, hidden, 1, rng),
        }
    }

    /// Initialization that starts the pipeline at the prior-matching
    /// solution: channel 0 of the activated feature carries the prior map,
    /// and the prediction head begins as a calibrated readout of it. The
    /// remaining weights start as low-amplitude noise, so training can grow
    /// feature-driven refinements without first escaping a random basin.
    pub fn prior_passthrough(c: usize, hidden: usize, rng: &mut impl Rng) -> MatchingHead {
        let mut act_proj = Conv2d::gaussian(1, 1, c + c + 1, c, 0.02, rng);
        // Prior map (last input channel) → activated channel 0.
        act_proj.w.data[(2 * c) * c] = 1.0;
        // Features pass through on channels 1..C.
        for i in 1..c {
            act_proj.w.data[i * c + i] = 1.0;
        }
        let center = 4; // tap (1,1) of a 3×3 kernel
        let mut head1 = Conv2d::gaussian(3, 3, c, hidden, 0.03, rng);
        head1.w.data[(center * c) * hidden] = 1.0;
        let mut head2 = Conv2d::gaussian(3, 3, hidden, 1, 0.03, rng);
        head2.w.data[center * hidden] = PRIOR_GAIN;
        head2.b.data[0] = PRIOR_BIAS;
        MatchingHead {
            act_proj,
            head1,
            head2,
        }
    }

    pub fn vars(&self, g: &mut Graph) -> MatchingVars {
        MatchingVars {
            act_proj: self.act_proj.vars(g),
            head1: self.head1.vars(g),
            head2: self.head2.vars(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatchingVars {
    pub act_proj: ConvVars,
    pub head1: ConvVars,
    pub head2: ConvVars,
}

impl MatchingVars {
    /// Activated query feature: 1×1 projection over the concatenation of the
    /// (BG-filtered) query feature, the expanded support prototype and the
    /// prior confidence map.
    pub fn activate_query(&self, g: &mut Graph, x_bg_q: Var, p_s: Var, c_p: Var) -> Var {
        let v = g.value(x_bg_q);
        let (h, w) = (v.h, v.w);
        let ps_map = g.broadcast(p_s, h, w);
        let cat = g.concat_channels(&[x_bg_q, ps_map, c_p]);
        self.act_proj.apply(g, cat)
    }

    /// Initial target prediction: two 3×3 convolutions and a sigmoid.
    pub fn initial_prediction(&self, g: &mut Graph, x_act: Var) -> Var {
        let a = self.head1.apply(g, x_act);
        let a = g.relu(a);
        let logits = self.head2.apply(g, a);
        g.sigmoid(logits)
    }
}
