//! Model composition and the full per-episode forward pass: feature
//! extraction, background mining/elimination, support matching, distractor
//! mining/elimination, contrastive prototypes and the three losses.

use rand::Rng;

use crate::backbone::{prior_confidence_map, Backbone};
use crate::bg::{BackgroundUnit, BgVars};
use crate::config::{AblationFlags, TrainConfig};
use crate::contrastive::{NegativePolicy, PrototypeBank, PrototypeOrigin};
use crate::data::Episode;
use crate::distractor::{
    binarize, distractor_mask, distractor_prototype, DoPrototype, SegHead, SegVars,
};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::matching::{fuse_k_shot, masked_average_pool, MatchingHead, MatchingVars};
use crate::tensor::Tensor;
use crate::types::{BinaryMask, ProbMap, Prototype};

/// All learnable pipeline parameters. Every unit is constructed regardless
/// of the ablation flags (so initialization is comparable across variants);
/// the flags decide which parameters enter the graph and the optimizer.
#[derive(Debug, Clone)]
pub struct Model {
    pub bg: BackgroundUnit,
    pub matching: MatchingHead,
    pub seg: SegHead,
    pub flags: AblationFlags,
}

impl Model {
    /// Fresh model. Heads start as a calibrated prior-map readout and the
    /// background elimination starts as an identity, so every ablation
    /// variant begins at the same support-matching solution.
    pub fn new(cfg: &TrainConfig, rng: &mut impl Rng) -> Model {
        let c = cfg.feature_channels;
        let d = cfg.bg_prototype_channels;
        let h = cfg.hidden_channels;
        Model {
            bg: BackgroundUnit::identity_init(c, d, h, rng),
            matching: MatchingHead::prior_passthrough(c, h, rng),
            seg: SegHead::prior_passthrough(c, h, &cfg.seg_scales, cfg.tau, rng),
            flags: cfg.flags,
        }
    }

    /// Parameters the optimizer owns under the active flags, in a fixed
    /// order. Disabled modules contribute none.
    pub fn active_params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if self.flags.bgem {
            out.push(&self.bg.prototype);
            for conv in [&self.bg.head1, &self.bg.head2, &self.bg.proj] {
                out.push(&conv.w);
                out.push(&conv.b);
            }
        }
        for conv in [&self.matching.act_proj, &self.matching.head1, &self.matching.head2] {
            out.push(&conv.w);
            out.push(&conv.b);
        }
        if self.flags.doem {
            out.push(&self.seg.fuse.w);
            out.push(&self.seg.fuse.b);
            for conv in &self.seg.pyramid {
                out.push(&conv.w);
                out.push(&conv.b);
            }
            for conv in [&self.seg.out1, &self.seg.out2] {
                out.push(&conv.w);
                out.push(&conv.b);
            }
        }
        out
    }

    pub fn active_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if self.flags.bgem {
            out.push(&mut self.bg.prototype);
            for conv in [&mut self.bg.head1, &mut self.bg.head2, &mut self.bg.proj] {
                out.push(&mut conv.w);
                out.push(&mut conv.b);
            }
        }
        for conv in [
            &mut self.matching.act_proj,
            &mut self.matching.head1,
            &mut self.matching.head2,
        ] {
            out.push(&mut conv.w);
            out.push(&mut conv.b);
        }
        if self.flags.doem {
            out.push(&mut self.seg.fuse.w);
            out.push(&mut self.seg.fuse.b);
            for conv in &mut self.seg.pyramid {
                out.push(&mut conv.w);
                out.push(&mut conv.b);
            }
            for conv in [&mut self.seg.out1, &mut self.seg.out2] {
                out.push(&mut conv.w);
                out.push(&mut conv.b);
            }
        }
        out
    }

    /// Every parameter regardless of flags (checkpoint layout).
    pub fn all_params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.bg.prototype];
        for conv in [
            &self.bg.head1,
            &self.bg.head2,
            &self.bg.proj,
            &self.matching.act_proj,
            &self.matching.head1,
            &self.matching.head2,
            &self.seg.fuse,
        ] {
            out.push(&conv.w);
            out.push(&conv.b);
        }
        for conv in &self.seg.pyramid {
            out.push(&conv.w);
            out.push(&conv.b);
        }
        for conv in [&self.seg.out1, &self.seg.out2] {
            out.push(&conv.w);
            out.push(&conv.b);
        }
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.bg.prototype];
        for conv in [
            &mut self.bg.head1,
            &mut self.bg.head2,
            &mut self.bg.proj,
            &mut self.matching.act_proj,
            &mut self.matching.head1,
            &mut self.matching.head2,
            &mut self.seg.fuse,
        ] {
            out.push(&mut conv.w);
            out.push(&mut conv.b);
        }
        for conv in &mut self.seg.pyramid {
            out.push(&mut conv.w);
            out.push(&mut conv.b);
        }
        for conv in [&mut self.seg.out1, &mut self.seg.out2] {
            out.push(&mut conv.w);
            out.push(&mut conv.b);
        }
        out
    }

    pub fn active_param_count(&self) -> usize {
        self.active_params().iter().map(|t| t.len()).sum()
    }

    fn vars(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            bg: if self.flags.bgem {
                Some(self.bg.vars(g))
            } else {
                None
            },
            matching: self.matching.vars(g),
            seg: if self.flags.doem {
                Some(self.seg.vars(g))
            } else {
                None
            },
        }
    }
}

pub struct ModelVars {
    pub bg: Option<BgVars>,
    pub matching: MatchingVars,
    pub seg: Option<SegVars>,
}

impl ModelVars {
    /// Vars aligned with [`Model::active_params`].
    pub fn active_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(bg) = &self.bg {
            out.push(bg.prototype);
            for conv in [&bg.head1, &bg.head2, &bg.proj] {
                out.push(conv.w);
                out.push(conv.b);
            }
        }
        for conv in [
            &self.matching.act_proj,
            &self.matching.head1,
            &self.matching.head2,
        ] {
            out.push(conv.w);
            out.push(conv.b);
        }
        if let Some(seg) = &self.seg {
            out.push(seg.fuse.w);
            out.push(seg.fuse.b);
            for conv in &seg.pyramid {
                out.push(conv.w);
                out.push(conv.b);
            }
            for conv in [&seg.out1, &seg.out2] {
                out.push(conv.w);
                out.push(conv.b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub target: f64,
    pub background: f64,
    pub contrastive: f64,
    pub total: f64,
    pub pcl_skipped: bool,
}

/// Prototypes computed during the forward pass (detached values).
#[derive(Debug, Clone)]
pub struct EpisodePrototypes {
    pub support: Prototype,
    pub query_target: Option<Prototype>,
    pub query_negative: Option<DoPrototype>,
    pub support_negatives: Vec<DoPrototype>,
}

/// Binary maps derived during distractor mining, at feature resolution.
#[derive(Debug, Clone)]
pub struct EpisodeMasks {
    pub bg_query: BinaryMask,
    pub initial_query: BinaryMask,
    pub distractor_query: BinaryMask,
}

pub struct EpisodeForward {
    pub graph: Graph,
    pub vars: ModelVars,
    /// Scalar var of the total loss (present when losses were computed).
    pub total: Option<Var>,
    pub losses: LossBreakdown,
    /// Final per-pixel probability at feature resolution (the distractor-free
    /// prediction when the distractor branch is active, otherwise the
    /// initial prediction).
    pub prediction: ProbMap,
    pub initial: ProbMap,
    pub bg_query: Option<ProbMap>,
    pub bg_supports: Vec<ProbMap>,
    pub masks: Option<EpisodeMasks>,
    pub prototypes: EpisodePrototypes,
    /// Candidates for the prototype bank: (class_id, origin, prototype).
    pub bank_candidates: Vec<(usize, PrototypeOrigin, DoPrototype)>,
}

fn probmap(t: Tensor) -> ProbMap {
    ProbMap::new(t).expect("sigmoid output is a probability map")
}

/// Negative-region mask on the query side under the active policy.
fn query_negative_mask(
    policy: NegativePolicy,
    y_do: &BinaryMask,
    y_bg_bin: &BinaryMask,
    y_ini_bin: &BinaryMask,
) -> BinaryMask {
    match policy {
        NegativePolicy::DistractorObjects => y_do.clone(),
        NegativePolicy::Background => y_bg_bin.clone(),
        NegativePolicy::NonTarget => y_ini_bin.complement(),
    }
}

/// Negative-region mask on a support image under the active policy.
fn support_negative_mask(
    policy: NegativePolicy,
    m_s: &BinaryMask,
    y_bg_s_bin: &BinaryMask,
) -> Result<BinaryMask> {
    Ok(match policy {
        NegativePolicy::DistractorObjects => crate::distractor::support_do_mask(m_s, y_bg_s_bin)?,
        NegativePolicy::Background => y_bg_s_bin.clone(),
        NegativePolicy::NonTarget => m_s.complement(),
    })
}

/// Run the full pipeline on one episode.
///
/// Dataflow: extract features → background prediction (query and supports)
/// → background elimination → support prototype + prior map → activation →
/// initial prediction → distractor mask and prototype → final prediction →
/// query target prototype (binarized final prediction, pooled over the
/// activated feature so gradients flow through the pooling but not the
/// threshold) → support distractor prototypes → losses.
///
/// With `compute_losses` off (evaluation), loss nodes and contrastive
/// machinery are skipped; the bank is never read or written here — pushing
/// candidates is the training loop's decision.
pub fn forward_episode(
    episode: &Episode,
    model: &Model,
    backbone: &Backbone,
    bank: &PrototypeBank,
    cfg: &TrainConfig,
    compute_losses: bool,
) -> Result<EpisodeForward> {
    let flags = model.flags;
    let k = episode.k();

    // Frozen feature extraction (pure; no graph, no gradient).
    let feat_q = backbone.extract_features(&episode.query.image)?;
    let (fh, fw) = (feat_q.h, feat_q.w);
    let mut feat_s = Vec::with_capacity(k);
    let mut mask_s = Vec::with_capacity(k);
    for s in &episode.support {
        feat_s.push(backbone.extract_features(&s.image)?);
        let m = s.mask.downsample_nearest(fh, fw);
        if m.is_all_zero() {
            return Err(crate::error::Error::EmptyMask(
                "support mask vanished at feature resolution",
            ));
        }
        mask_s.push(m);
    }
    let mask_q = episode.query.mask.downsample_nearest(fh, fw);

    let mut g = Graph::new();
    let vars = model.vars(&mut g);
    let feat_q_var = g.constant(feat_q.clone());
    let feat_s_vars: Vec<Var> = feat_s.iter().map(|f| g.constant(f.clone())).collect();

    // Background branch.
    let mut bg_query = None;
    let mut bg_supports = Vec::new();
    let mut bg_support_bins = Vec::new();
    let mut l_bg_var = None;
    let mut x_base = feat_q_var;
    if let Some(bgv) = &vars.bg {
        let y_bg_q = bgv.predict_background(&mut g, feat_q_var);
        bg_query = Some(probmap(g.value(y_bg_q).clone()));
        let mut per_map_losses = vec![];
        if compute_losses {
            per_map_losses.push(g.bg_mining_loss(y_bg_q, &mask_q, cfg.alpha, cfg.epsilon)?);
        }
        for (fsv, ms) in feat_s_vars.iter().zip(&mask_s) {
            let y_bg_s = bgv.predict_background(&mut g, *fsv);
            let pm = probmap(g.value(y_bg_s).clone());
            bg_support_bins.push(binarize(&pm, cfg.tau));
            bg_supports.push(pm);
            if compute_losses {
                per_map_losses.push(g.bg_mining_loss(y_bg_s, ms, cfg.alpha, cfg.epsilon)?);
            }
        }
        if compute_losses {
            // Averaged over the query and all K support predictions.
            let coef = 1.0 / per_map_losses.len() as f64;
            let terms: Vec<(f64, Var)> = per_map_losses.into_iter().map(|v| (coef, v)).collect();
            l_bg_var = Some(g.weighted_sum(&terms));
        }
        x_base = bgv.eliminate_background(&mut g, feat_q_var);
    }

    // Support prototype (masked average pooling per shot, mean fusion) and
    // prior confidence map (averaged over shots).
    let mut shot_protos = Vec::with_capacity(k);
    let mut shot_proto_vars = Vec::with_capacity(k);
    for (fsv, ms) in feat_s_vars.iter().zip(&mask_s) {
        let p = g.masked_avg_pool(*fsv, ms)?;
        shot_proto_vars.push(p);
        shot_protos.push(Prototype::new(g.value(p).data.clone()));
    }
    let p_s_var = if k == 1 {
        shot_proto_vars[0]
    } else {
        let coef = 1.0 / k as f64;
        let terms: Vec<(f64, Var)> = shot_proto_vars.iter().map(|&v| (coef, v)).collect();
        g.weighted_sum(&terms)
    };
    let p_s = fuse_k_shot(&shot_protos)?;

    let mut prior_acc = Tensor::zeros(fh, fw, 1);
    for (fs, ms) in feat_s.iter().zip(&mask_s) {
        let p = prior_confidence_map(&feat_q, fs, ms)?;
        for (a, b) in prior_acc.data.iter_mut().zip(&p.0.data) {
            *a += b / k as f64;
        }
    }
    let prior_var = g.constant(prior_acc);

    // Activation and initial prediction.
    let x_act = vars.matching.activate_query(&mut g, x_base, p_s_var, prior_var);
    let y_ini = vars.matching.initial_prediction(&mut g, x_act);
    let initial = probmap(g.value(y_ini).clone());

    // Target supervision happens at the query mask's native resolution:
    // predictions are upsampled in-graph, which matches how evaluation
    // thresholds them and gives boundary cells fractional targets.
    let (qh, qw) = (episode.query.mask.h, episode.query.mask.w);
    let mut l_t_terms = Vec::new();
    if compute_losses {
        let up = g.bilinear_resize(y_ini, qh, qw);
        l_t_terms.push(g.bce_loss(up, &episode.query.mask, cfg.epsilon)?);
    }

    // Distractor branch.
    let mut masks = None;
    let mut prediction = initial.clone();
    let mut query_negative = None;
    let mut support_negatives = Vec::new();
    let mut bank_candidates = Vec::new();
    let mut query_neg_var = None;
    if let Some(segv) = &vars.seg {
        let y_bg_bin = binarize(bg_query.as_ref().expect("doem requires bgem"), cfg.tau);
        let y_ini_bin = binarize(&initial, cfg.tau);
        let y_do = distractor_mask(&y_bg_bin, &y_ini_bin)?;

        let p_do = distractor_prototype(&feat_q, &y_do)?;
        let p_do_var = if p_do.absent {
            g.constant(Tensor::zeros(1, 1, feat_q.c))
        } else {
            g.masked_avg_pool(feat_q_var, &y_do)?
        };

        let y = segv.final_prediction(&mut g, x_act, p_do_var);
        prediction = probmap(g.value(y).clone());
        if compute_losses {
            let up = g.bilinear_resize(y, qh, qw);
            l_t_terms.push(g.bce_loss(up, &episode.query.mask, cfg.epsilon)?);
        }

        // Negative prototypes under the active policy (the plain
        // distractor prototype above feeds the elimination; these feed the
        // contrastive loss and the bank).
        if flags.pcl && compute_losses {
            let qmask = query_negative_mask(cfg.negative_policy, &y_do, &y_bg_bin, &y_ini_bin);
            let q_neg = distractor_prototype(&feat_q, &qmask)?;
            if !q_neg.absent {
                query_neg_var = Some(g.masked_avg_pool(feat_q_var, &qmask)?);
            }
            bank_candidates.push((episode.class_id, PrototypeOrigin::Query, q_neg.clone()));
            query_negative = Some(q_neg);
            for ((fs, fsv), (ms, bg_bin)) in feat_s
                .iter()
                .zip(&feat_s_vars)
                .zip(mask_s.iter().zip(&bg_support_bins))
            {
                let smask = support_negative_mask(cfg.negative_policy, ms, bg_bin)?;
                let s_neg = distractor_prototype(fs, &smask)?;
                if !s_neg.absent {
                    let _ = g.masked_avg_pool(*fsv, &smask)?;
                }
                bank_candidates.push((episode.class_id, PrototypeOrigin::Support, s_neg.clone()));
                support_negatives.push(s_neg);
            }
        }

        masks = Some(EpisodeMasks {
            bg_query: y_bg_bin,
            initial_query: y_ini_bin,
            distractor_query: y_do,
        });
    }

    // Query target prototype and the contrastive loss.
    let mut query_target = None;
    let mut l_pcl_var = None;
    let mut pcl_skipped = false;
    if flags.pcl && compute_losses {
        let final_mask = binarize(&prediction, cfg.tau);
        if final_mask.is_all_zero() {
            pcl_skipped = true;
        } else {
            let p_q_var = g.masked_avg_pool(x_act, &final_mask)?;
            query_target = Some(Prototype::new(g.value(p_q_var).data.clone()));

            // Negatives: this episode's prototypes plus the bank contents.
            let mut neg_vars: Vec<Var> = Vec::new();
            if let Some(v) = query_neg_var {
                neg_vars.push(v);
            }
            for s_neg in &support_negatives {
                if !s_neg.absent {
                    let t = Tensor::vector(s_neg.prototype.as_slice());
                    neg_vars.push(g.constant(t));
                }
            }
            for e in bank.entries() {
                if cfg.same_class_only && e.class_id != episode.class_id {
                    continue;
                }
                neg_vars.push(g.constant(Tensor::vector(&e.embedding)));
            }
            if neg_vars.is_empty() {
                pcl_skipped = true;
            } else {
                l_pcl_var = Some(g.pcl_loss(
                    p_q_var,
                    p_s_var,
                    &neg_vars,
                    cfg.pcl_temperature,
                    cfg.include_positive_in_denominator,
                ));
            }
        }
    }

    // Total loss.
    let mut total = None;
    let mut losses = LossBreakdown {
        pcl_skipped,
        ..LossBreakdown::default()
    };
    if compute_losses {
        let l_t = if l_t_terms.len() == 1 {
            l_t_terms[0]
        } else {
            let terms: Vec<(f64, Var)> = l_t_terms.iter().map(|&v| (1.0, v)).collect();
            g.weighted_sum(&terms)
        };
        let mut terms = vec![(cfg.loss_weights.beta, l_t)];
        if let Some(lb) = l_bg_var {
            terms.push((cfg.loss_weights.lambda, lb));
        }
        if let Some(lp) = l_pcl_var {
            terms.push((cfg.loss_weights.gamma, lp));
        }
        let total_var = g.weighted_sum(&terms);
        losses.target = g.scalar(l_t);
        losses.background = l_bg_var.map_or(0.0, |v| g.scalar(v));
        losses.contrastive = l_pcl_var.map_or(0.0, |v| g.scalar(v));
        losses.total = g.scalar(total_var);
        total = Some(total_var);
    }

    Ok(EpisodeForward {
        graph: g,
        vars,
        total,
        losses,
        prediction,
        initial,
        bg_query,
        bg_supports,
        masks,
        prototypes: EpisodePrototypes {
            support: p_s,
            query_target,
            query_negative,
            support_negatives,
        },
        bank_candidates,
    })
}

/// Poly learning-rate schedule: base · (1 − step/max)^power, clamped at 0
/// past the end.
pub fn poly_lr(base_lr: f64, step: usize, max_steps: usize, power: f64) -> f64 {
    if step >= max_steps {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / max_steps as f64).powf(power)
}

/// Weighted combination of the three losses (Σ over the weights in
/// [`crate::config::LossWeights`]).
pub fn total_loss(l_t: f64, l_bg: f64, l_pcl: f64, w: &crate::config::LossWeights) -> f64 {
    w.beta * l_t + w.lambda * l_bg + w.gamma * l_pcl
}

/// Target segmentation loss on concrete maps: BCE(initial, mask) +
/// BCE(final, mask), each a per-pixel mean.
pub fn target_loss(y_ini: &ProbMap, y: &ProbMap, m_q: &BinaryMask, epsilon: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(y_ini.0.clone());
    let b = g.constant(y.0.clone());
    let la = g.bce_loss(a, m_q, epsilon)?;
    let lb = g.bce_loss(b, m_q, epsilon)?;
    Ok(g.scalar(la) + g.scalar(lb))
}

/// Query target prototype from the binarized final prediction, pooled over
/// a feature map (standalone value-level helper).
pub fn query_target_prototype(
    features: &Tensor,
    prediction: &ProbMap,
    tau: f64,
) -> Result<Option<Prototype>> {
    let m = binarize(prediction, tau);
    if m.is_all_zero() {
        return Ok(None);
    }
    Ok(Some(masked_average_pool(features, &m)?))
}
