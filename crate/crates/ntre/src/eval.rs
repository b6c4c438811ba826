//! Episodic evaluation, the ablation runner, and overlay rendering.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, TrainConfig};
use crate::contrastive::{NegativePolicy, PrototypeBank};
use crate::data::{build_fold_splits, sample_episode, Dataset, Episode, Split};
use crate::distractor::binarize;
use crate::error::{Error, Result};
use crate::metrics::ConfusionAccumulator;
use crate::model::forward_episode;
use crate::tensor::{bilinear_resize, Tensor};
use crate::train::{train, Checkpoint, TrainOutcome};
use crate::types::{BinaryMask, ProbMap};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub precision: f64,
    pub episode_count: usize,
    pub fold_id: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "fold_id,k_shot,seed,episodes,miou,fb_iou,precision,config_hash"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            self.fold_id,
            self.k_shot,
            self.seed,
            self.episode_count,
            self.miou,
            self.fb_iou,
            self.precision,
            self.config_hash
        )
    }
}

/// Upsample a feature-resolution probability map to the query's pixel grid
/// and threshold it.
pub fn prediction_to_mask(pred: &ProbMap, h: usize, w: usize, tau: f64) -> BinaryMask {
    let up = bilinear_resize(&pred.0, h, w);
    binarize(&ProbMap::new(up).expect("bilinear keeps [0,1]"), tau)
}

/// Evaluate a checkpoint on seeded novel-split episodes: no loss
/// computation, no bank reads or writes, parameters untouched.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    fold_id: usize,
    k_shot: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let cfg = &ckpt.config;
    let folds = build_fold_splits(&dataset.class_ids(), cfg.fold_count)?;
    let fold = folds
        .get(fold_id)
        .ok_or_else(|| Error::Config(format!("fold_id {fold_id} out of range")))?;
    let empty_bank = PrototypeBank::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = ConfusionAccumulator::new();

    let chunk = 32usize;
    let mut remaining = n_pairs;
    while remaining > 0 {
        let n = remaining.min(chunk);
        let episodes: Vec<Episode> = (0..n)
            .map(|_| sample_episode(dataset, fold, Split::Novel, k_shot, &mut rng))
            .collect::<Result<_>>()?;
        let preds: Vec<Result<BinaryMask>> = if cfg.parallel {
            episodes
                .par_iter()
                .map(|ep| evaluate_one(ep, ckpt, &empty_bank))
                .collect()
        } else {
            episodes
                .iter()
                .map(|ep| evaluate_one(ep, ckpt, &empty_bank))
                .collect()
        };
        for (ep, pred) in episodes.iter().zip(preds) {
            acc.add(ep.class_id, &pred?, &ep.query.mask)?;
        }
        remaining -= n;
    }

    let (miou, per_class_iou) = acc.class_miou();
    Ok(MetricsReport {
        per_class_iou,
        miou,
        fb_iou: acc.fb_iou(),
        precision: acc.precision(),
        episode_count: acc.episodes(),
        fold_id,
        k_shot,
        seed,
        config_hash: format!("{:016x}", cfg.config_hash()),
    })
}

fn evaluate_one(ep: &Episode, ckpt: &Checkpoint, bank: &PrototypeBank) -> Result<BinaryMask> {
    let fwd = forward_episode(ep, &ckpt.model, &ckpt.backbone, bank, &ckpt.config, false)?;
    Ok(prediction_to_mask(
        &fwd.prediction,
        ep.query.mask.h,
        ep.query.mask.w,
        ckpt.config.tau,
    ))
}

/// In-memory checkpoint view of a finished training run.
pub fn outcome_checkpoint(cfg: &TrainConfig, outcome: TrainOutcome) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        epoch: cfg.epochs,
        step: cfg.total_steps(),
        model: outcome.model,
        backbone: outcome.backbone,
        velocity: Vec::new(),
        rng_word_pos: 0,
        bank_entries: Vec::new(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub fold_id: usize,
    pub seed: u64,
    pub miou: f64,
    pub fb_iou: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub runs: Vec<RunResult>,
    pub mean_miou: f64,
    pub mean_fb_iou: f64,
    pub mean_precision: f64,
}

fn summarize(name: &str, runs: Vec<RunResult>) -> VariantResult {
    let n = runs.len().max(1) as f64;
    VariantResult {
        name: name.to_string(),
        mean_miou: runs.iter().map(|r| r.miou).sum::<f64>() / n,
        mean_fb_iou: runs.iter().map(|r| r.fb_iou).sum::<f64>() / n,
        mean_precision: runs.iter().map(|r| r.precision).sum::<f64>() / n,
        runs,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    /// baseline, +bgem, +bgem+doem, full — in that order.
    pub variants: Vec<VariantResult>,
    /// Negative-policy comparison rows (do / bg / non-target).
    pub policies: Vec<VariantResult>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("variant        |  mIoU  | FB-IoU |  prec\n");
        s.push_str("---------------+--------+--------+-------\n");
        for v in &self.variants {
            s.push_str(&format!(
                "{:<14} | {:>6.4} | {:>6.4} | {:>6.4}\n",
                v.name, v.mean_miou, v.mean_fb_iou, v.mean_precision
            ));
        }
        if !self.policies.is_empty() {
            s.push_str("\nnegative policy |  mIoU  | FB-IoU |  prec\n");
            s.push_str("----------------+--------+--------+-------\n");
            for v in &self.policies {
                s.push_str(&format!(
                    "{:<15} | {:>6.4} | {:>6.4} | {:>6.4}\n",
                    v.name, v.mean_miou, v.mean_fb_iou, v.mean_precision
                ));
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub eval_pairs: usize,
    /// How many of `seeds` the negative-policy comparison uses (it trains
    /// two extra full models per seed and fold).
    pub policy_seeds: usize,
}

impl AblationConfig {
    pub fn new(base: TrainConfig) -> AblationConfig {
        AblationConfig {
            eval_pairs: base.eval_pairs,
            base,
            seeds: vec![0, 1, 2],
            folds: vec![0, 1],
            policy_seeds: 1,
        }
    }
}

/// Train and evaluate one configuration; returns the run row.
fn one_run(cfg: &TrainConfig, dataset: &Dataset, eval_pairs: usize) -> Result<RunResult> {
    let outcome = train(cfg)?;
    let ckpt = outcome_checkpoint(cfg, outcome);
    let report = evaluate(&ckpt, dataset, cfg.fold_id, cfg.k_shot, eval_pairs, cfg.seed)?;
    Ok(RunResult {
        fold_id: cfg.fold_id,
        seed: cfg.seed,
        miou: report.miou,
        fb_iou: report.fb_iou,
        precision: report.precision,
    })
}

/// Run the four-variant ablation (baseline, +bgem, +bgem+doem, full) over
/// the configured folds and seeds, then the negative-policy comparison on a
/// subset of seeds. The backbone cache is shared across variants, so each
/// (fold, seed) pretrains at most once.
pub fn ablate(cfg: &AblationConfig) -> Result<AblationReport> {
    let dataset = Dataset::load(&cfg.base.dataset)?;
    let variants: [(&str, AblationFlags); 4] = [
        ("baseline", AblationFlags::BASELINE),
        ("+bgem", AblationFlags::BGEM),
        ("+bgem+doem", AblationFlags::BGEM_DOEM),
        ("full", AblationFlags::FULL),
    ];

    // Share one backbone cache across every variant: each (fold, seed)
    // pretrains at most once. Keyed by the base config hash so unrelated
    // ablations do not collide.
    let mut base = cfg.base.clone();
    if base.backbone_cache.is_none() {
        let dir = std::env::temp_dir().join(format!("ntre-bbcache-{:016x}", base.config_hash()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        base.backbone_cache = Some(dir);
    }

    let mut variant_results = Vec::new();
    for (name, flags) in variants {
        let mut runs = Vec::new();
        for &fold_id in &cfg.folds {
            for &seed in &cfg.seeds {
                let mut run_cfg = base.clone();
                run_cfg.flags = flags;
                run_cfg.fold_id = fold_id;
                run_cfg.seed = seed;
                run_cfg.out_dir = base
                    .out_dir
                    .as_ref()
                    .map(|d| d.join(format!("{name}_fold{fold_id}_seed{seed}")));
                log::info!("ablation: training {name} fold {fold_id} seed {seed}");
                runs.push(one_run(&run_cfg, &dataset, cfg.eval_pairs)?);
            }
        }
        variant_results.push(summarize(name, runs));
    }

    // Negative-policy rows: the full model already covers the distractor
    // policy; train the background and non-target alternatives.
    let mut policies = Vec::new();
    let policy_seeds = &cfg.seeds[..cfg.policy_seeds.min(cfg.seeds.len())];
    let do_runs: Vec<RunResult> = variant_results
        .last()
        .map(|v| {
            v.runs
                .iter()
                .filter(|r| policy_seeds.contains(&r.seed))
                .cloned()
                .collect()
        })
        .unwrap_or_default();
    policies.push(summarize("do", do_runs));
    for policy in [NegativePolicy::Background, NegativePolicy::NonTarget] {
        let mut runs = Vec::new();
        for &fold_id in &cfg.folds {
            for &seed in policy_seeds {
                let mut run_cfg = base.clone();
                run_cfg.flags = AblationFlags::FULL;
                run_cfg.negative_policy = policy;
                run_cfg.fold_id = fold_id;
                run_cfg.seed = seed;
                run_cfg.out_dir = base
                    .out_dir
                    .as_ref()
                    .map(|d| d.join(format!("policy_{}_fold{fold_id}_seed{seed}", policy.name())));
                log::info!(
                    "ablation: training full/{} fold {fold_id} seed {seed}",
                    policy.name()
                );
                runs.push(one_run(&run_cfg, &dataset, cfg.eval_pairs)?);
            }
        }
        policies.push(summarize(policy.name(), runs));
    }

    Ok(AblationReport {
        variants: variant_results,
        policies,
    })
}

/// Blend error classes into the image: true positives red, false positives
/// green, false negatives blue.
pub fn overlay(image: &Tensor, prediction: &BinaryMask, truth: &BinaryMask) -> Result<image::RgbImage> {
    if image.h != prediction.h || image.w != prediction.w {
        return Err(Error::Shape(format!(
            "image {}x{} vs prediction {}x{}",
            image.h, image.w, prediction.h, prediction.w
        )));
    }
    prediction.check_shape(truth)?;
    let mut out = image::RgbImage::new(image.w as u32, image.h as u32);
    for y in 0..image.h {
        for x in 0..image.w {
            let tint: Option<[f64; 3]> = match (prediction.at(y, x), truth.at(y, x)) {
                (1, 1) => Some([1.0, 0.0, 0.0]),
                (1, 0) => Some([0.0, 1.0, 0.0]),
                (0, 1) => Some([0.0, 0.0, 1.0]),
                _ => None,
            };
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = image.at(y, x, ch);
                let blended = match tint {
                    Some(t) => 0.45 * v + 0.55 * t[ch],
                    None => v,
                };
                px[ch] = (blended.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

/// Sample one novel episode by seed, run inference, and write the overlay
/// panel for its query.
pub fn render_episode_overlay(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    episode_seed: u64,
    out_path: &Path,
) -> Result<()> {
    let cfg = &ckpt.config;
    let folds = build_fold_splits(&dataset.class_ids(), cfg.fold_count)?;
    let fold = &folds[cfg.fold_id.min(folds.len() - 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let ep = sample_episode(dataset, fold, Split::Novel, cfg.k_shot, &mut rng)?;
    let bank = PrototypeBank::new(0);
    let pred = evaluate_one(&ep, ckpt, &bank)?;
    let img = overlay(&ep.query.image, &pred, &ep.query.mask)?;
    img.save(out_path).map_err(|e| Error::image(out_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_color_rules() {
        let image = Tensor::filled(2, 2, 3, 0.5);
        // Pixel (0,0): TP, (0,1): FP, (1,0): FN, (1,1): TN.
        let pred = BinaryMask::from_data(2, 2, vec![1, 1, 0, 0]).unwrap();
        let truth = BinaryMask::from_data(2, 2, vec![1, 0, 1, 0]).unwrap();
        let img = overlay(&image, &pred, &truth).unwrap();
        assert_eq!(img.dimensions(), (2, 2));
        let tp = img.get_pixel(0, 0);
        assert!(tp.0[0] > tp.0[1] && tp.0[0] > tp.0[2], "TP tinted red");
        let fp = img.get_pixel(1, 0);
        assert!(fp.0[1] > fp.0[0] && fp.0[1] > fp.0[2], "FP tinted green");
        let fn_px = img.get_pixel(0, 1);
        assert!(fn_px.0[2] > fn_px.0[0] && fn_px.0[2] > fn_px.0[1], "FN tinted blue");
        let tn = img.get_pixel(1, 1);
        assert_eq!(tn.0[0], tn.0[1]);
        assert_eq!(tn.0[1], tn.0[2]);
    }

    #[test]
    fn perfect_prediction_has_no_green_or_blue() {
        let image = Tensor::filled(3, 3, 3, 0.2);
        let truth = BinaryMask::from_data(3, 3, vec![1, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
        let img = overlay(&image, &truth.clone(), &truth).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let p = img.get_pixel(x, y);
                // Any tinted pixel must be red-dominant.
                if p.0[0] != p.0[1] || p.0[1] != p.0[2] {
                    assert!(p.0[0] > p.0[1] && p.0[0] > p.0[2]);
                }
            }
        }
    }

    #[test]
    fn empty_prediction_tints_only_blue() {
        let image = Tensor::filled(2, 2, 3, 0.7);
        let pred = BinaryMask::zeros(2, 2);
        let truth = BinaryMask::from_data(2, 2, vec![1, 1, 0, 0]).unwrap();
        let img = overlay(&image, &pred, &truth).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let p = img.get_pixel(x, y);
                if p.0[0] != p.0[1] || p.0[1] != p.0[2] {
                    assert!(p.0[2] > p.0[0] && p.0[2] > p.0[1], "only blue tint allowed");
                }
            }
        }
    }

    #[test]
    fn prediction_upsampling_threshold() {
        let pred = ProbMap::new(Tensor::from_vec(2, 2, 1, vec![0.9, 0.1, 0.1, 0.1])).unwrap();
        let m = prediction_to_mask(&pred, 4, 4, 0.5);
        assert_eq!(m.at(0, 0), 1);
        assert_eq!(m.at(3, 3), 0);
    }
}
