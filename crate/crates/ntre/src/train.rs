//! Episodic training: SGD with momentum and poly learning-rate annealing
//! over base-fold episodes, batched gradients with an order-preserving
//! reduction (bitwise-deterministic under the parallel switch), prototype
//! bank maintenance, checkpointing and resume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::TrainConfig;
use crate::contrastive::{BankEntry, PrototypeBank, PrototypeOrigin};
use crate::data::{augment, build_fold_splits, sample_episode, AugmentConfig, Dataset, Episode, FoldSpec, Split};
use crate::distractor::DoPrototype;
use crate::error::{Error, Result};
use crate::model::{forward_episode, poly_lr, Model};
use crate::nn::SgdMomentum;
use crate::serial::{fnv1a, Reader, Writer};
use crate::types::Prototype;

const CKPT_MAGIC: &[u8; 8] = b"NTRECKP\0";
const CKPT_VERSION: u32 = 1;

/// One optimization step's record; the training log is the list of these.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_t: f64,
    pub l_bg: f64,
    pub l_pcl: f64,
    pub total: f64,
}

impl StepLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.12},{:.12},{:.12},{:.12},{:.12}",
            self.step, self.lr, self.l_t, self.l_bg, self.l_pcl, self.total
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub backbone: Backbone,
    pub bank: PrototypeBank,
    pub log: Vec<StepLog>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Serialized training state: parameters, optimizer, RNG position and the
/// embedded config snapshot.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub model: Model,
    pub backbone: Backbone,
    pub velocity: Vec<f64>,
    pub rng_word_pos: u128,
    pub bank_entries: Vec<BankEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(CKPT_MAGIC, CKPT_VERSION);
        let cfg_text = self.config.to_flat_text();
        w.string(&cfg_text);
        w.u64(fnv1a(&cfg_text));
        w.u64(self.epoch as u64);
        w.u64(self.step as u64);
        w.u128(self.rng_word_pos);

        // Backbone.
        w.u64(self.backbone.config_hash);
        w.u64(self.backbone.feature_channels as u64);
        let bparams = self.backbone.params_flat();
        w.f64_slice(&bparams);

        // Model parameters, fixed all-params order.
        let params = self.model.all_params();
        w.u64(params.len() as u64);
        for p in params {
            w.tensor(p);
        }

        w.f64_slice(&self.velocity);

        w.u64(self.bank_entries.len() as u64);
        for e in &self.bank_entries {
            w.u64(e.class_id as u64);
            w.u32(match e.origin {
                PrototypeOrigin::Query => 0,
                PrototypeOrigin::Support => 1,
            });
            w.f64_slice(&e.embedding);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = Reader::open(path, CKPT_MAGIC, CKPT_VERSION)?;
        let cfg_text = r.string()?;
        let cfg_hash = r.u64()?;
        if cfg_hash != fnv1a(&cfg_text) {
            return Err(Error::Checkpoint(format!(
                "{}: embedded config hash mismatch",
                path.display()
            )));
        }
        let config = TrainConfig::from_str_with_defaults(&cfg_text)?;
        let epoch = r.u64()? as usize;
        let step = r.u64()? as usize;
        let rng_word_pos = r.u128()?;

        let backbone_hash = r.u64()?;
        let feature_channels = r.u64()? as usize;
        let bparams = r.f64_slice()?;
        // Rebuild the backbone container and overwrite its weights.
        let mut backbone = Backbone::build(
            &BackboneConfig {
                feature_channels,
                pretrained: false,
                seed: 0,
                ..BackboneConfig::default()
            },
            &[],
            1,
        );
        backbone.load_params_flat(&bparams)?;
        backbone.config_hash = backbone_hash;

        let mut model = Model::new(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let n = r.u64()? as usize;
        {
            let mut slots = model.all_params_mut();
            if n != slots.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter count {} != expected {}",
                    n,
                    slots.len()
                )));
            }
            for slot in slots.iter_mut() {
                let t = r.tensor()?;
                if !t.same_shape(slot) {
                    return Err(Error::Checkpoint(format!(
                        "parameter shape {} != expected {}",
                        t.shape_str(),
                        slot.shape_str()
                    )));
                }
                **slot = t;
            }
        }

        let velocity = r.f64_slice()?;
        let bank_n = r.u64()? as usize;
        let mut bank_entries = Vec::with_capacity(bank_n);
        for _ in 0..bank_n {
            let class_id = r.u64()? as usize;
            let origin = match r.u32()? {
                0 => PrototypeOrigin::Query,
                _ => PrototypeOrigin::Support,
            };
            let embedding = r.f64_slice()?;
            bank_entries.push(BankEntry {
                class_id,
                origin,
                embedding,
            });
        }
        Ok(Checkpoint {
            config,
            epoch,
            step,
            model,
            backbone,
            velocity,
            rng_word_pos,
            bank_entries,
        })
    }
}

/// Resolve the backbone for a config and fold: load it from the cache
/// directory when a matching file exists, otherwise build (and cache) it.
pub fn build_or_load_backbone(
    cfg: &TrainConfig,
    fold: &FoldSpec,
    num_classes: usize,
) -> Result<Backbone> {
    let bb_cfg = BackboneConfig {
        feature_channels: cfg.feature_channels,
        seed: cfg.seed,
        pretrained: cfg.backbone_pretrained,
        pretrain_steps: cfg.backbone_steps,
        pretrain_batch: cfg.backbone_batch,
        pretrain_lr: cfg.backbone_lr,
        pretrain_crop: cfg.backbone_crop,
    };
    let hash = fnv1a(&bb_cfg.canonical_string(&fold.base_classes, num_classes));
    if let Some(cache) = &cfg.backbone_cache {
        let path = cache.join(format!("backbone_{hash:016x}.bin"));
        if path.exists() {
            return Backbone::load(&path, hash);
        }
        let bb = Backbone::build(&bb_cfg, &fold.base_classes, num_classes);
        // Write-then-rename so concurrent runs never observe a torn file.
        let tmp = cache.join(format!("backbone_{hash:016x}.{}.tmp", std::process::id()));
        bb.save(&tmp)?;
        if fs::rename(&tmp, &path).is_err() {
            let _ = fs::remove_file(&tmp);
        }
        return Ok(bb);
    }
    Ok(Backbone::build(&bb_cfg, &fold.base_classes, num_classes))
}

/// Sample and augment one training episode. If augmentation empties a mask
/// at feature resolution, the unaugmented pair is kept instead.
fn training_episode(
    dataset: &Dataset,
    fold: &FoldSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let ep = sample_episode(dataset, fold, Split::Base, cfg.k_shot, rng)?;
    if !cfg.augment {
        return Ok(ep);
    }
    // One hue angle per episode: within the episode, support and query keep
    // matching colors; across episodes, a class's color varies freely.
    let hue = if cfg.episode_hue {
        rng.gen_range(0.0..1.0)
    } else {
        0.0
    };
    let aug_cfg = AugmentConfig::training(cfg.crop_size);
    let fh = feature_side(cfg.crop_size);
    let recolor = |p: &crate::data::ImageMaskPair| crate::data::ImageMaskPair {
        image: crate::data::color::rotate_hue(&p.image, hue),
        mask: p.mask.clone(),
        class_id: p.class_id,
        sample_id: p.sample_id.clone(),
    };
    let mut support = Vec::with_capacity(ep.support.len());
    for s in &ep.support {
        let a = augment(s, &aug_cfg, rng);
        let picked = if a.mask.downsample_nearest(fh, fh).is_all_zero() {
            s.clone()
        } else {
            a
        };
        support.push(if hue == 0.0 { picked } else { recolor(&picked) });
    }
    let q = augment(&ep.query, &aug_cfg, rng);
    let picked = if q.mask.downsample_nearest(fh, fh).is_all_zero() {
        ep.query.clone()
    } else {
        q
    };
    let query = if hue == 0.0 { picked } else { recolor(&picked) };
    Episode::new(support, query)
}

/// Spatial side of the feature grid for a given input side (two /2 pools).
pub fn feature_side(input: usize) -> usize {
    (input / 2) / 2
}

struct EpisodeResult {
    losses: crate::model::LossBreakdown,
    grads: Vec<Vec<f64>>,
    bank_candidates: Vec<(usize, PrototypeOrigin, DoPrototype)>,
    episode_id: String,
}

fn run_episode(
    ep: &Episode,
    model: &Model,
    backbone: &Backbone,
    bank: &PrototypeBank,
    cfg: &TrainConfig,
) -> Result<EpisodeResult> {
    let fwd = forward_episode(ep, model, backbone, bank, cfg, true)?;
    let total = fwd.total.expect("training forward computes losses");
    let grads = fwd.graph.backward(total);
    let vars = fwd.vars.active_vars();
    let sizes: Vec<usize> = model.active_params().iter().map(|t| t.len()).collect();
    let flat: Vec<Vec<f64>> = vars
        .iter()
        .zip(&sizes)
        .map(|(&v, &n)| match grads.get(v) {
            Some(t) => t.data.clone(),
            None => vec![0.0; n],
        })
        .collect();
    Ok(EpisodeResult {
        losses: fwd.losses,
        grads: flat,
        bank_candidates: fwd.bank_candidates,
        episode_id: ep.query.sample_id.clone(),
    })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_inner(cfg, None)
}

/// Continue a checkpointed run until the configured total step count.
pub fn resume(ckpt: Checkpoint) -> Result<TrainOutcome> {
    let cfg = ckpt.config.clone();
    train_inner(&cfg, Some(ckpt))
}

fn train_inner(cfg: &TrainConfig, resume_from: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let folds = build_fold_splits(&dataset.class_ids(), cfg.fold_count)?;
    let fold = folds
        .get(cfg.fold_id)
        .ok_or_else(|| Error::Config(format!("fold_id {} out of range", cfg.fold_id)))?
        .clone();

    // Independent RNG streams: 1 = episode sampling/augmentation, 2 = model init.
    let mut rng_data = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_data.set_stream(1);
    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_init.set_stream(2);

    let (mut model, backbone, mut bank, mut opt, start_step) = match resume_from {
        Some(ckpt) => {
            let sizes: Vec<usize> = ckpt.model.active_params().iter().map(|t| t.len()).collect();
            let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay, &sizes);
            opt.load_velocity_flat(&ckpt.velocity);
            let mut bank = PrototypeBank::new(cfg.bank_capacity);
            let candidates: Vec<(usize, PrototypeOrigin, DoPrototype)> = ckpt
                .bank_entries
                .iter()
                .map(|e| {
                    (
                        e.class_id,
                        e.origin,
                        DoPrototype {
                            prototype: Prototype::new(e.embedding.clone()),
                            absent: false,
                        },
                    )
                })
                .collect();
            bank.push(&candidates);
            rng_data.set_word_pos(ckpt.rng_word_pos);
            (ckpt.model, ckpt.backbone, bank, opt, ckpt.step)
        }
        None => {
            let backbone = build_or_load_backbone(cfg, &fold, dataset.classes.len())?;
            let model = Model::new(cfg, &mut rng_init);
            let sizes: Vec<usize> = model.active_params().iter().map(|t| t.len()).collect();
            let opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay, &sizes);
            let bank = PrototypeBank::new(cfg.bank_capacity);
            (model, backbone, bank, opt, 0)
        }
    };

    let total_steps = cfg.total_steps();
    let steps_per_epoch = cfg.steps_per_epoch();
    let mut log = Vec::with_capacity(total_steps.saturating_sub(start_step));

    for step in start_step..total_steps {
        let lr = poly_lr(cfg.base_lr, step, total_steps, cfg.poly_power);
        let episodes: Vec<Episode> = (0..cfg.batch_size)
            .map(|_| training_episode(&dataset, &fold, cfg, &mut rng_data))
            .collect::<Result<_>>()?;

        // Forward/backward per episode; the reduction below walks episodes
        // in index order, so results do not depend on scheduling.
        let results: Vec<Result<EpisodeResult>> = if cfg.parallel {
            episodes
                .par_iter()
                .map(|ep| run_episode(ep, &model, &backbone, &bank, cfg))
                .collect()
        } else {
            episodes
                .iter()
                .map(|ep| run_episode(ep, &model, &backbone, &bank, cfg))
                .collect()
        };

        let sizes: Vec<usize> = model.active_params().iter().map(|t| t.len()).collect();
        let mut grad_acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut mean = StepLog {
            step,
            lr,
            l_t: 0.0,
            l_bg: 0.0,
            l_pcl: 0.0,
            total: 0.0,
        };
        let mut candidates = Vec::new();
        let inv = 1.0 / cfg.batch_size as f64;
        for res in results {
            let res = res?;
            if !res.losses.total.is_finite() {
                return Err(Error::NanLoss {
                    step,
                    episode: res.episode_id,
                });
            }
            for (acc, g) in grad_acc.iter_mut().zip(&res.grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b * inv;
                }
            }
            mean.l_t += res.losses.target * inv;
            mean.l_bg += res.losses.background * inv;
            mean.l_pcl += res.losses.contrastive * inv;
            mean.total += res.losses.total * inv;
            candidates.extend(res.bank_candidates);
        }

        opt.step(lr, &mut model.active_params_mut(), &grad_acc);
        if model.flags.pcl {
            bank.push(&candidates);
        }
        log.push(mean);

        let end_of_epoch = (step + 1) % steps_per_epoch == 0;
        if end_of_epoch && cfg.save_every > 0 {
            let epoch = (step + 1) / steps_per_epoch;
            if epoch % cfg.save_every == 0 && epoch < cfg.epochs {
                if let Some(out) = &cfg.out_dir {
                    save_checkpoint(cfg, &model, &backbone, &opt, &bank, &rng_data, step + 1)?
                        .save(&out.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
            }
        }
    }

    let mut checkpoint_path = None;
    if let Some(out) = &cfg.out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let ckpt = save_checkpoint(cfg, &model, &backbone, &opt, &bank, &rng_data, total_steps)?;
        let path = out.join("model.ckpt");
        ckpt.save(&path)?;
        checkpoint_path = Some(path);

        let log_path = out.join("train_log.csv");
        let mut text = String::from("step,lr,L_T,L_BG,L_PCL,total\n");
        for l in &log {
            text.push_str(&l.csv_line());
            text.push('\n');
        }
        fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    }

    Ok(TrainOutcome {
        model,
        backbone,
        bank,
        log,
        checkpoint_path,
    })
}

fn save_checkpoint(
    cfg: &TrainConfig,
    model: &Model,
    backbone: &Backbone,
    opt: &SgdMomentum,
    bank: &PrototypeBank,
    rng_data: &ChaCha8Rng,
    step: usize,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: cfg.clone(),
        epoch: step / cfg.steps_per_epoch(),
        step,
        model: model.clone(),
        backbone: backbone.clone(),
        velocity: opt.velocity_flat(),
        rng_word_pos: rng_data.get_word_pos(),
        bank_entries: if cfg.checkpoint_bank {
            bank.entries().cloned().collect()
        } else {
            Vec::new()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config(dir: &Path, out: Option<PathBuf>) -> TrainConfig {
        let mut cfg = TrainConfig::desk_synthetic(dir);
        cfg.feature_channels = 16;
        cfg.bg_prototype_channels = 16;
        cfg.hidden_channels = 16;
        cfg.crop_size = 32;
        cfg.epochs = 2;
        cfg.episodes_per_epoch = 4;
        cfg.batch_size = 2;
        cfg.backbone_pretrained = false;
        cfg.out_dir = out;
        cfg
    }

    fn tiny_dataset(seed: u64) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::data::SyntheticSpec {
            num_classes: 4,
            images_per_class: 4,
            image_size: 32,
            seed,
            ..crate::data::SyntheticSpec::default()
        };
        crate::data::generate_synthetic_dataset(&spec, dir.path()).unwrap();
        dir
    }

    #[test]
    fn two_seeded_runs_produce_identical_logs() {
        let data = tiny_dataset(3);
        let cfg = smoke_config(data.path(), None);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.l_t.to_bits(), y.l_t.to_bits());
        }
        // And the parallel switch does not change the numbers.
        let mut serial = cfg.clone();
        serial.parallel = false;
        let c = train(&serial).unwrap();
        for (x, y) in a.log.iter().zip(&c.log) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_parameters() {
        let data = tiny_dataset(4);
        let out = tempfile::tempdir().unwrap();
        let cfg = smoke_config(data.path(), Some(out.path().to_path_buf()));
        let outcome = train(&cfg).unwrap();
        let path = outcome.checkpoint_path.clone().unwrap();

        let ckpt = Checkpoint::load(&path).unwrap();
        let orig: Vec<f64> = outcome
            .model
            .all_params()
            .iter()
            .flat_map(|t| t.data.clone())
            .collect();
        let loaded: Vec<f64> = ckpt
            .model
            .all_params()
            .iter()
            .flat_map(|t| t.data.clone())
            .collect();
        assert_eq!(orig.len(), loaded.len());
        assert!(orig.iter().zip(&loaded).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(ckpt.step, cfg.total_steps());

        // Saving the loaded checkpoint again is byte-identical.
        let path2 = out.path().join("again.ckpt");
        ckpt.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn resume_continues_from_recorded_step() {
        let data = tiny_dataset(5);
        let out_full = tempfile::tempdir().unwrap();
        let mut cfg_full = smoke_config(data.path(), Some(out_full.path().to_path_buf()));
        cfg_full.epochs = 4;
        cfg_full.save_every = 2;
        cfg_full.checkpoint_bank = true;
        let full = train(&cfg_full).unwrap();

        // Resume from the mid-run snapshot; the remaining steps must replay
        // the uninterrupted run exactly.
        let mut ckpt = Checkpoint::load(&out_full.path().join("epoch_0002.ckpt")).unwrap();
        ckpt.config.out_dir = None;
        let halfway_step = ckpt.step;
        let resumed = resume(ckpt).unwrap();

        assert_eq!(
            halfway_step + resumed.log.len(),
            full.log.len(),
            "resumed run must cover the remaining steps"
        );
        for l in &resumed.log {
            let counterpart = &full.log[l.step];
            assert_eq!(l.total.to_bits(), counterpart.total.to_bits());
        }
        let full_params: Vec<f64> = full
            .model
            .all_params()
            .iter()
            .flat_map(|t| t.data.clone())
            .collect();
        let resumed_params: Vec<f64> = resumed
            .model
            .all_params()
            .iter()
            .flat_map(|t| t.data.clone())
            .collect();
        for (a, b) in full_params.iter().zip(&resumed_params) {
            assert_eq!(a.to_bits(), b.to_bits(), "resume diverged from straight run");
        }
    }

    #[test]
    fn backbone_stays_frozen_through_training() {
        let data = tiny_dataset(6);
        let cfg = smoke_config(data.path(), None);
        let dataset = Dataset::load(&cfg.dataset).unwrap();
        let folds = build_fold_splits(&dataset.class_ids(), cfg.fold_count).unwrap();
        let before = build_or_load_backbone(&cfg, &folds[cfg.fold_id], dataset.classes.len())
            .unwrap()
            .params_flat();
        let outcome = train(&cfg).unwrap();
        let after = outcome.backbone.params_flat();
        assert_eq!(before.len(), after.len());
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
