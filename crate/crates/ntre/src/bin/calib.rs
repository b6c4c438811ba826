// Temporary calibration harness; not part of the deliverable.
use std::time::Instant;

use ntre::config::{AblationFlags, TrainConfig};
use ntre::contrastive::PrototypeBank;
use ntre::data::*;
use ntre::eval::{evaluate, outcome_checkpoint};
use ntre::model::{forward_episode, Model};
use ntre::train::{build_or_load_backbone, train};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("speed");

    let data_dir = std::path::PathBuf::from("/tmp/ntre-calib-data");
    if !data_dir.join("index.json").exists() {
        let spec = SyntheticSpec::default();
        generate_synthetic_dataset(&spec, &data_dir).unwrap();
        println!("generated dataset at {}", data_dir.display());
    }

    if mode == "speed" {
        for c in [32usize, 48, 64] {
            let mut cfg = TrainConfig::desk_synthetic(&data_dir);
            cfg.feature_channels = c;
            cfg.bg_prototype_channels = c;
            cfg.hidden_channels = c;
            cfg.backbone_cache = Some(std::path::PathBuf::from("/tmp/ntre-calib-bb"));
            std::fs::create_dir_all("/tmp/ntre-calib-bb").unwrap();
            let ds = Dataset::load(&cfg.dataset).unwrap();
            let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
            let t0 = Instant::now();
            let backbone = build_or_load_backbone(&cfg, &folds[0], ds.classes.len()).unwrap();
            println!("C={c}: backbone build/load {:.2?}", t0.elapsed());

            let model = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
            let bank = PrototypeBank::new(2000);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let ep = sample_episode(&ds, &folds[0], Split::Base, 1, &mut rng).unwrap();

            let t0 = Instant::now();
            let n = 10;
            for _ in 0..n {
                let fwd = forward_episode(&ep, &model, &backbone, &bank, &cfg, true).unwrap();
                let total = fwd.total.unwrap();
                let _ = fwd.graph.backward(total);
            }
            let per = t0.elapsed() / n;
            println!("C={c}: fwd+bwd per episode {per:.2?}");

            let t0 = Instant::now();
            for _ in 0..n {
                let _ = forward_episode(&ep, &model, &backbone, &bank, &cfg, false).unwrap();
            }
            println!("C={c}: inference per episode {:.2?}", t0.elapsed() / n);
        }
        return;
    }

    if mode == "debug" {
        let c: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
        let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
        let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
        let flags_name = args.get(5).map(|s| s.as_str()).unwrap_or("baseline");
        let mut cfg = TrainConfig::desk_synthetic(&data_dir);
        cfg.feature_channels = c;
        cfg.bg_prototype_channels = c;
        cfg.hidden_channels = c;
        cfg.epochs = epochs;
        cfg.base_lr = lr;
        cfg.flags = match flags_name {
            "bgem" => AblationFlags::BGEM,
            "doem" => AblationFlags::BGEM_DOEM,
            "full" => AblationFlags::FULL,
            _ => AblationFlags::BASELINE,
        };
        cfg.backbone_cache = Some(std::path::PathBuf::from("/tmp/ntre-calib-bb"));
        let ds = Dataset::load(&cfg.dataset).unwrap();
        let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
        let backbone = build_or_load_backbone(&cfg, &folds[0], ds.classes.len()).unwrap();
        let outcome = train(&cfg).unwrap();
        for (i, l) in outcome.log.iter().enumerate() {
            if i % 10 == 0 || i + 1 == outcome.log.len() {
                println!(
                    "step {:3}: lr {:.4} L_T {:.4} L_BG {:.4} L_PCL {:.4}",
                    l.step, l.lr, l.l_t, l.l_bg, l.l_pcl
                );
            }
        }
        // Inspect predictions on a fresh base episode.
        let bank = PrototypeBank::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for split in [Split::Base, Split::Novel] {
            let ep = sample_episode(&ds, &folds[0], split, 1, &mut rng).unwrap();
            let fwd =
                forward_episode(&ep, &outcome.model, &backbone, &bank, &cfg, false).unwrap();
            let pred = &fwd.prediction.0.data;
            let mean: f64 = pred.iter().sum::<f64>() / pred.len() as f64;
            let mx = pred.iter().cloned().fold(0.0f64, f64::max);
            let mn = pred.iter().cloned().fold(1.0f64, f64::min);
            let fg = ep.query.mask.downsample_nearest(16, 16).count_ones();
            println!(
                "{split:?} ep class {}: pred mean {mean:.4} min {mn:.4} max {mx:.4} | true fg {fg}/256",
                ep.class_id
            );
            if let Some(m) = &fwd.masks {
                println!(
                    "  bg {} ini {} do {}",
                    m.bg_query.count_ones(),
                    m.initial_query.count_ones(),
                    m.distractor_query.count_ones()
                );
            }
        }
        return;
    }

    if mode == "prior" {
        let c: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
        for pretrained in [true, false] {
            let mut cfg = TrainConfig::desk_synthetic(&data_dir);
            cfg.feature_channels = c;
            cfg.backbone_pretrained = pretrained;
            cfg.backbone_cache = Some(std::path::PathBuf::from("/tmp/ntre-calib-bb"));
            let ds = Dataset::load(&cfg.dataset).unwrap();
            let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
            let backbone = build_or_load_backbone(&cfg, &folds[0], ds.classes.len()).unwrap();
            for split in [Split::Base, Split::Novel] {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let mut inside = 0.0;
                let mut outside = 0.0;
                let mut sep = 0.0;
                let n = 30;
                for _ in 0..n {
                    let ep = sample_episode(&ds, &folds[0], split, 1, &mut rng).unwrap();
                    let fq = backbone.extract_features(&ep.query.image).unwrap();
                    let fs = backbone.extract_features(&ep.support[0].image).unwrap();
                    let ms = ep.support[0].mask.downsample_nearest(16, 16);
                    let prior = ntre::backbone::prior_confidence_map(&fq, &fs, &ms).unwrap();
                    let mq = ep.query.mask.downsample_nearest(16, 16);
                    let mut i_sum = 0.0;
                    let mut o_sum = 0.0;
                    let (mut i_n, mut o_n) = (0.0, 0.0);
                    for idx in 0..256 {
                        if mq.data[idx] == 1 {
                            i_sum += prior.0.data[idx];
                            i_n += 1.0;
                        } else {
                            o_sum += prior.0.data[idx];
                            o_n += 1.0;
                        }
                    }
                    if i_n > 0.0 {
                        inside += i_sum / i_n;
                        outside += o_sum / o_n;
                        sep += (i_sum / i_n) - (o_sum / o_n);
                    }
                }
                println!(
                    "pretrained={pretrained} {split:?}: prior inside {:.3} outside {:.3} sep {:.3}",
                    inside / n as f64,
                    outside / n as f64,
                    sep / n as f64
                );
            }
        }
        return;
    }

    if mode == "init" {
        // Evaluate an untrained (prior-readout) model on novel episodes.
        let c: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
        for fold in [0usize, 1] {
            let mut cfg = TrainConfig::desk_synthetic(&data_dir);
            cfg.feature_channels = c;
            cfg.bg_prototype_channels = c;
            cfg.hidden_channels = c;
            cfg.fold_id = fold;
            cfg.backbone_cache = Some(std::path::PathBuf::from("/tmp/ntre-calib-bb"));
            let ds = Dataset::load(&cfg.dataset).unwrap();
            let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
            let backbone = build_or_load_backbone(&cfg, &folds[fold], ds.classes.len()).unwrap();
            for flags in [AblationFlags::BASELINE, AblationFlags::FULL] {
                cfg.flags = flags;
                let model = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(42));
                let ckpt = ntre::train::Checkpoint {
                    config: cfg.clone(),
                    epoch: 0,
                    step: 0,
                    model,
                    backbone: backbone.clone(),
                    velocity: vec![],
                    rng_word_pos: 0,
                    bank_entries: vec![],
                };
                let rep = evaluate(&ckpt, &ds, fold, 1, 200, 0).unwrap();
                println!(
                    "untrained {} fold{}: miou {:.4} prec {:.4} fb {:.4}",
                    flags.name(),
                    fold,
                    rep.miou,
                    rep.precision,
                    rep.fb_iou
                );
            }
        }
        return;
    }

    if mode == "probe" {
        // Error composition of a trained model on novel episodes.
        let c: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
        let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(15);
        let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
        let flags_name = args.get(5).map(|s| s.as_str()).unwrap_or("baseline");
        for fold in [0usize, 1] {
            let mut cfg = TrainConfig::desk_synthetic(&data_dir);
            cfg.feature_channels = c;
            cfg.bg_prototype_channels = c;
            cfg.hidden_channels = c;
            cfg.epochs = epochs;
            cfg.base_lr = lr;
            cfg.fold_id = fold;
            cfg.flags = match flags_name {
                "bgem" => AblationFlags::BGEM,
                "doem" => AblationFlags::BGEM_DOEM,
                "full" => AblationFlags::FULL,
                _ => AblationFlags::BASELINE,
            };
            cfg.backbone_cache = Some(std::path::PathBuf::from("/tmp/ntre-calib-bb"));
            let ds = Dataset::load(&cfg.dataset).unwrap();
            let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
            let backbone = build_or_load_backbone(&cfg, &folds[fold], ds.classes.len()).unwrap();
            let outcome = train(&cfg).unwrap();
            let bank = PrototypeBank::new(0);
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let (mut fn_px, mut fp_shape, mut fp_texture, mut tp_px) = (0u64, 0u64, 0u64, 0u64);
            let mut empty = 0;
            let mut ious = vec![];
            for _ in 0..60 {
                let ep = sample_episode(&ds, &folds[fold], Split::Novel, 1, &mut rng).unwrap();
                let fwd =
                    forward_episode(&ep, &outcome.model, &backbone, &bank, &cfg, false).unwrap();
                let pred = ntre::eval::prediction_to_mask(
                    &fwd.prediction,
                    ep.query.mask.h,
                    ep.query.mask.w,
                    cfg.tau,
                );
                if pred.is_all_zero() {
                    empty += 1;
                }
                let inter = pred.intersection(&ep.query.mask).unwrap().count_ones() as f64;
                let uni = (pred.count_ones() + ep.query.mask.count_ones()) as f64 - inter;
                ious.push(if uni > 0.0 { inter / uni } else { 1.0 });
                for y in 0..pred.h {
                    for x in 0..pred.w {
                        let p = pred.at(y, x);
                        let t = ep.query.mask.at(y, x);
                        let px = [
                            ep.query.image.at(y, x, 0),
                            ep.query.image.at(y, x, 1),
                            ep.query.image.at(y, x, 2),
                        ];
                        let maxc = px[0].max(px[1]).max(px[2]);
                        let minc = px[0].min(px[1]).min(px[2]);
                        let saturated = maxc > 0.0 && (maxc - minc) / maxc > 0.35;
                        match (p, t) {
                            (1, 1) => tp_px += 1,
                            (0, 1) => fn_px += 1,
                            (1, 0) => {
                                if saturated {
                                    fp_shape += 1
                                } else {
                                    fp_texture += 1
                                }
                            }
                            _ => {}
                        }
                    }
                }
            }
            ious.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| ious[((ious.len() - 1) as f64 * p) as usize];
            println!(
                "{} fold{}: TP {tp_px} FN {fn_px} FP-shape {fp_shape} FP-texture {fp_texture} | empty {empty}/60 iou q10 {:.2} q50 {:.2} q90 {:.2}",
                flags_name, fold, q(0.1), q(0.5), q(0.9)
            );
        }
        return;
    }

    // mode == "trend": short training runs per variant on fold 0/1.
    let c: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let eval_pairs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let pretrained: bool = args.get(6).map(|s| s == "pre").unwrap_or(true);
    let seeds: Vec<u64> = vec![0];
    let folds: Vec<usize> = vec![0, 1];

    for flags in [
        AblationFlags::BASELINE,
        AblationFlags::BGEM,
        AblationFlags::BGEM_DOEM,
        AblationFlags::FULL,
    ] {
        let mut mious = vec![];
        let mut precs = vec![];
        let t0 = Instant::now();
        for &fold in &folds {
            for &seed in &seeds {
                let mut cfg = TrainConfig::desk_synthetic(&data_dir);
                cfg.feature_channels = c;
                cfg.bg_prototype_channels = c;
                cfg.hidden_channels = c;
                cfg.epochs = epochs;
                cfg.base_lr = lr;
                cfg.fold_id = fold;
                cfg.seed = seed;
                cfg.flags = flags;
                cfg.backbone_pretrained = pretrained;
                cfg.backbone_cache = Some(std::path::PathBuf::from("/tmp/ntre-calib-bb"));
                let ds = Dataset::load(&cfg.dataset).unwrap();
                let outcome = train(&cfg).unwrap();
                let first10: f64 = outcome.log.iter().take(10).map(|l| l.l_t).sum::<f64>()
                    / outcome.log.len().min(10) as f64;
                let last = outcome.log.last().unwrap().clone();
                let ckpt = outcome_checkpoint(&cfg, outcome);
                let rep = evaluate(&ckpt, &ds, fold, 1, eval_pairs, seed).unwrap();
                println!(
                    "  {} fold{} seed{}: miou {:.4} prec {:.4} fb {:.4} | L_T first10 {:.3} last {:.3}",
                    flags.name(), fold, seed, rep.miou, rep.precision, rep.fb_iou, first10, last.l_t
                );
                mious.push(rep.miou);
                precs.push(rep.precision);
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{}: mean miou {:.4} prec {:.4}  ({:.1?})",
            flags.name(),
            mean(&mious),
            mean(&precs),
            t0.elapsed()
        );
    }
}
