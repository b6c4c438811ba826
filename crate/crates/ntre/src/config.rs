//! Training configuration: every knob of the pipeline in one flat structure,
//! parseable from a `key = value` text file, with named profiles for the
//! desk-scale synthetic setup and the two paper-scale setups.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::contrastive::NegativePolicy;
use crate::error::{Error, Result};
use crate::serial::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        if self.beta == 0.0 && self.lambda == 0.0 && self.gamma == 0.0 {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Which pipeline stages are active. The stages build on each other:
/// distractor elimination needs the background branch, and contrastive
/// learning needs distractor prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub bgem: bool,
    pub doem: bool,
    pub pcl: bool,
}

impl AblationFlags {
    pub const BASELINE: AblationFlags = AblationFlags {
        bgem: false,
        doem: false,
        pcl: false,
    };
    pub const BGEM: AblationFlags = AblationFlags {
        bgem: true,
        doem: false,
        pcl: false,
    };
    pub const BGEM_DOEM: AblationFlags = AblationFlags {
        bgem: true,
        doem: true,
        pcl: false,
    };
    pub const FULL: AblationFlags = AblationFlags {
        bgem: true,
        doem: true,
        pcl: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.doem && !self.bgem {
            return Err(Error::Config(
                "distractor elimination requires the background branch (doem ⇒ bgem)".into(),
            ));
        }
        if self.pcl && !self.doem {
            return Err(Error::Config(
                "contrastive learning requires distractor prototypes (pcl ⇒ doem)".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match (self.bgem, self.doem, self.pcl) {
            (false, false, false) => "baseline",
            (true, false, false) => "+bgem",
            (true, true, false) => "+bgem+doem",
            (true, true, true) => "full",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    // Optimizer and schedule.
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Episodes per optimization step.
    pub batch_size: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub poly_power: f64,

    // Data.
    pub dataset: PathBuf,
    pub fold_id: usize,
    pub fold_count: usize,
    pub crop_size: usize,
    pub k_shot: usize,
    pub augment: bool,
    /// Rotate every image of a training episode by one shared random hue
    /// angle. Breaks the class↔color binding across episodes while keeping
    /// support→query matching intact; evaluation never applies it.
    pub episode_hue: bool,

    // Model dimensions.
    pub feature_channels: usize,
    pub bg_prototype_channels: usize,
    pub hidden_channels: usize,
    pub seg_scales: Vec<usize>,

    // Losses and modules.
    pub tau: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub loss_weights: LossWeights,
    pub bank_capacity: usize,
    pub pcl_temperature: f64,
    pub include_positive_in_denominator: bool,
    pub same_class_only: bool,
    pub negative_policy: NegativePolicy,
    pub flags: AblationFlags,

    // Backbone.
    pub backbone_pretrained: bool,
    pub backbone_steps: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    pub backbone_crop: usize,
    /// Directory for cached backbone weight files (reused across runs that
    /// share the backbone config).
    pub backbone_cache: Option<PathBuf>,

    // Run control.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Save a checkpoint every N epochs (0 = final only).
    pub save_every: usize,
    /// Serialize the prototype bank into checkpoints. Off by default: a
    /// resumed run cold-starts the bank.
    pub checkpoint_bank: bool,
    /// Support-query pairs per evaluation run.
    pub eval_pairs: usize,
    /// Evaluate episodes in parallel. Batches reduce in episode order, so
    /// results are identical either way; the switch exists for debugging.
    pub parallel: bool,
}

impl TrainConfig {
    /// Desk-scale synthetic profile: 64×64 crops, C = 64 features, short
    /// schedule.
    pub fn desk_synthetic(dataset: impl Into<PathBuf>) -> TrainConfig {
        TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 20,
            episodes_per_epoch: 32,
            poly_power: 0.9,
            dataset: dataset.into(),
            fold_id: 0,
            fold_count: 2,
            crop_size: 64,
            k_shot: 1,
            augment: true,
            episode_hue: true,
            feature_channels: 64,
            bg_prototype_channels: 64,
            hidden_channels: 64,
            seg_scales: vec![1, 2, 4],
            tau: 0.5,
            epsilon: 1e-7,
            alpha: 1.0,
            loss_weights: LossWeights {
                beta: 1.0,
                lambda: 1.0,
                gamma: 0.1,
            },
            bank_capacity: 2000,
            pcl_temperature: 1.0,
            include_positive_in_denominator: false,
            same_class_only: false,
            negative_policy: NegativePolicy::DistractorObjects,
            flags: AblationFlags::FULL,
            backbone_pretrained: true,
            backbone_steps: 240,
            backbone_batch: 8,
            backbone_lr: 0.05,
            backbone_crop: 32,
            backbone_cache: None,
            seed: 0,
            out_dir: None,
            save_every: 0,
            checkpoint_bank: false,
            eval_pairs: 1000,
            parallel: true,
        }
    }

    /// Paper-scale PASCAL-style profile: lr 0.03, batch 32, weight decay
    /// 1e-4, momentum 0.9, poly power 0.9, 473 crops, 640-channel BG
    /// prototype, bank capacity 2000, 200 epochs, 1000 evaluation pairs.
    pub fn paper_pascal(dataset: impl Into<PathBuf>) -> TrainConfig {
        TrainConfig {
            base_lr: 0.03,
            batch_size: 32,
            epochs: 200,
            episodes_per_epoch: 1000,
            crop_size: 473,
            fold_count: 4,
            feature_channels: 512,
            bg_prototype_channels: 640,
            hidden_channels: 256,
            eval_pairs: 1000,
            episode_hue: false,
            ..TrainConfig::desk_synthetic(dataset)
        }
    }

    /// Paper-scale COCO-style profile: as PASCAL but 50 epochs and 4000
    /// evaluation pairs.
    pub fn paper_coco(dataset: impl Into<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: 50,
            eval_pairs: 4000,
            ..TrainConfig::paper_pascal(dataset)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if self.poly_power <= 0.0 {
            return Err(Error::Config("poly_power must be > 0".into()));
        }
        if self.k_shot == 0 {
            return Err(Error::Config("k_shot must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::Config("batch_size, epochs, episodes_per_epoch must be ≥ 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config("tau must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("epsilon must lie in (0, 0.5)".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be ≥ 0".into()));
        }
        if self.seg_scales.is_empty() {
            return Err(Error::Config("seg_scales must not be empty".into()));
        }
        if self.pcl_temperature <= 0.0 {
            return Err(Error::Config("pcl_temperature must be > 0".into()));
        }
        self.loss_weights.validate()?;
        self.flags.validate()?;
        Ok(())
    }

    /// Parse a flat `key = value` file; unknown keys are rejected. Keys not
    /// present keep the desk-scale defaults.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_with_defaults(&text)
    }

    pub fn from_str_with_defaults(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk_synthetic("");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "fold_id" => self.fold_id = num(key, value)?,
            "fold_count" => self.fold_count = num(key, value)?,
            "crop_size" => self.crop_size = num(key, value)?,
            "k_shot" => self.k_shot = num(key, value)?,
            "augment" => self.augment = num(key, value)?,
            "episode_hue" => self.episode_hue = num(key, value)?,
            "feature_channels" => self.feature_channels = num(key, value)?,
            "bg_prototype_channels" => self.bg_prototype_channels = num(key, value)?,
            "hidden_channels" => self.hidden_channels = num(key, value)?,
            "seg_scales" => {
                self.seg_scales = value
                    .split(',')
                    .map(|s| num("seg_scales", s.trim()))
                    .collect::<Result<_>>()?;
            }
            "tau" => self.tau = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.loss_weights.beta = num(key, value)?,
            "lambda" => self.loss_weights.lambda = num(key, value)?,
            "gamma" => self.loss_weights.gamma = num(key, value)?,
            "bank_capacity" => self.bank_capacity = num(key, value)?,
            "pcl_temperature" => self.pcl_temperature = num(key, value)?,
            "include_positive_in_denominator" => {
                self.include_positive_in_denominator = num(key, value)?
            }
            "same_class_only" => self.same_class_only = num(key, value)?,
            "negative_policy" => self.negative_policy = NegativePolicy::parse(value)?,
            "bgem" => self.flags.bgem = num(key, value)?,
            "doem" => self.flags.doem = num(key, value)?,
            "pcl" => self.flags.pcl = num(key, value)?,
            "backbone_pretrained" => self.backbone_pretrained = num(key, value)?,
            "backbone_steps" => self.backbone_steps = num(key, value)?,
            "backbone_batch" => self.backbone_batch = num(key, value)?,
            "backbone_lr" => self.backbone_lr = num(key, value)?,
            "backbone_crop" => self.backbone_crop = num(key, value)?,
            "backbone_cache" => self.backbone_cache = Some(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "save_every" => self.save_every = num(key, value)?,
            "checkpoint_bank" => self.checkpoint_bank = num(key, value)?,
            "eval_pairs" => self.eval_pairs = num(key, value)?,
            "parallel" => self.parallel = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical flat text form (also the checkpoint-embedded snapshot).
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("base_lr", format!("{}", self.base_lr));
        kv("momentum", format!("{}", self.momentum));
        kv("weight_decay", format!("{}", self.weight_decay));
        kv("batch_size", format!("{}", self.batch_size));
        kv("epochs", format!("{}", self.epochs));
        kv("episodes_per_epoch", format!("{}", self.episodes_per_epoch));
        kv("poly_power", format!("{}", self.poly_power));
        kv("dataset", self.dataset.display().to_string());
        kv("fold_id", format!("{}", self.fold_id));
        kv("fold_count", format!("{}", self.fold_count));
        kv("crop_size", format!("{}", self.crop_size));
        kv("k_shot", format!("{}", self.k_shot));
        kv("augment", format!("{}", self.augment));
        kv("episode_hue", format!("{}", self.episode_hue));
        kv("feature_channels", format!("{}", self.feature_channels));
        kv("bg_prototype_channels", format!("{}", self.bg_prototype_channels));
        kv("hidden_channels", format!("{}", self.hidden_channels));
        kv(
            "seg_scales",
            self.seg_scales
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("tau", format!("{}", self.tau));
        kv("epsilon", format!("{}", self.epsilon));
        kv("alpha", format!("{}", self.alpha));
        kv("beta", format!("{}", self.loss_weights.beta));
        kv("lambda", format!("{}", self.loss_weights.lambda));
        kv("gamma", format!("{}", self.loss_weights.gamma));
        kv("bank_capacity", format!("{}", self.bank_capacity));
        kv("pcl_temperature", format!("{}", self.pcl_temperature));
        kv(
            "include_positive_in_denominator",
            format!("{}", self.include_positive_in_denominator),
        );
        kv("same_class_only", format!("{}", self.same_class_only));
        kv("negative_policy", self.negative_policy.name().to_string());
        kv("bgem", format!("{}", self.flags.bgem));
        kv("doem", format!("{}", self.flags.doem));
        kv("pcl", format!("{}", self.flags.pcl));
        kv("backbone_pretrained", format!("{}", self.backbone_pretrained));
        kv("backbone_steps", format!("{}", self.backbone_steps));
        kv("backbone_batch", format!("{}", self.backbone_batch));
        kv("backbone_lr", format!("{}", self.backbone_lr));
        kv("backbone_crop", format!("{}", self.backbone_crop));
        if let Some(p) = &self.backbone_cache {
            kv("backbone_cache", p.display().to_string());
        }
        kv("seed", format!("{}", self.seed));
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.display().to_string());
        }
        kv("save_every", format!("{}", self.save_every));
        kv("checkpoint_bank", format!("{}", self.checkpoint_bank));
        kv("eval_pairs", format!("{}", self.eval_pairs));
        kv("parallel", format!("{}", self.parallel));
        s
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a(&self.to_flat_text())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.episodes_per_epoch.div_ceil(self.batch_size)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_constants() {
        let p = TrainConfig::paper_pascal("/data/voc");
        assert_eq!(p.base_lr, 0.03);
        assert_eq!(p.batch_size, 32);
        assert_eq!(p.weight_decay, 1e-4);
        assert_eq!(p.momentum, 0.9);
        assert_eq!(p.poly_power, 0.9);
        assert_eq!(p.crop_size, 473);
        assert_eq!(p.bg_prototype_channels, 640);
        assert_eq!(p.bank_capacity, 2000);
        assert_eq!(p.epochs, 200);
        assert_eq!(p.eval_pairs, 1000);
        let c = TrainConfig::paper_coco("/data/coco");
        assert_eq!(c.epochs, 50);
        assert_eq!(c.eval_pairs, 4000);
    }

    #[test]
    fn roundtrip_through_flat_text() {
        let mut cfg = TrainConfig::desk_synthetic("/tmp/ds");
        cfg.seed = 99;
        cfg.flags = AblationFlags::BGEM;
        cfg.loss_weights.gamma = 0.25;
        let text = cfg.to_flat_text();
        let parsed = TrainConfig::from_str_with_defaults(&text).unwrap();
        assert_eq!(parsed.to_flat_text(), text);
        assert_eq!(parsed.config_hash(), cfg.config_hash());
    }

    #[test]
    fn unknown_keys_and_bad_flags_rejected() {
        assert!(TrainConfig::from_str_with_defaults("bogus = 1").is_err());
        let res = TrainConfig::from_str_with_defaults("doem = true\nbgem = false\npcl = false");
        assert!(res.is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = TrainConfig::from_str_with_defaults(
            "# comment\n\nseed = 7  # trailing\nk_shot = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.k_shot, 5);
    }
}
