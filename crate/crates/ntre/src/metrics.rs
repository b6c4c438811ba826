//! Segmentation metrics over accumulated per-pixel confusion counts:
//! class-mean IoU, class-agnostic foreground/background IoU, and precision.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::BinaryMask;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    fn add_masks(&mut self, prediction: &BinaryMask, truth: &BinaryMask) {
        for (&p, &t) in prediction.data.iter().zip(&truth.data) {
            match (p, t) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fp += 1,
                (0, 1) => self.fn_ += 1,
                _ => self.tn += 1,
            }
        }
    }

    fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    fn iou(&self) -> f64 {
        self.tp as f64 / self.union() as f64
    }
}

/// Accumulates confusion counts per class and globally. IoU is computed over
/// the summed counts (not as a mean of per-episode IoUs).
#[derive(Debug, Default, Clone)]
pub struct ConfusionAccumulator {
    per_class: BTreeMap<usize, Counts>,
    global: Counts,
    episodes: usize,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn add(&mut self, class_id: usize, prediction: &BinaryMask, truth: &BinaryMask) -> Result<()> {
        prediction.check_shape(truth)?;
        self.per_class
            .entry(class_id)
            .or_default()
            .add_masks(prediction, truth);
        self.global.add_masks(prediction, truth);
        self.episodes += 1;
        Ok(())
    }

    /// Class-mean IoU and the per-class map. Classes whose accumulated union
    /// is zero carry no signal and are excluded with a warning.
    pub fn class_miou(&self) -> (f64, BTreeMap<usize, f64>) {
        let mut per_class = BTreeMap::new();
        for (&c, counts) in &self.per_class {
            if counts.union() == 0 {
                log::warn!("class {c}: zero accumulated union, excluded from mIoU");
                continue;
            }
            per_class.insert(c, counts.iou());
        }
        let miou = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        (miou, per_class)
    }

    /// Mean of the class-agnostic foreground IoU and background IoU.
    pub fn fb_iou(&self) -> f64 {
        let g = &self.global;
        let fg_union = g.tp + g.fp + g.fn_;
        let fg = if fg_union == 0 { 0.0 } else { g.tp as f64 / fg_union as f64 };
        // Background-as-positive counts: swap the roles.
        let bg_union = g.tn + g.fn_ + g.fp;
        let bg = if bg_union == 0 { 0.0 } else { g.tn as f64 / bg_union as f64 };
        (fg + bg) / 2.0
    }

    /// TP / (TP + FP) over all pixels; 1.0 when nothing was predicted
    /// (no false positives asserted).
    pub fn precision(&self) -> f64 {
        let denom = self.global.tp + self.global.fp;
        if denom == 0 {
            1.0
        } else {
            self.global.tp as f64 / denom as f64
        }
    }
}

fn accumulate(
    predictions: &[BinaryMask],
    truths: &[BinaryMask],
    class_ids: &[usize],
) -> Result<ConfusionAccumulator> {
    if predictions.len() != truths.len() || predictions.len() != class_ids.len() {
        return Err(Error::Shape(format!(
            "aligned lists required: {} predictions, {} truths, {} classes",
            predictions.len(),
            truths.len(),
            class_ids.len()
        )));
    }
    let mut acc = ConfusionAccumulator::new();
    for ((p, t), &c) in predictions.iter().zip(truths).zip(class_ids) {
        acc.add(c, p, t)?;
    }
    Ok(acc)
}

/// Class-mean IoU over aligned episode lists.
pub fn class_miou(
    predictions: &[BinaryMask],
    truths: &[BinaryMask],
    class_ids: &[usize],
) -> Result<(f64, BTreeMap<usize, f64>)> {
    Ok(accumulate(predictions, truths, class_ids)?.class_miou())
}

/// Class-agnostic foreground/background IoU over aligned episode lists.
pub fn fb_iou(predictions: &[BinaryMask], truths: &[BinaryMask]) -> Result<f64> {
    let ids = vec![0usize; predictions.len()];
    Ok(accumulate(predictions, truths, &ids)?.fb_iou())
}

/// Pixel precision over aligned episode lists.
pub fn precision(predictions: &[BinaryMask], truths: &[BinaryMask]) -> Result<f64> {
    let ids = vec![0usize; predictions.len()];
    Ok(accumulate(predictions, truths, &ids)?.precision())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, mut pred: impl FnMut(usize, usize) -> bool) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if pred(y, x) {
                    m.set(y, x, 1);
                }
            }
        }
        m
    }

    #[test]
    fn perfect_and_disjoint_predictions() {
        let t = mask(4, 4, |y, _| y < 2);
        let (miou, _) = class_miou(&[t.clone()], &[t.clone()], &[0]).unwrap();
        assert_eq!(miou, 1.0);
        assert_eq!(fb_iou(&[t.clone()], &[t.clone()]).unwrap(), 1.0);
        assert_eq!(precision(&[t.clone()], &[t.clone()]).unwrap(), 1.0);

        let disjoint = mask(4, 4, |y, _| y >= 2);
        let (miou, _) = class_miou(&[disjoint.clone()], &[t.clone()], &[0]).unwrap();
        assert_eq!(miou, 0.0);
    }

    #[test]
    fn union_with_equal_area_false_positives_is_half() {
        // Truth: left half. Prediction: truth plus an equal-area disjoint
        // false-positive region -> IoU = |truth| / (2|truth|) = 0.5.
        let truth = mask(4, 4, |_, x| x < 2);
        let pred = mask(4, 4, |_, _| true);
        let (miou, per_class) = class_miou(&[pred], &[truth], &[3]).unwrap();
        assert_eq!(miou, 0.5);
        assert_eq!(per_class[&3], 0.5);
    }

    #[test]
    fn fb_iou_all_foreground_vs_half() {
        // All-foreground prediction vs half-foreground truth:
        // FG IoU = 0.5, BG IoU = 0 -> 0.25.
        let truth = mask(4, 4, |y, _| y < 2);
        let pred = mask(4, 4, |_, _| true);
        assert_eq!(fb_iou(&[pred], &[truth]).unwrap(), 0.25);
    }

    #[test]
    fn precision_degenerate_and_half() {
        let truth = mask(2, 2, |y, x| y == 0 && x == 0);
        let empty = mask(2, 2, |_, _| false);
        assert_eq!(precision(&[empty], &[truth.clone()]).unwrap(), 1.0);

        // 2 TP + 2 FP.
        let truth = mask(2, 2, |y, _| y == 0);
        let pred = mask(2, 2, |_, x| x == 0);
        let p = precision(&[pred], &[truth]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn metrics_match_confusion_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        let mut classes = Vec::new();
        for i in 0..40 {
            preds.push(mask(8, 8, |_, _| rng.gen_bool(0.4)));
            truths.push(mask(8, 8, |_, _| rng.gen_bool(0.4)));
            classes.push(i % 3);
        }
        let (miou, per_class) = class_miou(&preds, &truths, &classes).unwrap();
        let fb = fb_iou(&preds, &truths).unwrap();
        let pr = precision(&preds, &truths).unwrap();

        // Independent confusion-count oracle.
        let mut by_class: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for ((p, t), &c) in preds.iter().zip(&truths).zip(&classes) {
            let e = by_class.entry(c).or_default();
            for i in 0..64 {
                match (p.data[i], t.data[i]) {
                    (1, 1) => {
                        e.0 += 1;
                        tp += 1;
                    }
                    (1, 0) => {
                        e.1 += 1;
                        fp += 1;
                    }
                    (0, 1) => {
                        e.2 += 1;
                        fn_ += 1;
                    }
                    _ => tn += 1,
                }
            }
        }
        let mut want_miou = 0.0;
        for (c, (ctp, cfp, cfn)) in &by_class {
            let iou = *ctp as f64 / (ctp + cfp + cfn) as f64;
            assert!((per_class[c] - iou).abs() < 1e-12);
            want_miou += iou;
        }
        want_miou /= by_class.len() as f64;
        assert!((miou - want_miou).abs() < 1e-12);

        let want_fb = (tp as f64 / (tp + fp + fn_) as f64 + tn as f64 / (tn + fn_ + fp) as f64) / 2.0;
        assert!((fb - want_fb).abs() < 1e-12);
        assert!((pr - tp as f64 / (tp + fp) as f64).abs() < 1e-12);
    }

    #[test]
    fn adding_false_positives_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..20 {
            let truth = mask(6, 6, |_, _| rng.gen_bool(0.3));
            let pred = mask(6, 6, |_, _| rng.gen_bool(0.3));
            let mut worse = pred.clone();
            // Flip one background-truth pixel to a prediction.
            let candidates: Vec<usize> = (0..36)
                .filter(|&i| truth.data[i] == 0 && pred.data[i] == 0)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            worse.data[candidates[rng.gen_range(0..candidates.len())]] = 1;
            let p0 = precision(&[pred.clone()], &[truth.clone()]).unwrap();
            let p1 = precision(&[worse.clone()], &[truth.clone()]).unwrap();
            assert!(p1 <= p0);
            let (i0, _) = class_miou(&[pred], &[truth.clone()], &[0]).unwrap();
            let (i1, _) = class_miou(&[worse], &[truth], &[0]).unwrap();
            assert!(i1 <= i0);
        }
    }

    #[test]
    fn zero_union_class_excluded() {
        let empty = mask(4, 4, |_, _| false);
        let truth = mask(4, 4, |y, _| y == 0);
        let pred = mask(4, 4, |y, _| y == 0);
        let (miou, per_class) =
            class_miou(&[pred, empty.clone()], &[truth, empty], &[0, 7]).unwrap();
        assert_eq!(miou, 1.0);
        assert!(!per_class.contains_key(&7));
    }
}
