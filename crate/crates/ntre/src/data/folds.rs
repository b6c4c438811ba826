use crate::error::{Error, Result};

/// One cross-validation fold: the classes trained on (`base_classes`) and the
/// held-out classes evaluated on (`novel_classes`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

impl FoldSpec {
    pub fn classes_for(&self, split: Split) -> &[usize] {
        match split {
            Split::Base => &self.base_classes,
            Split::Novel => &self.novel_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    Novel,
}

/// Partition `class_list` into `fold_count` folds. Fold i holds out the i-th
/// contiguous block of classes as novel; the remainder are base classes.
/// Deterministic given the class ordering.
pub fn build_fold_splits(class_list: &[usize], fold_count: usize) -> Result<Vec<FoldSpec>> {
    if fold_count == 0 {
        return Err(Error::Config("fold_count must be ≥ 1".into()));
    }
    if class_list.is_empty() || class_list.len() % fold_count != 0 {
        return Err(Error::Config(format!(
            "class count {} is not divisible by fold count {}",
            class_list.len(),
            fold_count
        )));
    }
    let per_fold = class_list.len() / fold_count;
    let mut folds = Vec::with_capacity(fold_count);
    for fold_id in 0..fold_count {
        let start = fold_id * per_fold;
        let novel_classes: Vec<usize> = class_list[start..start + per_fold].to_vec();
        let base_classes: Vec<usize> = class_list
            .iter()
            .copied()
            .filter(|c| !novel_classes.contains(c))
            .collect();
        folds.push(FoldSpec {
            fold_id,
            base_classes,
            novel_classes,
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pascal_style_20_classes_4_folds() {
        let classes: Vec<usize> = (0..20).collect();
        let folds = build_fold_splits(&classes, 4).unwrap();
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert_eq!(f.novel_classes.len(), 5);
            assert_eq!(f.base_classes.len(), 15);
        }
        assert_eq!(folds[1].novel_classes, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn coco_style_80_classes_4_folds() {
        let classes: Vec<usize> = (0..80).collect();
        let folds = build_fold_splits(&classes, 4).unwrap();
        for f in &folds {
            assert_eq!(f.novel_classes.len(), 20);
        }
    }

    #[test]
    fn minimal_one_class_per_fold() {
        let classes: Vec<usize> = (0..4).collect();
        let folds = build_fold_splits(&classes, 4).unwrap();
        for f in &folds {
            assert_eq!(f.novel_classes.len(), 1);
            for c in &f.novel_classes {
                assert!(!f.base_classes.contains(c));
            }
        }
    }

    #[test]
    fn non_divisible_is_rejected() {
        let classes: Vec<usize> = (0..7).collect();
        assert!(build_fold_splits(&classes, 4).is_err());
    }

    #[test]
    fn folds_are_disjoint_and_exhaustive() {
        let classes: Vec<usize> = (0..12).collect();
        for f in build_fold_splits(&classes, 3).unwrap() {
            let mut all: Vec<usize> = f
                .base_classes
                .iter()
                .chain(f.novel_classes.iter())
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, classes);
            for c in &f.novel_classes {
                assert!(!f.base_classes.contains(c));
            }
        }
    }
}
