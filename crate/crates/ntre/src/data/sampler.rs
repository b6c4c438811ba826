use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

use super::folds::{FoldSpec, Split};
use super::store::Dataset;
use super::types::Episode;

/// Sample one episode: a class drawn uniformly from the split's classes with
/// at least k+1 samples, then k supports plus one query drawn uniformly
/// without replacement. Deterministic given the RNG state.
pub fn sample_episode(
    dataset: &Dataset,
    fold: &FoldSpec,
    split: Split,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("k must be ≥ 1".into()));
    }
    let eligible: Vec<usize> = fold
        .classes_for(split)
        .iter()
        .copied()
        .filter(|&c| dataset.samples_of_class(c).len() >= k + 1)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(format!(
            "no class in the {:?} split has ≥ {} samples",
            split,
            k + 1
        )));
    }
    let class_id = eligible[rng.gen_range(0..eligible.len())];
    let mut pool: Vec<usize> = dataset.samples_of_class(class_id).to_vec();
    pool.shuffle(rng);
    let chosen = &pool[..k + 1];
    let support = chosen[..k]
        .iter()
        .map(|&i| dataset.samples[i].pair_for(class_id))
        .collect::<Result<Vec<_>>>()?;
    let query = dataset.samples[chosen[k]].pair_for(class_id)?;
    Episode::new(support, query)
}

#[cfg(test)]
mod tests {
    use super::super::folds::build_fold_splits;
    use super::super::synth::{generate_synthetic_dataset, SyntheticSpec};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_classes: 4,
            images_per_class: 8,
            image_size: 32,
            seed: 21,
            ..SyntheticSpec::default()
        };
        generate_synthetic_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let (_dir, ds) = small_dataset();
        let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
        let a = sample_episode(&ds, &folds[0], Split::Base, 1, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        let b = sample_episode(&ds, &folds[0], Split::Base, 1, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        assert_eq!(a.class_id, b.class_id);
        assert_eq!(a.query.sample_id, b.query.sample_id);
        assert_eq!(a.support[0].sample_id, b.support[0].sample_id);
    }

    #[test]
    fn five_shot_episode_has_five_supports() {
        let (_dir, ds) = small_dataset();
        let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
        let ep = sample_episode(&ds, &folds[0], Split::Base, 5, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(ep.k(), 5);
        assert!(ep.support.iter().all(|s| s.class_id == ep.class_id));
        assert!(ep.support.iter().all(|s| s.sample_id != ep.query.sample_id));
    }

    #[test]
    fn novel_split_never_yields_base_classes() {
        let (_dir, ds) = small_dataset();
        let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let ep = sample_episode(&ds, &folds[1], Split::Novel, 1, &mut rng).unwrap();
            assert!(folds[1].novel_classes.contains(&ep.class_id));
            assert!(!folds[1].base_classes.contains(&ep.class_id));
        }
    }

    #[test]
    fn oversized_k_is_rejected() {
        let (_dir, ds) = small_dataset();
        let folds = build_fold_splits(&ds.class_ids(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_episode(&ds, &folds[0], Split::Base, 8, &mut rng).is_err());
    }
}
