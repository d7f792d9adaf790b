use std::collections::BTreeSet;

use partgda::dataset::{generate_synthetic, load_dataset, make_split, save_dataset, SyntheticFamily, SyntheticShapeSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FAMILIES: [SyntheticFamily; 3] = [SyntheticFamily::Lollipop, SyntheticFamily::Tablet, SyntheticFamily::TripodLamp];

#[test]
fn ten_percent_of_a_hundred_is_labeled() {
    let set = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::Tablet, 32, 1), 100).unwrap();
    let (l, u, m) = make_split(&set, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!((l.len(), u.len()), (10, 90));
    assert_eq!((m.labeled.len(), m.unlabeled.len()), (10, 90));
}

#[test]
fn mixed_directory_restores_labeled_flags() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::Lollipop, 48, 4), 7).unwrap();
    let (l, u, split) = make_split(&set, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    save_dataset(dir.path(), &l, &u, Some(9), None).unwrap();
    let (l2, u2, m) = load_dataset(dir.path()).unwrap();
    let labeled: BTreeSet<String> = m.samples.iter().filter(|e| e.labeled).map(|e| e.id.clone()).collect();
    let unlabeled: BTreeSet<String> = m.samples.iter().filter(|e| !e.labeled).map(|e| e.id.clone()).collect();
    assert_eq!(labeled, split.labeled.iter().cloned().collect());
    assert_eq!(unlabeled, split.unlabeled.iter().cloned().collect());
    assert!(l2.samples.iter().all(|s| s.mask.is_labeled()));
    assert_eq!(u2.ids(), u.ids());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_masks_are_valid_with_every_part_present(family in 0usize..3, seed in any::<u64>(), n in 16usize..200) {
        let set = generate_synthetic(&SyntheticShapeSpec::new(FAMILIES[family], n, seed), 3).unwrap();
        for s in &set.samples {
            prop_assert!(s.mask.is_labeled());
            prop_assert_eq!(s.mask.len(), n);
            prop_assert!(s.mask.counts().iter().all(|&k| k > 0));
            let m = s.mask.matrix();
            prop_assert!(m.rows().into_iter().all(|r| r.sum() == 1.0));
        }
    }

    #[test]
    fn generation_is_a_pure_function(family in 0usize..3, seed in any::<u64>()) {
        let spec = SyntheticShapeSpec::new(FAMILIES[family], 40, seed);
        prop_assert_eq!(generate_synthetic(&spec, 4).unwrap(), generate_synthetic(&spec, 4).unwrap());
        let longer = generate_synthetic(&spec, 6).unwrap();
        prop_assert_eq!(&longer.samples[..4], &generate_synthetic(&spec, 4).unwrap().samples[..]);
    }

    #[test]
    fn split_is_a_partition(count in 2usize..40, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let set = generate_synthetic(&SyntheticShapeSpec::new(SyntheticFamily::Lollipop, 16, 1), count).unwrap();
        if let Ok((l, u, m)) = make_split(&set, fraction, &mut ChaCha8Rng::seed_from_u64(seed)) {
            let a: BTreeSet<String> = m.labeled.iter().cloned().collect();
            let b: BTreeSet<String> = m.unlabeled.iter().cloned().collect();
            prop_assert!(a.is_disjoint(&b));
            let all: BTreeSet<String> = set.ids().into_iter().collect();
            prop_assert_eq!(a.union(&b).cloned().collect::<BTreeSet<_>>(), all);
            prop_assert_eq!(l.ids().into_iter().collect::<BTreeSet<_>>(), a);
            prop_assert_eq!(u.ids().into_iter().collect::<BTreeSet<_>>(), b);
        }
    }
}
