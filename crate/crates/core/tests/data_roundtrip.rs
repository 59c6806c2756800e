use std::collections::HashSet;

use ovseg::data::{generate, load_coco_panoptic_dir, save_coco_panoptic, GeneratorConfig, Split};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn write_then_read_is_identity(seed in any::<u64>(), count in 1usize..5) {
        let data = generate(&GeneratorConfig::default(), Split::Eval, seed, count).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_coco_panoptic(&data, dir.path()).unwrap();
        let back = load_coco_panoptic_dir(dir.path()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn generator_is_deterministic_and_splits_disjoint(seed in any::<u64>()) {
        let g = GeneratorConfig::default();
        let a = generate(&g, Split::Train, seed, 6).unwrap();
        let b = generate(&g, Split::Train, seed, 6).unwrap();
        prop_assert_eq!(&a, &b);
        let train: HashSet<Vec<u8>> = a.samples.iter().map(|s| s.image.data.clone()).collect();
        for split in [Split::Eval, Split::SeenEval] {
            let other = generate(&g, split, seed, 6).unwrap();
            for s in &other.samples {
                prop_assert!(!train.contains(&s.image.data));
            }
        }
    }
}

#[test]
fn seen_eval_uses_training_colours_only() {
    let g = GeneratorConfig::default();
    let data = generate(&g, Split::SeenEval, 5, 32).unwrap();
    let train_ids: HashSet<usize> = g.train_category_ids().into_iter().collect();
    for s in &data.samples {
        for c in s.category_ids() {
            assert!(train_ids.contains(&c), "category {c} in seen split");
        }
    }
    let mixed = generate(&g, Split::Eval, 5, 64).unwrap();
    let held_out = mixed.samples.iter().flat_map(|s| s.category_ids()).filter(|c| !train_ids.contains(c)).count();
    assert!(held_out > 0);
}
