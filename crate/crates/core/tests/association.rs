mod common;

use calibkit::association::{
    individual_compatibility, jcbb_with, joint_compatibility, JcbbOptions, NoiseModel, Observation, DEFAULT_ALPHA,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_exhaustive_search_with_and_without_pruning() {
    let noise = NoiseModel::gating_default();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for scene in 0..150 {
        let (preds, obs) = common::random_association_scene(&mut rng);
        let (k, l) = common::exhaustive_jcbb(&preds, &obs, &noise, DEFAULT_ALPHA);
        let pruned = jcbb_with(&preds, &obs, &noise, &JcbbOptions::default()).unwrap();
        let full = jcbb_with(&preds, &obs, &noise, &JcbbOptions { prune: false, ..JcbbOptions::default() }).unwrap();
        assert_eq!(pruned.set.n_pair, k, "scene {scene}");
        assert_eq!(full.set.n_pair, k, "scene {scene}");
        if !obs.is_empty() {
            assert!((pruned.set.l - l).abs() < 1e-9, "scene {scene}: {} vs {l}", pruned.set.l);
            assert!((full.set.l - pruned.set.l).abs() < 1e-9, "scene {scene}");
        }
        assert!(pruned.nodes <= full.nodes);
    }
}

#[test]
fn works_with_filter_noise_too() {
    let noise = NoiseModel::filter_default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let (preds, obs) = common::random_association_scene(&mut rng);
        let (k, l) = common::exhaustive_jcbb(&preds, &obs, &noise, DEFAULT_ALPHA);
        let got = jcbb_with(&preds, &obs, &noise, &JcbbOptions::default()).unwrap().set;
        assert_eq!(got.n_pair, k);
        if k > 0 {
            assert!((got.l - l).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn result_is_gated_and_injective(seed in any::<u64>()) {
        let noise = NoiseModel::gating_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, obs) = common::random_association_scene(&mut rng);
        let set = jcbb_with(&preds, &obs, &noise, &JcbbOptions::default()).unwrap().set;
        prop_assert_eq!(set.assignments.len(), obs.len());
        let mut labels: Vec<_> = set.pairs().map(|(_, l)| l).collect();
        for (i, label) in set.pairs() {
            let p = preds.iter().find(|p| p.label == label).unwrap();
            prop_assert!(individual_compatibility(&obs[i], p, &noise, DEFAULT_ALPHA).unwrap().compatible);
        }
        if set.n_pair > 0 {
            let jc = joint_compatibility(&set.assignments, &preds, &obs, &noise, DEFAULT_ALPHA).unwrap();
            prop_assert!(jc.istrue);
            prop_assert!((jc.d2 - set.d2).abs() < 1e-9 * (1.0 + jc.d2));
        }
        labels.sort();
        let before = labels.len();
        labels.dedup();
        prop_assert_eq!(labels.len(), before);
    }

    #[test]
    fn permuting_observations_permutes_the_answer(seed in any::<u64>(), rot in 1usize..6) {
        let noise = NoiseModel::gating_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, obs) = common::random_association_scene(&mut rng);
        prop_assume!(obs.len() > 1);
        let a = jcbb_with(&preds, &obs, &noise, &JcbbOptions::default()).unwrap().set;
        let mut shuffled: Vec<Observation> = obs.clone();
        shuffled.rotate_left(rot % obs.len());
        let shuffled: Vec<Observation> =
            shuffled.into_iter().enumerate().map(|(index, o)| Observation { index, pixel: o.pixel }).collect();
        let b = jcbb_with(&preds, &shuffled, &noise, &JcbbOptions::default()).unwrap().set;
        prop_assert_eq!(a.n_pair, b.n_pair);
        prop_assert!((a.l - b.l).abs() < 1e-9);
        // Random continuous scenes have a unique optimum, so assignments agree per observation.
        for h in &b.assignments {
            let original = (h.obs_index + rot % obs.len()) % obs.len();
            let ha = a.assignments.iter().find(|x| x.obs_index == original).unwrap();
            prop_assert_eq!(ha.pred_label, h.pred_label);
        }
    }
}
