mod common;

use calibkit::association::NoiseModel;
use calibkit::estimators::{predict_keypoints, Filter, FilterConfig, FilterKind, MatchedPair, MeasurementContext};
use calibkit::geometry::CalibrationState;
use calibkit::pipeline::default_initial_covariance;
use calibkit::simulator::{FrameRecord, SceneConfig, SceneSpec};
use calibkit::Vec6;
use proptest::prelude::*;

fn noiseless_scene(seed: u64, frames: usize) -> SceneConfig {
    SceneSpec {
        seed,
        frame_count: frames,
        pixel_noise_sigma: 0.0,
        outlier_count: 0,
        dropout_probability: 0.0,
        initial_error_deg: 1.0,
        initial_error_m: 0.01,
        ..SceneSpec::default()
    }
    .build()
    .unwrap()
}

/// Pairs from the generating labels, predicted at `x`.
fn exact_pairs(scene: &SceneConfig, frame: &FrameRecord, x: &Vec6) -> Vec<MatchedPair> {
    let preds = predict_keypoints(x, &scene.model, &frame.q, &scene.t_init, &scene.intrinsics).unwrap();
    frame
        .labels
        .iter()
        .zip(&frame.observations)
        .filter_map(|(l, o)| preds.iter().find(|p| Some(p.label) == *l).map(|p| MatchedPair::new(p, *o)))
        .collect()
}

/// RMS of the innovations the filter sees over frames 200..250 with exact associations.
fn late_rms(config: FilterConfig, scene: &SceneConfig, initial: CalibrationState) -> f64 {
    let frames = common::frames(scene);
    let mut filter = Filter::new(config, initial).unwrap();
    let ctx = MeasurementContext { t_init: scene.t_init, k: scene.intrinsics };
    let (mut ss, mut n) = (0.0, 0usize);
    for f in &frames {
        let pairs = exact_pairs(scene, f, &filter.state().x);
        if f.index >= 200 {
            ss += pairs.iter().map(|p| p.innovation.norm_squared()).sum::<f64>();
            n += pairs.len();
        }
        filter.update(&pairs, &ctx);
    }
    (ss / n as f64).sqrt()
}

fn from_zero() -> CalibrationState {
    CalibrationState::new(Vec6::zeros(), default_initial_covariance())
}

#[test]
fn ekf_and_aekf_are_consistent_on_noiseless_data() {
    for seed in 1..=4 {
        let scene = noiseless_scene(seed, 250);
        for kind in [FilterKind::Ekf, FilterKind::Aekf] {
            let rms = late_rms(FilterConfig { kind, ..FilterConfig::default() }, &scene, from_zero());
            assert!(rms < 0.1, "{kind:?} seed {seed}: {rms} px");
        }
    }
}

#[test]
fn pf_is_consistent_on_noiseless_data_from_a_tight_prior() {
    for seed in [7, 8] {
        let scene = noiseless_scene(seed, 250);
        let offset = Vec6::new(0.002, -0.002, 0.001, 0.0005, -0.0005, 0.0003);
        let prior = CalibrationState::new(scene.true_state + offset, NoiseModel::filter_default().sigma_e);
        let config = FilterConfig { kind: FilterKind::Pf, seed, ..FilterConfig::default() };
        let rms = late_rms(config, &scene, prior);
        assert!(rms < 2.0, "seed {seed}: {rms} px");
    }
}

/// The pass-through covariance keeps the particle spread at the prior's, so only the
/// sample-covariance option narrows in on the truth from a wide prior.
#[test]
fn pf_with_sample_covariance_converges_from_a_wide_prior() {
    let scene = noiseless_scene(7, 250);
    let config = FilterConfig { kind: FilterKind::Pf, seed: 7, pf_adapt_cov: true, ..FilterConfig::default() };
    let rms = late_rms(config, &scene, from_zero());
    assert!(rms < 2.0, "{rms} px");
}

#[test]
fn filters_are_deterministic() {
    let scene = noiseless_scene(3, 60);
    let frames = common::frames(&scene);
    let ctx = MeasurementContext { t_init: scene.t_init, k: scene.intrinsics };
    for kind in [FilterKind::Ekf, FilterKind::Aekf, FilterKind::Pf] {
        let trace = || {
            let config = FilterConfig { kind, seed: 9, particle_count: 200, ..FilterConfig::default() };
            let mut filter =
                Filter::new(config, CalibrationState::new(Vec6::zeros(), default_initial_covariance())).unwrap();
            frames
                .iter()
                .map(|f| {
                    let pairs = exact_pairs(&scene, f, &filter.state().x);
                    filter.update(&pairs, &ctx).state
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(trace(), trace(), "{kind:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ekf_covariance_stays_symmetric_psd(seed in 0u64..1000, sigma_v in 0.5f64..100.0, scale in 1e-9f64..1e-2) {
        let scene = SceneSpec { seed, frame_count: 30, ..SceneSpec::default() }.build().unwrap();
        let frames = common::frames(&scene);
        let ctx = MeasurementContext { t_init: scene.t_init, k: scene.intrinsics };
        let mut noise = NoiseModel::filter_default();
        noise.sigma_e *= scale / 1e-6;
        noise.sigma_v *= sigma_v / 25.0;
        for kind in [FilterKind::Ekf, FilterKind::Aekf] {
            let config = FilterConfig { kind, noise: noise.clone(), ..FilterConfig::default() };
            let mut filter =
                Filter::new(config, CalibrationState::new(Vec6::zeros(), default_initial_covariance())).unwrap();
            for f in &frames {
                let pairs = exact_pairs(&scene, f, &filter.state().x);
                let s = filter.update(&pairs, &ctx).state.sigma_x;
                prop_assert!((s - s.transpose()).abs().max() <= 1e-12 * s.abs().max().max(1e-300));
                let min = s.symmetric_eigen().eigenvalues.min();
                prop_assert!(min >= -1e-9, "{:?}: min eigenvalue {}", kind, min);
            }
        }
    }
}
