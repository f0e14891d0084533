use calibkit_web::{
    associate, associate_json, converge, converge_json, instrument_view, instrument_view_json, AssociateParams,
    ConvergeParams, ViewParams,
};
use calibkit::pipeline::EstimatorKind;
use calibkit::simulator::DisturbanceLevel;

#[test]
fn view_prunes_hidden_sides_without_losing_visible_keypoints() {
    let report = instrument_view(&ViewParams::default()).unwrap();
    assert_eq!(report.keypoints.len(), 12);
    assert!(report.verdict.is_some());
    assert!(report.removed > 0);
    assert!(report.keypoints.iter().filter(|k| k.visible).all(|k| k.kept));
    let roll = report.silhouettes.iter().find(|s| s.segment == "roll").unwrap();
    for line in [roll.upper, roll.lower, roll.center].into_iter().flatten() {
        for [u, v] in line {
            assert!((-1e-6..=report.image[0] + 1e-6).contains(&u) && (-1e-6..=report.image[1] + 1e-6).contains(&v));
        }
    }
}

#[test]
fn association_at_the_truth_is_correct() {
    let report = associate(&AssociateParams { outliers: 3, ..AssociateParams::default() }).unwrap();
    assert_eq!(report.mismatched, 0);
    let labeled = report.observations.iter().filter(|o| o.truth.is_some()).count();
    assert!(labeled > 0);
    assert_eq!(report.n_pair, labeled);
    assert_eq!(report.observations.iter().filter(|o| o.truth.is_none()).count(), 3);
    assert!(report.predictions.iter().any(|p| !p.kept));
}

#[test]
fn convergence_run_returns_one_trace_per_estimator() {
    let params = ConvergeParams {
        frames: 120,
        estimators: vec![EstimatorKind::Ekf, EstimatorKind::Aekf, EstimatorKind::Pf],
        particles: 100,
        ..ConvergeParams::default()
    };
    let report = converge(&params).unwrap();
    assert_eq!(report.traces.len(), 3);
    for t in &report.traces {
        assert_eq!(t.dt_mm.len(), 120);
        assert!(t.dt_mm.iter().all(|v| v.is_finite()));
    }
    let ekf = &report.traces[0];
    assert!(ekf.dt_mm[119] < ekf.dt_mm[0]);
}

#[test]
fn disturbed_run_spikes_on_schedule() {
    let params = ConvergeParams {
        frames: 60,
        estimators: vec![EstimatorKind::Ekf],
        disturbance: Some(DisturbanceLevel::High),
        ..ConvergeParams::default()
    };
    let t = &converge(&params).unwrap().traces[0];
    assert!(t.dt_mm[25] > t.dt_mm[24]);
}

#[test]
fn json_entry_points_validate_parameters() {
    assert!(calibkit_web::instrument_view_json("").is_ok());
    assert!(calibkit_web::associate_json(r#"{"outliers": 1}"#).is_ok());
    assert!(calibkit_web::associate_json(r#"{"outlires": 1}"#).unwrap_err().contains("bad parameters"));
    assert!(calibkit_web::converge_json(r#"{"frames": 0}"#).is_err());
    assert!(calibkit_web::converge_json(r#"{"frames": 20, "estimators": ["ukf"]}"#).is_err());
    let v: serde_json::Value = serde_json::from_str(&calibkit_web::converge_json(r#"{"frames": 10}"#).unwrap()).unwrap();
    assert_eq!(v["traces"][0]["estimator"], "ekf");
}

#[test]
fn page_parameter_shapes_are_accepted() {
    let q = "[0.0, 0.3, 0.1, 0.0, 0.0, 0.0]";
    let e = "[0.01, 0.0, 0.0, 0.002, 0.0, 0.0]";
    instrument_view_json(&format!(r#"{{"q": {q}, "error": {e}, "gamma": 100}}"#)).unwrap();
    associate_json(&format!(
        r#"{{"q": {q}, "error": {e}, "seed": 3, "pixel_noise": 1.5, "outliers": 4, "visibility": false}}"#
    ))
    .unwrap();
    let out = converge_json(
        r#"{"seed": 1, "frames": 20, "scene": "fast", "disturbance": null, "gating": "fixed",
            "visibility": true, "estimators": ["ekf", "pnp"]}"#,
    )
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["traces"].as_array().unwrap().len(), 2);
    converge_json(r#"{"frames": 10, "disturbance": "low", "estimators": ["pf"], "particles": 50}"#).unwrap();
}
