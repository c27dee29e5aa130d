use slam_mhe::harness::{run_experiment, ExperimentConfig, LandmarkInit, Method, ScenarioSpec};
use slam_mhe::simulator::{CircularParams, NoiseSpec};

fn two_landmark_config(method: Method) -> ExperimentConfig {
    // both landmarks inside the sensor range for the whole orbit
    let p = CircularParams {
        num_landmarks: 2,
        landmark_radius: 0.5,
        sensor_range: 3.0,
        noise: NoiseSpec::zero(),
        steps: 100,
        ..Default::default()
    };
    let mut cfg = ExperimentConfig::new(ScenarioSpec::Circular(p), method);
    cfg.record_timing = false;
    cfg
}

fn final_errors(init: LandmarkInit) -> Vec<(f64, f64)> {
    [Method::Coupled, Method::Decoupled]
        .into_iter()
        .map(|method| {
            let mut cfg = two_landmark_config(method);
            cfg.landmark_init = init;
            let out = run_experiment(&cfg).unwrap();
            assert!(out.log.frames.iter().all(|f| f.visible.iter().all(|v| *v)));
            (out.summary.final_ego_err, out.summary.final_avg_lm_err)
        })
        .collect()
}

#[test]
fn coupled_and_decoupled_agree_with_exact_prior() {
    for (ego, lm) in final_errors(LandmarkInit::Truth) {
        assert!(ego < 1e-6 && lm < 1e-6, "ego {ego}, landmark {lm}");
    }
}

#[test]
fn coupled_and_decoupled_converge_from_origin() {
    for (ego, lm) in final_errors(LandmarkInit::Origin) {
        assert!(ego < 1e-4 && lm < 1e-3, "ego {ego}, landmark {lm}");
    }
}

#[test]
fn coupled_tracks_report_every_step() {
    let out = run_experiment(&two_landmark_config(Method::Coupled)).unwrap();
    assert_eq!(out.tracks.len(), 200);
    assert!(out.tracks.iter().all(|r| r.gated));
    assert_eq!(out.summary.informativity, vec![100, 100]);
}
