use schedsamp_web::{beam_demo_json, exposure_demo_json, schedule_curve_json};

#[test]
fn schedule_curve_samples_endpoints() {
    let v = schedule_curve_json(r#"{"type":"exponential","k":0.99}"#, 100, 3).unwrap();
    let s = v["samples"].as_array().unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0][0], 0);
    assert_eq!(s[0][1], 1.0);
    assert_eq!(s[2][0], 100);
    assert!((s[2][1].as_f64().unwrap() - 0.366032).abs() < 1e-6);
    assert_eq!(v["limit"], 0.0);
}

#[test]
fn schedule_curve_rejects_bad_input() {
    assert!(schedule_curve_json("{}", 10, 5).is_err());
    assert!(schedule_curve_json(r#"{"type":"exponential","k":1.5}"#, 10, 5).is_err());
}

#[test]
fn wide_beam_finds_optimum() {
    for seed in 0..5 {
        let v = beam_demo_json(seed, 3, 4, 81).unwrap();
        assert_eq!(v["beam_found_optimum"], true);
        assert_eq!(v["beam"][0]["logprob"], v["exhaustive"]["logprob"]);
    }
    let v = beam_demo_json(1, 3, 4, 1).unwrap();
    assert_eq!(v["beam"][0]["tokens"], v["greedy"]);
}

#[test]
fn exposure_demo_reports_metrics() {
    let v = exposure_demo_json(1, 1.0, 1.0, 2).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 2);
    let next = v["test_next_step_fer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&next));
    let w = exposure_demo_json(1, 0.5, 0.0, 2).unwrap();
    let eps: Vec<f64> = w["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["epsilon"].as_f64().unwrap())
        .collect();
    assert!(eps[0] < 0.5 && eps[0] > eps[1] && eps[1] >= 0.0, "{eps:?}");
}
