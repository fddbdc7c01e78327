use fedreft_wasm::ops;
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn trace_starts_at_mean_and_ends_at_median() {
    let v = parse(ops::weiszfeld_trace("[[0,0],[4,0],[0,4],[10,10]]").unwrap());
    let it = v["iterates"].as_array().unwrap();
    assert_eq!(it[0], v["mean"]);
    assert_eq!(it.last().unwrap(), &v["median"]);
    assert_eq!(it.len(), v["objective"].as_array().unwrap().len());
    let obj: Vec<f64> = v["objective"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(obj.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(obj.last().unwrap() < &v["mean_objective"].as_f64().unwrap());
}

#[test]
fn trace_rejects_bad_input() {
    assert!(ops::weiszfeld_trace("[]").is_err());
    assert!(ops::weiszfeld_trace("[[1,2,3]]").is_err());
    assert!(ops::weiszfeld_trace("nope").is_err());
}

#[test]
fn field_arrows_are_parallel_to_r() {
    let req = r#"{"theta": 0.7, "w": [0.3, -1.2], "b": 0.5, "extent": 2.0, "steps": 9}"#;
    let v = parse(ops::loreft_field(req).unwrap());
    let r: Vec<f64> = v["r"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let samples = v["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 81);
    for s in samples {
        let d: Vec<f64> = s["delta"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!((d[0] * r[1] - d[1] * r[0]).abs() < 1e-12);
    }
    assert!(ops::loreft_field(r#"{"theta": 0, "w": [1, 0], "b": 0, "extent": 1, "steps": 1}"#).is_err());
}

#[test]
fn comparison_returns_three_curves() {
    let v = parse(ops::compare_aggregators(r#"{"seed": 1, "rounds": 2, "examples_per_client": 100}"#).unwrap());
    let curves = v.as_array().unwrap();
    let names: Vec<&str> = curves.iter().map(|c| c["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["abm_geomedian", "abm_mean", "fedavg"]);
    for c in curves {
        assert_eq!(c["accuracy"].as_array().unwrap().len(), 2);
    }
    assert!(ops::compare_aggregators(r#"{"seed": 1, "rounds": 0}"#).is_err());
}
