use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedreft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedreft"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MINIMAL: &str = r#"{
  "clients": 3,
  "rounds": 2,
  "aggregation": "abm_geomedian",
  "seed": 4,
  "data": {"design": "DT", "num_tasks": 3, "examples_per_client": 120},
  "optimizer": {"lr": 0.01, "weight_decay": 0.0, "epochs": 1, "batch_size": 16}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    let o = fedreft(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    assert!(stderr(&o).contains("round   1"));
    let jsonl = fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(csv.starts_with("client,task,final_accuracy,alpha_trajectory,total_uplink_bytes"));
    assert_eq!(csv.lines().count(), 5);

    // the resolved config reproduces the run on its own
    let again = dir.path().join("again");
    let o = fedreft(&[
        "run",
        "--config",
        out.join("config.resolved.json").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read(again.join("rounds.jsonl")).unwrap(), jsonl.as_bytes());
}

#[test]
fn checkpoints_and_dataset_dump_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    let o = fedreft(&[
        "run", "--config", &cfg, "--out", out.to_str().unwrap(), "--rounds", "1", "--checkpoints", "--dump-data",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..3 {
        let c = fedreft_core::checkpoint::load(&out.join(format!("client-{k}.ckpt"))).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.bundle.params().len(), 2);
    }
    let ds = fedreft_core::synthdata::load(&fs::read_to_string(out.join("dataset.txt")).unwrap()).unwrap();
    assert_eq!(ds.clients.len(), 3);
    assert_eq!(ds.clients[0].train.len(), 72);
}

#[test]
fn seed_override_is_deterministic_and_rounds_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = fedreft(&[
            "run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "17", "--rounds", "1",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((
            fs::read(out.join("rounds.jsonl")).unwrap(),
            fs::read(out.join("summary.csv")).unwrap(),
        ));
        let resolved = fs::read_to_string(out.join("config.resolved.json")).unwrap();
        assert!(resolved.contains("\"seed\": 17"));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(String::from_utf8_lossy(&outputs[0].0).lines().count(), 1);
}

#[test]
fn config_errors_exit_one_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = fedreft(&["run", "--config", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"));

    let cfg = write_config(dir.path(), &MINIMAL.replace("\"rounds\": 2", "\"rounds\": 0"));
    let o = fedreft(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rounds: must be >= 1"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "{\"clients\": 3,");
    let o = fedreft(&["run", "--config", &cfg, "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &MINIMAL.replace("\"lr\": 0.01", "\"lr\": 1e300"));
    let o = fedreft(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_pass_fail_and_guard() {
    let o = fedreft(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    for g in ["W", "R", "b", "psi"] {
        assert!(stdout(&o).lines().any(|l| l.starts_with(g)), "{}", stdout(&o));
    }
    let o = fedreft(&["gradcheck", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(3));
    let o = fedreft(&["gradcheck", "--d", "1000"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("d <= 32"));
}

fn points_file(dir: &Path, text: &str) -> String {
    let p = dir.join("pts.txt");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn first_vector(out: &str, tag: &str) -> Vec<f64> {
    let line = out.lines().find(|l| l.starts_with(tag)).unwrap();
    let inner = line[line.find('(').unwrap() + 1..line.rfind(')').unwrap()].to_string();
    inner.split(", ").map(|t| t.parse().unwrap()).collect()
}

#[test]
fn agg_demo_square_single_row_and_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let sq = points_file(dir.path(), "0 0\n1 0\n0 1\n1 1\n");
    let o = fedreft(&["agg-demo", "--points", &sq, "--method", "geomedian"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("geomedian (0.5, 0.5)"), "{}", stdout(&o));
    assert!(stdout(&o).contains("objective "));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("abm[")).count(), 4);

    let one = points_file(dir.path(), "1.25 -3 7\n");
    for m in ["geomedian", "mean", "fedavg"] {
        let o = fedreft(&["agg-demo", "--points", &one, "--method", m]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("(1.25, -3, 7)"), "{m}: {}", stdout(&o));
    }

    let out = points_file(
        dir.path(),
        "0.1 0\n-0.1 0.05\n0 -0.1\n0.05 0.1\n-0.05 -0.05\n1000000 1000000\n1000000 -1000000\n",
    );
    let o = fedreft(&["agg-demo", "--points", &out, "--method", "geomedian"]);
    let g = first_vector(&stdout(&o), "geomedian");
    assert!(g.iter().map(|x| x * x).sum::<f64>() < 1.0, "{g:?}");
    let o = fedreft(&["agg-demo", "--points", &out, "--method", "mean"]);
    let m = first_vector(&stdout(&o), "mean");
    assert!(m.iter().map(|x| x * x).sum::<f64>() > 1.0, "{m:?}");
}

#[test]
fn agg_demo_ragged_rows_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = points_file(dir.path(), "1 2\n# comment\n3\n");
    let o = fedreft(&["agg-demo", "--points", &p, "--method", "mean"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn report_renders_csv_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    assert!(fedreft(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let jsonl = out.join("rounds.jsonl");
    let o = fedreft(&["report", "--in", jsonl.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).as_bytes(), fs::read(out.join("summary.csv")).unwrap());
    let o = fedreft(&["report", "--in", jsonl.to_str().unwrap(), "--format", "md"]);
    assert!(stdout(&o).starts_with("| client |"));
    assert!(stdout(&o).contains("**avg**"));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{}\n").unwrap();
    let o = fedreft(&["report", "--in", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"));
}
