use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aggmogp::io::export::read_grid_csv;
use aggmogp::io::plot::read_band;
use aggmogp::io::{DatasetFile, ModelFile};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aggmogp"));
    c.env("AGGMOGP_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no error record in {stderr}"));
    serde_json::from_str(line).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn synth_config() -> Value {
    json!({
        "seed": 3,
        "attributes": ["a", "b"],
        "betas": [0.15],
        "weights": {"prior": {"mean": [[1.0], [0.8]], "var": [[0.0], [0.0]]}},
        "offsets": [5.0, 5.0],
        "domains": [{
            "id": "d",
            "extent": [[0.0, 1.0]],
            "shape": [40],
            "partitions": [
                {"id": "a-coarse", "attribute": "a", "bins": [4], "noise": 0.0001},
                {"id": "a-fine", "attribute": "a", "bins": [10], "noise": 0.0},
                {"id": "b", "attribute": "b", "bins": [10], "noise": 0.0001}
            ]
        }]
    })
}

fn fit_config(extra: Value) -> Value {
    let mut c = json!({
        "model": {"method": "amogp", "num_latents": 1, "target": {"domain": "d", "attribute": "a"}, "exclude": ["a-fine"]},
        "training": {"max_iters": 150, "learning_rate": 0.05, "margin_draws": 16},
        "prediction": {"t_p": 10}
    });
    if let (Some(c), Some(e)) = (c.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            c.insert(k.clone(), v.clone());
        }
    }
    c
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: PathBuf,
    config: PathBuf,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let synth = write(&root, "synth.json", &synth_config());
    let dataset = root.join("data.json");
    ok(&["synth", "--config", p(&synth), "--out", p(&dataset)]);
    assert!(root.join("data.truth.json").exists());
    let config = write(&root, "config.json", &fit_config(json!({})));
    Setup { _dir: dir, root, dataset, config }
}

#[test]
fn fit_refine_plot_pipeline() {
    let s = setup();
    let model = s.root.join("model.json");
    let stdout = ok(&["fit", "--dataset", p(&s.dataset), "--config", p(&s.config), "--model", p(&model), "--seed", "1"]);
    assert!(stdout.contains("fitted amogp with L = 1"));
    let trace = s.root.join("model.trace.csv");
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("iteration,elbo,learning_rate\n"));

    let file = ModelFile::load(&model).unwrap();
    assert_eq!(file.training_datasets, vec!["a-coarse".to_string(), "b".to_string()]);
    assert_eq!(file.provenance.seed, 1);
    let text = std::fs::read_to_string(&model).unwrap();
    assert_eq!(ModelFile::from_json(&file.to_json().unwrap()).unwrap(), file);
    assert_eq!(file.to_json().unwrap(), text);

    let out = s.root.join("refined.csv");
    let grid = s.root.join("grid.csv");
    ok(&[
        "refine", "--dataset", p(&s.dataset), "--model", p(&model), "--target-partition", "a-fine",
        "--out", p(&out), "--grid", p(&grid), "--tp", "10",
    ]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("support_id,value,variance"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 10);
    let truth = DatasetFile::load(&s.root.join("data.truth.json")).unwrap().resolve().unwrap();
    let fine = truth.dataset("a-fine").unwrap();
    for (row, t) in rows.iter().zip(&fine.values) {
        let v: f64 = row[1].parse().unwrap();
        let var: f64 = row[2].parse().unwrap();
        assert!(var >= 0.0);
        assert!((v - t).abs() < 1.0, "{v} vs {t}");
    }

    let table = read_grid_csv(&std::fs::read_to_string(&grid).unwrap()).unwrap();
    assert_eq!(table.points.len(), 40);
    assert!(table.variance.iter().all(|v| *v >= 0.0));
    let svg = s.root.join("band.svg");
    ok(&["plot", "--input", p(&grid), "--out", p(&svg)]);
    let band = read_band(&std::fs::read_to_string(&svg).unwrap()).unwrap();
    assert_eq!(band.len(), table.points.len());
    let scale = table.mean.iter().map(|m| m.abs()).fold(1.0, f64::max);
    for (k, (x, lo, up)) in band.iter().enumerate() {
        assert!((x - table.points[k][0]).abs() < 1e-9);
        let half = 0.5 * (up - lo);
        assert!((half - 2.0 * table.variance[k].sqrt()).abs() < 1e-9 * scale, "{half} vs {}", table.variance[k]);
    }
    let trace_svg = s.root.join("trace.svg");
    ok(&["plot", "--input", p(&trace), "--out", p(&trace_svg)]);
    assert!(std::fs::read_to_string(&trace_svg).unwrap().contains("class=\"elbo\""));
}

#[test]
fn identical_seeds_give_identical_files() {
    let s = setup();
    let m1 = s.root.join("m1.json");
    let m2 = s.root.join("m2.json");
    let m3 = s.root.join("m3.json");
    ok(&["fit", "--dataset", p(&s.dataset), "--config", p(&s.config), "--model", p(&m1), "--seed", "4"]);
    ok(&["fit", "--dataset", p(&s.dataset), "--config", p(&s.config), "--model", p(&m2), "--seed", "4"]);
    ok(&["fit", "--dataset", p(&s.dataset), "--config", p(&s.config), "--model", p(&m3), "--seed", "5"]);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    assert_eq!(std::fs::read(s.root.join("m1.trace.csv")).unwrap(), std::fs::read(s.root.join("m2.trace.csv")).unwrap());
    assert_ne!(std::fs::read(&m1).unwrap(), std::fs::read(&m3).unwrap());

    let r1 = s.root.join("r1.csv");
    let r2 = s.root.join("r2.csv");
    for r in [&r1, &r2] {
        ok(&["refine", "--dataset", p(&s.dataset), "--model", p(&m1), "--target-partition", "a-fine", "--out", p(r), "--tp", "5"]);
    }
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
}

#[test]
fn refine_onto_training_partition_reproduces_it() {
    let s = setup();
    let cfg = write(
        &s.root,
        "floored.json",
        &fit_config(json!({
            "model": {"method": "agp", "num_latents": 1, "target": {"domain": "d", "attribute": "a"},
                      "exclude": ["a-fine"], "initial_noise": 1e-12},
            "training": {"max_iters": 100, "learning_rate": 0.05, "margin_draws": 0, "frozen": ["log_noise"]}
        })),
    );
    let model = s.root.join("m.json");
    ok(&["fit", "--dataset", p(&s.dataset), "--config", p(&cfg), "--model", p(&model)]);
    let out = s.root.join("train.csv");
    ok(&["refine", "--dataset", p(&s.dataset), "--model", p(&model), "--target-partition", "a-coarse", "--out", p(&out)]);
    let cat = DatasetFile::load(&s.dataset).unwrap().resolve().unwrap();
    let coarse = cat.dataset("a-coarse").unwrap();
    let csv = std::fs::read_to_string(&out).unwrap();
    for (line, y) in csv.lines().skip(1).zip(&coarse.values) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((v - y).abs() < 1e-3, "{v} vs {y}");
    }
}

#[test]
fn validation_failures_exit_with_one() {
    let s = setup();
    let mut data: Value = serde_json::from_str(&std::fs::read_to_string(&s.dataset).unwrap()).unwrap();
    let b = data["datasets"].as_array_mut().unwrap().iter_mut().find(|d| d["id"] == "b").unwrap();
    b["supports"][1]["interval"][0] = json!(0.05);
    let bad = write(&s.root, "bad.json", &data);
    let out = run(&["fit", "--dataset", p(&bad), "--config", p(&s.config), "--model", p(&s.root.join("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "OverlapError");
    assert_eq!(rec["error"]["exit_code"], 1);
    assert!(!s.root.join("x.json").exists());

    let out = run(&["eval", "--dataset", p(&s.dataset), "--config", p(&s.config), "--out", "r.json", "--method", "gp"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "Usage");

    let out = run(&["fit", "--dataset", p(&s.dataset), "--config", p(&s.config), "--model", "m.json", "--latents", "zero"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn models_are_checked_against_the_dataset() {
    let s = setup();
    let model = s.root.join("m.json");
    ok(&["fit", "--dataset", p(&s.dataset), "--config", p(&s.config), "--model", p(&model)]);

    let mut data: Value = serde_json::from_str(&std::fs::read_to_string(&s.dataset).unwrap()).unwrap();
    let b = data["datasets"].as_array_mut().unwrap().iter_mut().find(|d| d["id"] == "b").unwrap();
    b["values"][0] = json!(b["values"][0].as_f64().unwrap() + 1.0);
    let changed = write(&s.root, "changed.json", &data);
    let out = run(&["refine", "--dataset", p(&changed), "--model", p(&model), "--target-partition", "a-fine", "--out", p(&s.root.join("o.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "IncompatibleModel");

    let mut m: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    m["format_version"] = json!(aggmogp::io::FORMAT_VERSION + 1);
    let newer = write(&s.root, "newer.json", &m);
    let out = run(&["refine", "--dataset", p(&s.dataset), "--model", p(&newer), "--target-partition", "a-fine", "--out", p(&s.root.join("o.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "UnsupportedVersion");
}

#[test]
fn eval_and_cv_write_reports() {
    let s = setup();
    let cfg = write(
        &s.root,
        "eval.json",
        &fit_config(json!({
            "experiment": {
                "target": {"domain": "d", "attribute": "a"},
                "coarse": "a-coarse",
                "fine": "a-fine",
                "method": "amogp",
                "latents": 1,
                "seeds": [0, 1],
                "train": {"max_iters": 80, "learning_rate": 0.05, "margin_draws": 0},
                "t_p": 5
            }
        })),
    );
    let r1 = s.root.join("r1.json");
    let r2 = s.root.join("r2.json");
    let table = ok(&["eval", "--dataset", p(&s.dataset), "--config", p(&cfg), "--out", p(&r1)]);
    assert!(table.contains("amogp: MAPE"));
    ok(&["eval", "--dataset", p(&s.dataset), "--config", p(&cfg), "--out", p(&r2)]);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&r1).unwrap()).unwrap();
    assert_eq!(report["completed"], 2);
    ok(&["eval", "--dataset", p(&s.dataset), "--config", p(&cfg), "--out", p(&r1), "--method", "agp", "--seed", "3"]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&r1).unwrap()).unwrap();
    assert_eq!(report["method"], "agp");
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);

    let cv_cfg = write(
        &s.root,
        "cv.json",
        &fit_config(json!({
            "model": {"method": "amogp", "num_latents": "cv", "target": {"domain": "d", "attribute": "a"},
                      "exclude": ["a-fine"], "cv": {"t_p": 5}},
            "training": {"max_iters": 60, "learning_rate": 0.05, "margin_draws": 0}
        })),
    );
    let cv_out = s.root.join("cv_out.json");
    let stdout = ok(&["cv", "--dataset", p(&s.dataset), "--config", p(&cv_cfg), "--out", p(&cv_out)]);
    assert!(stdout.contains("chosen L = "));
    let cv: Value = serde_json::from_str(&std::fs::read_to_string(&cv_out).unwrap()).unwrap();
    assert_eq!(cv["errors"].as_array().unwrap().len(), 2);
}
