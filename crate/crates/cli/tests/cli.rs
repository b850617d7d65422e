use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use polyot::evalkit::load_samples;
use polyot::raster::{rasterize, PixelMask};
use polyot::transport::{exact_assignment_value, CostMatrix};
use polyot::Polygon64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn polyot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyot"))
        .args(args)
        .env_remove("POLYOT_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value printed after `key: ` on standard output.
fn field(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_owned))
        .unwrap_or_else(|| panic!("no {key:?} in {}", stdout(o)))
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_requested_count_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        let o = polyot(&["gen", "--count", "5", "--seed", "11", "--out", s(p)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(text.iter().filter(|&&c| c == b'\n').count(), 5);
    let samples = load_samples(&a).unwrap();
    assert!(samples
        .iter()
        .all(|r| r.width == 640 && r.height == 480 && r.reference_polygon.len() == 10));
}

#[test]
fn gen_to_missing_directory_fails() {
    let o = polyot(&["gen", "--count", "1", "--out", "/nonexistent/dir/x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_self_and_missing_predictions() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    assert!(polyot(&["gen", "--count", "4", "--out", s(&data)])
        .status
        .success());

    let o = polyot(&["eval", s(&data), "--self-eval"]);
    assert!(o.status.success());
    assert_eq!(field(&o, "mIoU"), "100.00");
    assert_eq!(field(&o, "P@0.7"), "100.00");

    let preds = write(
        &dir,
        "p.jsonl",
        "{\"id\": \"syn-00001\", \"predicted_polygon\": [[0,0],[1,0],[1,1]]}\n",
    );
    let refs_only = write(
        &dir,
        "refs.jsonl",
        &fs::read_to_string(&data)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("predicted_polygon");
                v.to_string() + "\n"
            })
            .collect::<String>(),
    );
    let o = polyot(&["eval", s(&refs_only), "--predictions", s(&preds)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for id in ["syn-00000", "syn-00002", "syn-00003"] {
        assert!(err.contains(id), "{err}");
    }
    assert!(!err.contains("syn-00001"));
}

#[test]
fn eval_parse_errors_name_lines() {
    let dir = TempDir::new().unwrap();
    let good = r#"{"id":"a","width":4,"height":4,"reference_polygon":[[0,0],[1,0],[1,1]],"predicted_polygon":[[0,0],[1,0],[1,1]]}"#;
    let bad = write(
        &dir,
        "bad.jsonl",
        &format!("{good}\nnot json\n{good}\n{{\"id\": 3}}\n"),
    );
    let o = polyot(&["eval", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("line 4"), "{err}");
}

#[test]
fn eval_report_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    assert!(
        polyot(&["gen", "--count", "12", "--seed", "4", "--out", s(&data)])
            .status
            .success()
    );
    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    for r in [&r1, &r2] {
        assert!(
            polyot(&["eval", s(&data), "--resolution", "128x96", "--out", s(r)])
                .status
                .success()
        );
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&r1).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 12);
}

#[test]
fn fit_trace_counts_and_determinism() {
    let dir = TempDir::new().unwrap();
    let r = write(
        &dir,
        "r.json",
        "[[0.2,0.2],[0.8,0.25],[0.75,0.8],[0.3,0.7]]",
    );
    let (t1, t2) = (dir.path().join("t1.jsonl"), dir.path().join("t2.jsonl"));
    let o = polyot(&["fit", s(&r), "--steps", "1", "--trace", s(&t1)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&t1).unwrap().lines().count(), 1);

    for t in [&t1, &t2] {
        assert!(polyot(&[
            "fit",
            s(&r),
            "--steps",
            "30",
            "--seed",
            "9",
            "--loss",
            "pml",
            "--trace",
            s(t)
        ])
        .status
        .success());
    }
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());
    assert_eq!(fs::read_to_string(&t1).unwrap().lines().count(), 30);
}

#[test]
fn fit_rotated_fixture_pml_versus_l1() {
    let dir = TempDir::new().unwrap();
    let pts: Vec<[f64; 2]> = (0..10)
        .map(|k| {
            let t = k as f64 * std::f64::consts::TAU / 10.0;
            [0.5 + 0.3 * t.cos(), 0.5 + 0.3 * t.sin()]
        })
        .collect();
    let r = write(&dir, "r.json", &serde_json::to_string(&pts).unwrap());
    let common = ["--steps", "2", "--sigma", "0", "--rotate", "5"];
    let pml = polyot(&[&["fit", s(&r), "--loss", "pml"][..], &common[..]].concat());
    assert!(pml.status.success());
    assert!(field(&pml, "first-step loss").parse::<f64>().unwrap() <= 1e-3);
    let l1 = polyot(&[&["fit", s(&r), "--loss", "l1"][..], &common[..]].concat());
    assert!(field(&l1, "first-step loss").parse::<f64>().unwrap() > 0.0);
}

#[test]
fn fit_rejects_invalid_polygon() {
    let dir = TempDir::new().unwrap();
    let r = write(&dir, "r.json", "[[0.1,0.1],[0.5,0.5]]");
    assert_eq!(
        polyot(&["fit", s(&r), "--steps", "2"]).status.code(),
        Some(1)
    );
    let r = write(&dir, "r2.json", "{\"not\": \"a polygon\"}");
    assert_eq!(
        polyot(&["fit", s(&r), "--steps", "2"]).status.code(),
        Some(1)
    );
}

#[test]
fn sinkhorn_examples() {
    let dir = TempDir::new().unwrap();
    let c = write(&dir, "c.json", "[[0,1],[1,0]]");
    let o = polyot(&["sinkhorn", s(&c)]);
    assert!(o.status.success());
    assert!(field(&o, "sharp").parse::<f64>().unwrap().abs() < 1e-9);

    let c = write(&dir, "k.json", "[[2,2,2],[2,2,2]]");
    let dump = dir.path().join("plan.json");
    assert!(polyot(&["sinkhorn", s(&c), "--dump", s(&dump)])
        .status
        .success());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&dump).unwrap()).unwrap();
    for row in v["plan"]["entries"].as_array().unwrap() {
        for x in row.as_array().unwrap() {
            assert!((x.as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..5).map(|_| rng.random::<f64>()).collect())
        .collect();
    let exact = exact_assignment_value(&CostMatrix::from_rows(rows.clone()).unwrap()).unwrap();
    let c = write(&dir, "r.json", &serde_json::to_string(&rows).unwrap());
    let o = polyot(&["sinkhorn", s(&c), "--epsilon-rel", "1e-3"]);
    let sharp: f64 = field(&o, "sharp").parse().unwrap();
    assert!((sharp - exact).abs() <= 1e-3, "{sharp} vs {exact}");
}

#[test]
fn sinkhorn_rejects_malformed_matrix() {
    let dir = TempDir::new().unwrap();
    for (i, text) in ["[[0,1],[1]]", "[]", "[[0,-1]]", "nope"].iter().enumerate() {
        let c = write(&dir, &format!("c{i}.json"), text);
        assert_eq!(
            polyot(&["sinkhorn", s(&c)]).status.code(),
            Some(1),
            "{text}"
        );
    }
}

#[test]
fn rasterize_examples() {
    let dir = TempDir::new().unwrap();
    let sq = write(&dir, "sq.json", "[[0,0],[1,0],[1,1],[0,1]]");
    let o = polyot(&["rasterize", s(&sq), "--resolution", "2x2"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["rle"], serde_json::json!([0, 4]));

    let col = write(&dir, "col.json", "[[0,0],[0.5,0.5],[1,1]]");
    assert_eq!(polyot(&["rasterize", s(&col)]).status.code(), Some(1));

    let tri = "[[0.1,0.2],[0.9,0.35],[0.4,0.85]]";
    let p = write(&dir, "tri.json", tri);
    let out = dir.path().join("m.json");
    assert!(polyot(&["rasterize", s(&p), "--out", s(&out)])
        .status
        .success());
    let mask: PixelMask = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let poly: Polygon64 = serde_json::from_str(tri).unwrap();
    assert_eq!(mask, rasterize(&poly, 640, 480).unwrap());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "cfg.json",
        r#"{"resolution": "4x4", "sinkhorn": {"epsilon_rel": 0.2}}"#,
    );
    let sq = write(&dir, "sq.json", "[[0,0],[1,0],[1,1],[0,1]]");

    let o = polyot(&["--config", s(&cfg), "rasterize", s(&sq)]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["width"], 4);
    assert!(stderr(&o).contains("\"epsilon_rel\":0.2"));

    let o = polyot(&[
        "--config",
        s(&cfg),
        "rasterize",
        s(&sq),
        "--resolution",
        "3x2",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["width"], 3);

    let o = Command::new(env!("CARGO_BIN_EXE_polyot"))
        .args(["rasterize", s(&sq)])
        .env("POLYOT_CONFIG", &cfg)
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["height"], 4);

    let bad = write(&dir, "bad.json", r#"{"sinkhorn": {"epsilon_rel": -1}}"#);
    assert_eq!(
        polyot(&["--config", s(&bad), "rasterize", s(&sq)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn loss_prints_record() {
    let dir = TempDir::new().unwrap();
    let a = write(&dir, "a.json", "[[0,0],[1,0],[1,1]]");
    let b = write(&dir, "b.json", "[[1,1],[0,0],[1,0]]");
    let o = polyot(&["loss", s(&a), s(&b)]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["sharp"].as_f64().unwrap() < 1e-6);
    assert_eq!(v["converged"], true);
}
