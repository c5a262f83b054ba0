use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn example(name: &str) -> String {
    format!("{}/examples/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn bundleflag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bundleflag"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let out = bundleflag(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn usizes(v: &Value) -> Vec<u64> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn temp_config(text: &str) -> tempfile::NamedTempFile {
    let file = tempfile::Builder::new().suffix(".ini").tempfile().unwrap();
    std::fs::write(file.path(), text).unwrap();
    file
}

const IRREGULAR: &str = "
[chart]
coords = x, y
lower = -1, -1
upper = 1, 1
grid = 21
[connection]
source = omega
[omega]
rank = 2
# curvature vanishes only on the line x = 0
omega[1][2][y] = x^2
[base]
point = 0, 0.5
";

#[test]
fn analyze_sphere() {
    let r = json(&["analyze", "--config", &example("sphere.ini")]);
    assert_eq!(usizes(&r["ranks"]), vec![1, 1]);
    assert_eq!(r["rank_final"], 1);
    assert_eq!(r["tolerances"]["rank"], 1e-8);
    let theta = floats(&r["base"]["node"])[0];
    let basis = r["basis"].as_array().unwrap();
    assert_eq!(basis.len(), 1);
    let b = floats(&basis[0]);
    let s2 = theta.sin().powi(2);
    let norm = (1.0 + s2 * s2).sqrt();
    for (got, want) in b.iter().zip([1.0 / norm, s2 / norm, 0.0]) {
        assert!((got - want).abs() < 1e-6, "{b:?}");
    }
    assert!(r["caveat"].as_str().unwrap().contains("lattice"));
}

#[test]
fn analyze_flat_and_derived() {
    let flat = json(&["analyze", "--config", &example("flat.ini")]);
    assert_eq!(flat["rank_final"], 4);
    assert_eq!(flat["iterations"], 1);
    let derived = json(&["analyze", "--config", &example("derived.ini")]);
    assert_eq!(usizes(&derived["ranks"]), vec![2, 1, 1]);
    assert_eq!(derived["rank_final"], 1);
    let b = floats(&derived["basis"][0]);
    assert!((b[1] - 1.0).abs() < 1e-8 && b[0].abs() < 1e-8 && b[2].abs() < 1e-8, "{b:?}");
}

#[test]
fn output_is_deterministic_and_saved() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "analyze",
        "--config",
        &example("derived.ini"),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    let a = bundleflag(&args);
    let b = bundleflag(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(std::fs::read(dir.path().join("analyze.json")).unwrap(), a.stdout);
}

#[test]
fn overrides_are_reported() {
    let r = json(&[
        "analyze",
        "--config",
        &example("derived.ini"),
        "--grid",
        "13",
        "--tol-rank",
        "1e-9",
    ]);
    assert_eq!(usizes(&r["chart"]["grid"]), vec![13, 13]);
    assert_eq!(r["tolerances"]["rank"], 1e-9);
    assert_eq!(r["rank_final"], 1);
}

#[test]
fn sphere_sections() {
    let dir = tempfile::tempdir().unwrap();
    let out = bundleflag(&[
        "sections",
        "--config",
        &example("sphere.ini"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("residual"));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["files"].as_array().unwrap().len(), 1);
    assert!(r["max_residual"].as_f64().unwrap() < 1e-5);
    let (header, rows) = read_csv(&dir.path().join("section_1.csv"));
    assert_eq!(header, ["theta", "phi", "f1", "f2", "f3"]);
    assert_eq!(rows.len(), 64 * 64);
    let scale = rows[0][2];
    for row in &rows {
        let s2 = row[0].sin().powi(2);
        let want = [scale, scale * s2, 0.0];
        for k in 0..3 {
            assert!((row[2 + k] - want[k]).abs() < 1e-5 * scale.abs(), "{row:?}");
        }
    }
}

#[test]
fn constant_sections() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(&[
        "sections",
        "--config",
        &example("flat.ini"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r["files"].as_array().unwrap().len(), 4);
    for k in 1..=4 {
        let (header, rows) = read_csv(&dir.path().join(format!("section_{k}.csv")));
        assert_eq!(header.len(), 6);
        for row in rows {
            for j in 0..4 {
                let want = if j + 1 == k { 1.0 } else { 0.0 };
                assert!((row[2 + j] - want).abs() < 1e-12);
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let r = json(&[
        "sections",
        "--config",
        &example("derived.ini"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r["files"].as_array().unwrap().len(), 1);
    let (_, rows) = read_csv(&dir.path().join("section_1.csv"));
    for row in rows {
        assert!(row[2].abs() < 1e-8 && (row[3].abs() - 1.0).abs() < 1e-8 && row[4].abs() < 1e-8);
    }
}

#[test]
fn rank_zero_writes_no_sections() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(&[
        "sections",
        "--config",
        &example("perturbed_sphere.ini"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r["rank_final"], 0);
    assert!(r["files"].as_array().unwrap().is_empty());
    assert!(!dir.path().join("section_1.csv").exists());
}

#[test]
fn metric_verdicts() {
    let sphere = json(&["metric-check", "--config", &example("sphere.ini")]);
    assert_eq!(sphere["verdict"], "metric");
    assert!(sphere["witness"]["min_eigenvalue"].as_f64().unwrap() > 0.0);

    let plane = json(&["metric-check", "--config", &example("flat_plane.ini")]);
    assert_eq!(plane["verdict"], "metric");
    let g = &plane["witness"]["metric"];
    for (i, row) in g.as_array().unwrap().iter().enumerate() {
        for (j, x) in floats(row).into_iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-6, "{g}");
        }
    }

    let perturbed = json(&["metric-check", "--config", &example("perturbed_sphere.ini")]);
    assert_eq!(perturbed["verdict"], "not-metric");
    assert_eq!(perturbed["rank"], 0);
    assert!(perturbed["witness"].is_null());
}

#[test]
fn transport_defects() {
    let flat = json(&["transport", "--config", &example("flat.ini")]);
    assert_eq!(flat["closed"], true);
    assert_eq!(flat["defect_norm"], 0.0);

    let sphere = json(&["transport", "--config", &example("sphere.ini")]);
    assert!(sphere["defect_norm"].as_f64().unwrap() < 1e-6);

    // X3 around the square of half-side eps centred at (pi/2, 1): to first
    // order the defect is the enclosed area times |R_{theta phi} X3| = 2 sqrt 2
    let eps = 0.01;
    let sphere_text = std::fs::read_to_string(example("sphere.ini")).unwrap();
    let head = sphere_text.split("[transport]").next().unwrap();
    let config = temp_config(&format!(
        "{head}[transport]\npath = (pi/2 - {eps}, 1 - {eps}); (pi/2 + {eps}, 1 - {eps}); (pi/2 + {eps}, 1 + {eps}); (pi/2 - {eps}, 1 + {eps}); (pi/2 - {eps}, 1 - {eps})\nvector = 0, 0, 1\nmax_step = 1e-3\n"
    ));
    let r = json(&["transport", "--config", config.path().to_str().unwrap()]);
    let want = 4.0 * eps * eps * 2.0 * 2f64.sqrt();
    let got = r["defect_norm"].as_f64().unwrap();
    assert!((got - want).abs() < 0.02 * want, "{got} vs {want}");
}

#[test]
fn exit_codes() {
    let code = |args: &[&str]| bundleflag(args).status.code().unwrap();
    let irregular = temp_config(IRREGULAR);
    let irr = irregular.path().to_str().unwrap();
    assert_eq!(code(&["analyze", "--config", irr]), 0);
    assert_eq!(code(&["sections", "--config", irr, "--out", tempfile::tempdir().unwrap().path().to_str().unwrap()]), 4);
    assert_eq!(code(&["metric-check", "--config", irr]), 4);
    assert_eq!(code(&["transport", "--config", irr]), 2);
    assert_eq!(code(&["analyze", "--config", irr, "--grid", "4"]), 2);
    assert_eq!(code(&["analyze", "--config", irr, "--grid", "2"]), 2);
    assert_eq!(code(&["analyze", "--config", "/nonexistent.ini"]), 2);
    assert_eq!(code(&["metric-check", "--config", &example("flat.ini")]), 2);
    assert_eq!(code(&["frobnicate"]), 2);

    let bad = temp_config(&IRREGULAR.replace("x^2", "x^2 + z"));
    assert_eq!(code(&["analyze", "--config", bad.path().to_str().unwrap()]), 2);
    let outside = temp_config(&IRREGULAR.replace("point = 0, 0.5", "point = 0, 1.5"));
    assert_eq!(code(&["analyze", "--config", outside.path().to_str().unwrap()]), 2);
    let singular = temp_config(&IRREGULAR.replace("x^2", "log(x)"));
    assert_eq!(code(&["analyze", "--config", singular.path().to_str().unwrap()]), 3);
}

#[test]
fn irregular_base_is_reported_by_analyze() {
    let irregular = temp_config(IRREGULAR);
    let r = json(&["analyze", "--config", irregular.path().to_str().unwrap()]);
    assert_eq!(r["base"]["regular"], false);
    assert!(r["basis"].is_null());
    assert_eq!(r["rank_final"], 1);
    assert!(r["regular_fraction"].as_f64().unwrap() < 1.0);
}
