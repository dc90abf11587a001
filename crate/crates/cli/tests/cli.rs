use std::path::Path;
use std::process::{Command, Output};

fn evopde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evopde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = evopde(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const SMALL_RUN: &str = r#"
benchmark = "convection_diffusion"
noise = 0.05
sample_ratio = 0.1
seed = 3

[network]
width = 16
depth = 2
epochs = 150
lbfgs_steps = 20

[library]
max_order = 2

[evolve]
populations = 2
pop_size = 40
iterations = 4
search_rows = 300
"#;

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--benchmark", "convection_diffusion", "--out", &p(d, "truth.pdef")]);
    ok(&["noise", "--in", &p(d, "truth.pdef"), "--level", "0.05", "--seed", "1", "--out", &p(d, "noisy.pdef")]);
    let tuned = ok(&["denoise", "--in", &p(d, "noisy.pdef"), "--out", &p(d, "smooth.pdef")]);
    assert!(tuned.starts_with("window "));
    ok(&[
        "fit", "--in", &p(d, "smooth.pdef"), "--sample", "0.1", "--seed", "2", "--net-depth", "2", "--net-width", "16",
        "--epochs", "100", "--lbfgs-steps", "10", "--out", &p(d, "net.bin"),
    ]);
    let rows = ok(&[
        "features", "--in", &p(d, "smooth.pdef"), "--net", &p(d, "net.bin"), "--max-order", "2", "--sample", "0.1",
        "--seed", "2", "--out", &p(d, "feats.csv"),
    ]);
    assert!(rows.starts_with("2560 rows"), "{rows}");
    let csv = std::fs::read_to_string(d.join("feats.csv")).unwrap();
    assert!(csv.starts_with("u,u_x,u_xx,target\n"));
    ok(&[
        "discover", "--features", &p(d, "feats.csv"), "--populations", "2", "--pop-size", "30", "--iterations", "3",
        "--seed", "1", "--out", &p(d, "pareto.json"),
    ]);
    let pareto: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("pareto.json")).unwrap()).unwrap();
    let entries = pareto.as_array().unwrap();
    assert!(!entries.is_empty());
    assert_eq!(entries.iter().filter(|e| e["selected"] == true).count(), 1);
    for key in ["complexity", "loss", "score", "expression", "selected"] {
        assert!(entries[0].get(key).is_some(), "missing {key}");
    }
    ok(&[
        "evaluate", "--pareto", &p(d, "pareto.json"), "--truth", "convection_diffusion", "--field", &p(d, "truth.pdef"),
        "--report", &p(d, "eval.json"),
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert!(report["coefficient_error"].as_f64().unwrap() >= 0.0);
}

#[test]
fn grid_sources_need_no_network() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--benchmark", "convection_diffusion", "--out", &p(d, "truth.pdef")]);
    for source in ["savgol", "finite_diff"] {
        ok(&[
            "features", "--in", &p(d, "truth.pdef"), "--source", source, "--max-order", "2", "--sample", "1",
            "--out", &p(d, "feats.csv"),
        ]);
    }
    let out = evopde(&["features", "--in", &p(d, "truth.pdef"), "--out", &p(d, "feats.csv")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = evopde(&["generate", "--benchmark", "navier_stokes", "--out", &p(d, "x.pdef")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("navier_stokes"));
    assert!(!d.join("x.pdef").exists());
    let out = evopde(&["pipeline", "--benchmark", "burgers:viscosity=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = evopde(&["pipeline", "--sample", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = evopde(&["denoise", "--in", &p(d, "missing.pdef"), "--out", &p(d, "y.pdef"), "--window", "6"]);
    assert_eq!(out.status.code(), Some(2));
    let out = evopde(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = evopde(&["generate", "--benchmark", "burgers:delta=-0.5", "--out", &p(dir.path(), "x.pdef")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate") || String::from_utf8_lossy(&out.stderr).contains("simulation"));
}

#[test]
fn dumped_config_round_trips_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.toml");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    let dumped = ok(&["pipeline", "--config", &cfg, "--noise", "0.4", "--dump-config"]);
    assert!(dumped.contains("noise = 0.4"));
    assert!(dumped.contains("benchmark = \"convection_diffusion\""));
    let again = p(dir.path(), "again.toml");
    std::fs::write(&again, &dumped).unwrap();
    assert_eq!(ok(&["pipeline", "--config", &again, "--dump-config"]), dumped);
}

#[test]
fn small_pipeline_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "run.toml");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    ok(&["pipeline", "--config", &cfg, "--out", &p(d, "run")]);
    for f in ["pareto.json", "report.json", "timings.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(&[
        "sweep", "--config", &cfg, "--noise-levels", "0.1", "--ratios", "0.2,0.05", "--seeds", "1", "--out",
        &p(d, "heat.csv"), "--log", &p(d, "sweep.json"),
    ]);
    let csv = std::fs::read_to_string(d.join("heat.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "noise,samples,mean_coef_error,n_seeds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.1,0.05,"));
    assert!(lines[2].starts_with("0.1,0.2,"));
    assert!(d.join("sweep.json").exists());
}
