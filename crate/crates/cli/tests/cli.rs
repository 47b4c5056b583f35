use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const MLP: &str = r#"
[experiment]
optimizer = { kind = "adam", master_lr = 0.001 }
data = { kind = "teacher", d_in = 8, d_out = 3, train_size = 256, val_size = 64, seed = 1 }

[experiment.model]
kind = "mlp"
d_in = 8
d_out = 3
width = 16
base_width = 16
depth = 1
scheme = "mup-t8"
"#;

fn mupar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mupar"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .env("MUPAR_WORKERS", "1")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{body}\n{MLP}")).unwrap();
    path
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn primer_writes_one_row_per_n() {
    let dir = TempDir::new().unwrap();
    let out = mupar(
        &["primer", "--n", "64,256", "--samples", "10000"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = read(dir.path(), "primer.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "f,n,alpha_star,objective");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("well,64,"));
    assert!(read(dir.path(), "run_config.toml").contains("kind = \"primer\""));
}

#[test]
fn lawcheck_writes_fits() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("laws.toml");
    std::fs::write(&cfg, "[lawcheck]\nn = [64, 128, 256]\nreps = 5\n").unwrap();
    let out = mupar(&["lawcheck", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read(dir.path(), "lawcheck_fits.csv").lines().count(), 4);
    assert_eq!(read(dir.path(), "lawcheck.csv").lines().count(), 1 + 3 * 3);
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = mupar(&["sweep"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = mupar(&["sweep", "--config", "/nonexistent/run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "kind = \"sweep\"\nlearning_rate = 0.1\n");
    let out = mupar(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn kind_mismatch_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "kind = \"widthscan\"\n");
    let out = mupar(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_where_everything_diverges_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
kind = "sweep"
seeds = [0, 1]
scale = { width_mult = 1, depth = 1, batch_size = 16, steps = 30 }
search = { kind = "grid", axes = { master_lr = [1e6, 1e8] } }
"#,
    );
    let out = mupar(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let sweep = read(dir.path(), "sweep.csv");
    assert_eq!(sweep.lines().count(), 1 + 4);
    assert!(sweep.lines().skip(1).all(|l| l.ends_with(",true")));
    assert_eq!(read(dir.path(), "best.json").trim(), "[]");
}

#[test]
fn sweep_over_widths_writes_plot_data() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
kind = "sweep"
widths = [1, 2]
scale = { width_mult = 1, depth = 1, batch_size = 16, steps = 20 }
search = { kind = "grid", axes = { master_lr = [0.001, 0.01] } }
"#,
    );
    let out = mupar(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let lr = read(dir.path(), "lr_vs_loss.csv");
    assert_eq!(
        lr.lines().next().unwrap(),
        "width,log2_lr,mean_loss,n_seeds"
    );
    let widths: Vec<&str> = lr
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(widths, ["16", "16", "32", "32"]);
    let best: serde_json::Value = serde_json::from_str(&read(dir.path(), "best.json")).unwrap();
    assert_eq!(best.as_array().unwrap().len(), 2);
}

#[test]
fn sweep_is_reproducible() {
    let body = r#"
kind = "sweep"
seeds = [4]
scale = { width_mult = 1, depth = 1, batch_size = 16, steps = 20 }
search = { kind = "random", samples = 3, seed = 9, ranges = { master_lr = { lo = 0.0001, hi = 0.1, log = true } } }
"#;
    let runs: Vec<String> = (0..2)
        .map(|_| {
            let dir = TempDir::new().unwrap();
            let cfg = write_config(dir.path(), body);
            let out = mupar(
                &["sweep", "--config", cfg.to_str().unwrap(), "--workers", "2"],
                dir.path(),
            );
            assert!(out.status.success(), "{}", stderr(&out));
            read(dir.path(), "sweep.csv")
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn transfer_writes_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
kind = "transfer"
scale = { width_mult = 1, depth = 1, batch_size = 16, steps = 20 }
target = { width_mult = 4, depth = 1, batch_size = 16, steps = 20 }
search = { kind = "grid", axes = { master_lr = [0.001, 0.01] } }
transfer = { naive_sp = true, oracle = true }
"#,
    );
    let out = mupar(&["transfer", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&read(dir.path(), "transfer_report.json")).unwrap();
    assert!(report["target_loss"].as_f64().unwrap().is_finite());
    assert!(report["oracle"]["ratio"].as_f64().unwrap() > 0.0);
    assert!(report["naive_sp_loss"].is_number());
}

#[test]
fn written_run_config_replays() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
kind = "widthscan"
widths = [1, 2]
hp = { values = { master_lr = 0.01 } }
scale = { width_mult = 1, depth = 1, batch_size = 16, steps = 20 }
"#,
    );
    let out = mupar(
        &[
            "widthscan",
            "--config",
            cfg.to_str().unwrap(),
            "--seeds",
            "3,5",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let first = read(dir.path(), "widthscan.csv");
    let saved = dir.path().join("run_config.toml");
    assert!(read(dir.path(), "run_config.toml").contains("seeds = [3, 5]"));
    let again = TempDir::new().unwrap();
    let out = mupar(
        &["widthscan", "--config", saved.to_str().unwrap()],
        again.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read(again.path(), "widthscan.csv"), first);
}

#[test]
fn bundled_mlp_coordcheck_separates_schemes() {
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/mlp_coordcheck.toml");
    let dir = TempDir::new().unwrap();
    let out = mupar(
        &["coordcheck", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict: Pass"));
    assert!(read(dir.path(), "coordcheck.json").contains("\"verdict\": \"pass\""));

    let sp = TempDir::new().unwrap();
    let out = mupar(
        &[
            "coordcheck",
            "--config",
            cfg.to_str().unwrap(),
            "--scheme",
            "sp",
        ],
        sp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict: Fail"));
}
