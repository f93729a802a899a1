mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use dualebm::runner::RunOptions;

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualebm"))
}

fn rows(metrics: &Path) -> Vec<String> {
    std::fs::read_to_string(metrics).unwrap().lines().map(String::from).collect()
}

fn with_iterations(t: u64) -> String {
    SMALL_DUAL.replace("T = 20", &format!("T = {t}"))
}

#[test]
fn zero_iterations_log_the_initial_state_once() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_config(&with_iterations(0), dir.path(), RunOptions::default());
    let lines = rows(&s.metrics.unwrap());
    assert_eq!(lines[0], "iter,time,rescaled_time,kl,sm,tv_norm");
    assert_eq!(lines.len(), 2);
    let v: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(&v[..3], &[0.0, 0.0, 0.0]);
    assert!(v[3..].iter().all(|x| x.is_finite()));
}

#[test]
fn seeded_runs_are_byte_identical() {
    assert!(determinism().pass);
}

#[test]
fn rescaled_time_column_is_iteration_times_step_times_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_config(SMALL_DUAL, dir.path(), RunOptions::default());
    let lines = rows(&s.metrics.unwrap());
    for l in &lines[1..] {
        let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[2] - v[0] * 0.02 * 10.0).abs() <= 1e-12 * v[2].max(1.0), "{l}");
    }
}

#[test]
fn resuming_halfway_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = run_config(&with_iterations(200), &dir.path().join("full"), RunOptions::default());
    let part = dir.path().join("part");
    run_config(&with_iterations(100), &part, RunOptions::default());
    let resumed = run_config(
        &with_iterations(200),
        &part,
        RunOptions { resume: Some(part.join("checkpoint.json")), ..RunOptions::default() },
    );
    assert_eq!(std::fs::read(full.metrics.unwrap()).unwrap(), std::fs::read(resumed.metrics.unwrap()).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("full/checkpoint.json")).unwrap(),
        std::fs::read(part.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn truncated_checkpoint_is_a_clean_cli_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL_DUAL).unwrap();
    let cp = dir.path().join("cp.json");
    std::fs::write(&cp, "{\"version\":1,\"checkpoint\":{\"train-dual\":{\"state\":{\"ensem").unwrap();
    let out = cli()
        .args(["train-dual", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .arg("--resume")
        .arg(&cp)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("cp.json"), "{err}");
}

#[test]
fn bad_config_exits_nonzero_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, SMALL_DUAL.replace("s = 0.02", "s = -0.02")).unwrap();
    let out = cli().args(["train-dual", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = SMALL_DUAL.lines().position(|l| l.starts_with("s = 0.02")).unwrap() + 1;
    assert!(err.contains(&format!("line {line}")) && err.contains("dual.s"), "{err}");

    std::fs::write(&cfg, SMALL_DUAL.replace("p_r = 0.1", "p_r = 0.1\nspeed = 3")).unwrap();
    let out = cli().args(["train-dual", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("speed"));
}

#[test]
fn subcommand_must_match_the_declared_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL_DUAL).unwrap();
    let out = cli().args(["train-sm", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-dual"));
}

#[test]
fn cli_run_writes_metrics_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL_DUAL).unwrap();
    let out_dir = dir.path().join("o");
    let out = cli()
        .args(["train-dual", "--seed", "3", "--log-every", "10", "--plot", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(rows(&out_dir.join("metrics.csv")).len(), 4);
    for f in ["metrics_time.svg", "metrics_rescaled_time.svg", "checkpoint.json", "config.toml"] {
        let text = std::fs::read_to_string(out_dir.join(f)).unwrap();
        assert!(!text.is_empty(), "{f}");
    }
    assert!(std::fs::read_to_string(out_dir.join("metrics_time.svg")).unwrap().contains("<svg"));
}

#[test]
fn training_leaves_dataset_files_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let gen = SMALL_DUAL.replace("mode = \"train-dual\"", "mode = \"teacher-gen\"");
    run_config(&gen, &dir.path().join("data"), RunOptions::default());
    let train = dir.path().join("data/train.csv");
    let test = dir.path().join("data/test.csv");
    let before = (std::fs::read(&train).unwrap(), std::fs::read(&test).unwrap());
    let with_files = SMALL_DUAL.replace(
        "[model]",
        &format!("[data]\ntrain = {:?}\ntest = {:?}\n\n[model]", train.display().to_string(), test.display().to_string()),
    );
    let s = run_config(&with_files, &dir.path().join("run"), RunOptions::default());
    assert_eq!(rows(&s.metrics.unwrap()).len(), 6);
    assert_eq!(before, (std::fs::read(&train).unwrap(), std::fs::read(&test).unwrap()));
}

#[test]
fn other_modes_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let shrink = |name: &str, edits: &[(&str, &str)]| {
        let mut text = std::fs::read_to_string(root.join(name)).unwrap();
        for (a, b) in edits {
            assert!(text.contains(a), "{name}: {a}");
            text = text.replace(a, b);
        }
        text
    };
    let sm = shrink("train_sm.toml", &[("n = 2000", "n = 100"), ("n_test = 2000", "n_test = 100"), ("T = 2000", "T = 10"), ("m = 64", "m = 8")]);
    let s = run_config(&sm, &dir.path().join("sm"), RunOptions { log_every: Some(5), ..RunOptions::default() });
    assert_eq!(s.records, 3);
    let mmd = shrink("train_mmd.toml", &[("n = 1000", "n = 60"), ("n_test = 2000", "n_test = 60"), ("T = 500", "T = 4"), ("N = 1000", "N = 50")]);
    let s = run_config(&mmd, &dir.path().join("mmd"), RunOptions { log_every: Some(2), ..RunOptions::default() });
    assert_eq!(rows(&s.metrics.unwrap())[0], "iter,time,rescaled_time,kl,sm,mmd2");
    let pde = shrink("pde_alpha.toml", &[]).lines().map(|l| if l.starts_with("T =") { "T = 0.05".into() } else { l.to_string() }).collect::<Vec<_>>().join("\n");
    let s = run_config(&pde, &dir.path().join("pde"), RunOptions::default());
    assert!(s.records >= 2);
    assert!(dir.path().join("pde/densities.csv").exists());
}

#[test]
fn sweep_runs_every_seed_and_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_DUAL.replace("mode = \"train-dual\"", "mode = \"sweep\"") + "\n[sweep]\nmode = \"train-dual\"\nseeds = [1, 2]\nalpha = [0.5, 10.0]\n";
    let s = run_config(&text, dir.path(), RunOptions::default());
    assert_eq!(s.children.len(), 4);
    for c in &s.children {
        assert!(c.metrics.as_ref().unwrap().exists());
    }
    assert!(dir.path().join("alpha_0.5_seed_2/metrics.csv").exists());
}
