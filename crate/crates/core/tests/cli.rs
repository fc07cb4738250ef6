use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 2\n[synth]\nusers = 2\n[train]\nlr = 1e-3\nepochs = 1\n";

fn divr(args: &[&str], out: &Path, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_divr"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("DIVR_OUT");
    match env_out {
        Some(dir) => cmd.env("DIVR_OUT", dir),
        None => cmd.arg("--out").arg(out),
    };
    cmd.output().unwrap()
}

#[test]
fn eval_before_train_fails_naming_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = divr(&["eval"], dir.path(), None);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint.ckpt") && stderr.contains("divr train"), "{stderr}");
}

#[test]
fn synth_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let read = |root: &Path| std::fs::read(root.join("corpus/manifest.json")).unwrap();
    assert!(divr(&["synth", "--config", cfg], &dir.path().join("o"), None).status.success());
    let first = read(&dir.path().join("o"));
    let session = std::fs::read(dir.path().join("o/corpus/sessions/u001-s5.session")).unwrap();
    assert!(divr(&["synth", "--config", cfg], &dir.path().join("o"), None).status.success());
    assert_eq!(read(&dir.path().join("o")), first);
    assert_eq!(std::fs::read(dir.path().join("o/corpus/sessions/u001-s5.session")).unwrap(), session);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let env_root = dir.path().join("from-env");
    let out = divr(&["synth", "--config", cfg.to_str().unwrap()], dir.path(), Some(&env_root));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_root.join("corpus/manifest.json").exists());
    assert!(env_root.join("manifests/synth.json").exists());
}

#[test]
fn stages_chain_and_ablation_respects_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let root = dir.path().join("o");
    let run = |args: &[&str]| divr(args, &root, None);

    assert!(run(&["synth", "--config", cfg]).status.success());
    let early = run(&["train", "--config", cfg]);
    assert!(String::from_utf8_lossy(&early.stderr).contains("divr split"));
    for stage in ["graphs", "split", "train", "eval"] {
        let o = run(&[stage, "--config", cfg, "--variant", "mlp"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let ablate = run(&["ablate", "--config", cfg, "--variant", "mlp", "--ablate", "graph"]);
    assert!(!ablate.status.success());
    let bad = run(&["train", "--config", cfg, "--variant", "transformer"]);
    assert!(!bad.status.success());

    let report = run(&["report", "--config", cfg]);
    assert!(report.status.success());
    let summary = std::fs::read_to_string(root.join("reports/summary.txt")).unwrap();
    assert!(summary.starts_with("split: random\n") && summary.contains("mlp"), "{summary}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("manifests/train-mlp-random.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seed"], 2);
}
