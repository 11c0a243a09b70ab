use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manifold-ood"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn toy3d_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cli(&["toy3d", "--out", out, "--override", "cvae_epochs=60", "--override", "detector_epochs=20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for rule in ["ood_class_prob", "neg_max_inlier_prob", "neg_max_softmax", "neg_odin"] {
        assert!(text.contains(rule), "{text}");
    }
    assert!(text.contains("type2: 1000 points"));
    let files: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for stem in ["metrics-", "baselines-", "toy-points-", "toy-projection-", "run-"] {
        assert!(files.iter().any(|f| f.starts_with(stem) && f.contains("-s0.")), "{stem} missing in {files:?}");
    }

    let o = cli(&["report", "--out", out]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("off_octant"));
    assert!(text.contains("best rule"), "{text}");
}

#[test]
fn seed_flag_lands_in_artifact_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let conf = dir.path().join("toy.conf");
    std::fs::write(&conf, "preset = toy3d\n# short run\ncvae_epochs = 2\n").unwrap();
    let o = cli(&["train-cvae", "--out", out, "--seed", "7", "--config", conf.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).trim_end().ends_with("-s7.bin"));
}

#[test]
fn bad_override_is_reported() {
    let o = cli(&["evaluate", "--override", "no_such_key=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = cli(&["evaluate", "--override", "latent_dim=eight"]);
    assert!(!o.status.success());
}

#[test]
fn missing_input_files_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["gen-ood", "--out", dir.path().to_str().unwrap(), "--override", "train_images=/nonexistent/images.gz"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/images.gz"));
}
