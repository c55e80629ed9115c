use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
    "corpus": {"image_size": 16, "toy_size": 60},
    "fusion": {"image_size": 16, "patch_size": 8, "width": 8, "encoder_layers": 1, "projection_dim": 8, "max_text_len": 24},
    "captioner": {"model": {"image_size": 16, "patch_size": 8, "width": 8, "encoder_layers": 1, "decoder_layers": 1, "max_len": 16},
                  "train": {"epochs": 1}, "itm": {"epochs": 1}},
    "trainer": {"epochs": 2, "batch_size": 16}
}"#;

fn scarwid(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scarwid"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("SCARWID_MLLM_ENDPOINT")
        .env_remove("SCARWID_MLLM_API_KEY")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn evaluate_on_toy_output_reports_five_folds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&scarwid(&["gen-toy"], &cfg, &out));
    ok(&scarwid(&["evaluate"], &cfg, &out));
    let results = json(&out.join("evaluate/results.json"));
    assert_eq!(results["folds"].as_array().unwrap().len(), 5);
    assert_eq!(results["mode"], "image_text");
    assert!(results["summary"]["acc"]["mean"].is_number());
}

#[test]
fn classify_without_store_names_build_support() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&scarwid(&["gen-toy"], &cfg, &out));
    ok(&scarwid(&["train-fusion"], &cfg, &out));
    let o = scarwid(&["classify"], &cfg, &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("build-support"), "{err}");
    ok(&scarwid(&["build-support"], &cfg, &out));
    ok(&scarwid(&["classify"], &cfg, &out));
    assert!(out.join("classify/predictions.json").is_file());
}

#[test]
fn identical_runs_have_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut run = Vec::new();
        for stage in ["gen-toy", "caption", "train-fusion", "build-support", "classify"] {
            let o = scarwid(&[stage, "--seed", "7", "--mode", "image_only"], &cfg, &out);
            ok(&o);
            let m = json(&out.join(format!("manifests/{stage}.json")));
            assert_eq!(m["seed"], 7);
            assert_eq!(m["mode"], "image_only");
            run.push(m["run_hash"].as_str().unwrap().to_string());
        }
        hashes.push(run);
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn caption_stage_defaults_to_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&scarwid(&["gen-toy"], &cfg, &out));
    ok(&scarwid(&["caption"], &cfg, &out));
    let m = json(&out.join("manifests/caption.json"));
    assert_eq!(m["caption_mode"], "replay");
    assert!(m["config_hash"].as_str().unwrap().len() == 64);
    assert!(m["versions"]["scarwid"].is_string());
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = config(dir.path(), r#"{"retrieval": {"k": 0}, "trainer": {"margin": -1}}"#);
    let o = scarwid(&["gen-toy"], &bad, &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("retrieval.k") && err.contains("margin"), "{err}");

    let good = config(dir.path(), "");
    assert!(!scarwid(&["train"], &good, &out).status.success());
    assert!(!scarwid(&["gen-toy", "--mode", "video"], &good, &out).status.success());

    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".scarwid.lock"), "").unwrap();
    let o = scarwid(&["gen-toy"], &good, &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}
