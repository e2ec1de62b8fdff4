use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avlae::data::{export_frames, load_video};
use serde_json::{json, Value};
use tempfile::TempDir;

fn avlae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avlae")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_config(out_dir: &Path) -> Value {
    json!({
        "model": {"d": 4, "T": 4, "H": 16, "W": 16, "gen_channels": 2, "enc_channels": 2, "disc_hidden": 8},
        "optim": {"batch": 2, "steps": 4, "seed": 3},
        "flow": {"iterations": 3, "scale": 2},
        "data": {"n_videos": 12, "object_size": 4, "speeds": [1]},
        "io": {"out_dir": out_dir, "checkpoint_every": 2, "log_every": 1}
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny config into `tmp/<name>` and returns the run directory.
fn trained(tmp: &Path, name: &str) -> PathBuf {
    let run = tmp.join(name);
    let cfg = write_config(tmp, &format!("{name}.json"), &tiny_config(&run));
    let out = avlae(&["train", "--config", path_str(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    run
}

fn untimed_log(run: &Path) -> Vec<Value> {
    fs::read_to_string(run.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v["wall_ms"] = json!(0.0);
            v
        })
        .collect()
}

#[test]
fn missing_config_names_the_path() {
    let out = avlae(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("/nonexistent/run.json"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("run"));
    cfg["optim"]["learning_rate"] = json!(0.1);
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let out = avlae(&["train", "--config", path_str(&path)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn bad_flags_exit_with_user_error() {
    assert_eq!(code(&avlae(&["train", "--steps", "many"])), 1);
    assert_eq!(code(&avlae(&["frobnicate"])), 1);
    assert_eq!(code(&avlae(&["--help"])), 0);
}

#[test]
fn train_writes_run_artifacts_and_repeats_exactly() {
    let tmp = TempDir::new().unwrap();
    let a = trained(tmp.path(), "a");
    for f in ["config.json", "log.jsonl", "step_000002.avc", "step_000002.json", "final.avc", "run.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let log = untimed_log(&a);
    assert_eq!(log.len(), 4 * 3);
    assert_eq!(log[0]["phase"], "I");
    assert_eq!(log.last().unwrap()["step"], 4);
    let meta = read_json(&a.join("final.json"));
    assert_eq!(meta["step"], 4);
    assert_eq!(meta["seed"], 3);

    // Same config from another directory: identical logs and checkpoint bytes.
    let b = tmp.path().join("b");
    let cfg = write_config(tmp.path(), "b.json", &tiny_config(&b));
    assert_eq!(code(&avlae(&["train", "--config", path_str(&cfg)])), 0);
    assert_eq!(untimed_log(&b), log);
    assert_eq!(fs::read(a.join("final.avc")).unwrap(), fs::read(b.join("final.avc")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("file_dir");
    let cfg = write_config(tmp.path(), "c.json", &tiny_config(&run));
    let flagged = tmp.path().join("flag_dir");
    let out = avlae(&[
        "train",
        "--config",
        path_str(&cfg),
        "--steps",
        "1",
        "--out-dir",
        path_str(&flagged),
        "--seed",
        "9",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!run.exists());
    let resolved = read_json(&flagged.join("config.json"));
    assert_eq!(resolved["optim"]["steps"], 1);
    assert_eq!(resolved["optim"]["seed"], 9);
    // Values the flags leave alone come from the file.
    assert_eq!(resolved["optim"]["batch"], 2);
    assert_eq!(read_json(&flagged.join("run.json"))["steps"], 1);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let straight = trained(tmp.path(), "straight");

    let resumed = tmp.path().join("resumed");
    let cfg = write_config(tmp.path(), "r.json", &tiny_config(&resumed));
    let half = avlae(&["train", "--config", path_str(&cfg), "--steps", "2"]);
    assert_eq!(code(&half), 0, "{}", stderr(&half));
    let ckpt = resumed.join("final.avc");
    let out = avlae(&["train", "--config", path_str(&cfg), "--resume", path_str(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(straight.join("final.avc")).unwrap(),
        fs::read(resumed.join("final.avc")).unwrap()
    );
    assert_eq!(untimed_log(&straight), untimed_log(&resumed));
}

#[test]
fn resume_with_a_different_config_is_refused_unless_forced() {
    let tmp = TempDir::new().unwrap();
    let run = trained(tmp.path(), "base");
    let mut other = tiny_config(&tmp.path().join("other"));
    other["optim"]["seed"] = json!(4);
    other["optim"]["steps"] = json!(5);
    let cfg = write_config(tmp.path(), "other.json", &other);
    let ckpt = run.join("final.avc");
    let out = avlae(&["train", "--config", path_str(&cfg), "--resume", path_str(&ckpt)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("fingerprint"), "{}", stderr(&out));
    let forced = avlae(&["train", "--config", path_str(&cfg), "--resume", path_str(&ckpt), "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn sample_emits_videos_grid_and_metadata() {
    let tmp = TempDir::new().unwrap();
    let run = trained(tmp.path(), "s");
    let ckpt = run.join("final.avc");
    let out_dir = tmp.path().join("samples");
    let out = avlae(&["sample", "--checkpoint", path_str(&ckpt), "--n", "5", "--out", path_str(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let meta = read_json(&out_dir.join("meta.json"));
    assert_eq!(meta["videos"].as_array().unwrap().len(), 5);
    assert_eq!(meta["fingerprint"], read_json(&run.join("run.json"))["fingerprint"]);
    assert!(out_dir.join("grid.png").is_file());
    let v = load_video(&out_dir.join("sample_0004.avt")).unwrap();
    assert_eq!(v.shape(), &[3, 4, 16, 16]);
    assert!(v.data().iter().all(|x| x.abs() <= 1.0));

    // Same seed, same bytes.
    let again = tmp.path().join("again");
    avlae(&["sample", "--checkpoint", path_str(&ckpt), "--n", "5", "--out", path_str(&again)]);
    assert_eq!(
        fs::read(out_dir.join("sample_0002.avt")).unwrap(),
        fs::read(again.join("sample_0002.avt")).unwrap()
    );
}

#[test]
fn sample_refuses_a_mismatched_config() {
    let tmp = TempDir::new().unwrap();
    let run = trained(tmp.path(), "m");
    let mut other = tiny_config(&run);
    other["optim"]["k2"] = json!(0.5);
    let cfg = write_config(tmp.path(), "mismatch.json", &other);
    let ckpt = run.join("final.avc");
    let out_dir = tmp.path().join("o");
    let args = ["sample", "--checkpoint", path_str(&ckpt), "--config", path_str(&cfg), "--out", path_str(&out_dir)];
    let out = avlae(&args);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("fingerprint"), "{}", stderr(&out));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&avlae(&forced)), 0);
}

#[test]
fn swap_pairs_share_the_fixed_latent_bytes() {
    let tmp = TempDir::new().unwrap();
    let run = trained(tmp.path(), "w");
    let ckpt = run.join("final.avc");
    for (mode, shared) in [("fix-appearance", "z_A"), ("fix-motion", "z_M")] {
        let out_dir = tmp.path().join(mode);
        let out = avlae(&[
            "swap",
            "--checkpoint",
            path_str(&ckpt),
            "--mode",
            mode,
            "--n",
            "3",
            "--out",
            path_str(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let meta = read_json(&out_dir.join("meta.json"));
        assert_eq!(meta["shared"], shared);
        let pairs = meta["pairs"].as_array().unwrap();
        assert_eq!(pairs.len(), 3);
        for p in pairs {
            assert_eq!(p["identical"], true);
            assert_eq!(p["shared_latent_a"], p["shared_latent_b"]);
            assert_eq!(p["shared_latent_a"].as_str().unwrap().len(), 4 * 4 * 2);
            let [a, b] = [0, 1].map(|k| load_video(&out_dir.join(p["videos"][k].as_str().unwrap())).unwrap());
            assert_ne!(a, b, "the varied latent differs within a pair");
        }
        assert_ne!(pairs[0]["shared_latent_a"], pairs[1]["shared_latent_a"]);
    }
}

#[test]
fn reconstruct_reads_videos_and_frame_folders() {
    let tmp = TempDir::new().unwrap();
    let run = trained(tmp.path(), "rc");
    let ckpt = run.join("final.avc");
    let samples = tmp.path().join("samples");
    avlae(&["sample", "--checkpoint", path_str(&ckpt), "--n", "1", "--out", path_str(&samples)]);
    let input = samples.join("sample_0000.avt");

    let out_dir = tmp.path().join("rec");
    let out = avlae(&[
        "reconstruct",
        "--checkpoint",
        path_str(&ckpt),
        "--input",
        path_str(&input),
        "--frame",
        "4",
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(load_video(&out_dir.join("input.avt")).unwrap(), load_video(&input).unwrap());
    assert_eq!(load_video(&out_dir.join("output.avt")).unwrap().shape(), &[3, 4, 16, 16]);
    let meta = read_json(&out_dir.join("meta.json"));
    assert_eq!(meta["frame"], 4);
    assert!(meta["mean_abs_error"].as_f64().unwrap().is_finite());

    let frames = tmp.path().join("frames");
    export_frames(&load_video(&input).unwrap(), &frames).unwrap();
    let from_dir = tmp.path().join("rec_dir");
    let out = avlae(&[
        "reconstruct",
        "--checkpoint",
        path_str(&ckpt),
        "--input",
        path_str(&frames),
        "--out",
        path_str(&from_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(from_dir.join("grid.png").is_file());
}

#[test]
fn reconstruct_frame_out_of_range_is_a_user_error() {
    let tmp = TempDir::new().unwrap();
    let run = trained(tmp.path(), "oor");
    let ckpt = run.join("final.avc");
    let samples = tmp.path().join("samples");
    avlae(&["sample", "--checkpoint", path_str(&ckpt), "--n", "1", "--out", path_str(&samples)]);
    let input = samples.join("sample_0000.avt");
    for frame in ["0", "5"] {
        let out = avlae(&[
            "reconstruct",
            "--checkpoint",
            path_str(&ckpt),
            "--input",
            path_str(&input),
            "--frame",
            frame,
            "--out",
            path_str(&tmp.path().join("x")),
        ]);
        assert_eq!(code(&out), 1, "frame {frame}");
        assert!(stderr(&out).contains("out of range"), "{}", stderr(&out));
    }
}

#[test]
fn ablation_variants_train() {
    let tmp = TempDir::new().unwrap();
    let variants = [
        json!({}),
        json!({"k1_zero": true}),
        json!({"k2_zero": true}),
        json!({"k1_zero": true, "k2_zero": true}),
        json!({"no_motion_encoder": true}),
    ];
    let mut sizes = Vec::new();
    for (i, ablation) in variants.into_iter().enumerate() {
        let run = tmp.path().join(format!("v{i}"));
        let mut cfg = tiny_config(&run);
        cfg["ablation"] = ablation;
        cfg["optim"]["steps"] = json!(1);
        let path = write_config(tmp.path(), &format!("v{i}.json"), &cfg);
        let out = avlae(&["train", "--config", path_str(&path)]);
        assert_eq!(code(&out), 0, "variant {i}: {}", stderr(&out));
        let log = untimed_log(&run);
        let rec = &log[2]["losses"];
        match i {
            1 => assert_eq!(rec["L_rec_motion"], 0.0),
            2 => assert_eq!(rec["L_rec_appearance"], 0.0),
            3 | 4 => assert_eq!(rec["L_rec"], 0.0),
            _ => assert!(rec["L_rec"].as_f64().unwrap() > 0.0),
        }
        sizes.push(fs::metadata(run.join("final.avc")).unwrap().len());
    }
    assert!(sizes[4] < sizes[0], "the encoder-free variant stores fewer tensors");
}

#[test]
fn diverging_training_aborts_with_runtime_code() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("nan");
    let mut cfg = tiny_config(&run);
    cfg["optim"]["alpha"] = json!(1e30);
    cfg["optim"]["steps"] = json!(6);
    let path = write_config(tmp.path(), "nan.json", &cfg);
    let out = avlae(&["train", "--config", path_str(&path)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
    assert!(!run.join("final.avc").exists());
}

#[test]
fn eval_reports_probe_and_gated_metrics() {
    let tmp = TempDir::new().unwrap();
    let run = trained(tmp.path(), "ev");
    let out = avlae(&[
        "eval",
        "--checkpoint",
        path_str(&run.join("final.avc")),
        "--n",
        "12",
        "--extractor-videos",
        "40",
        "--probe-pairs",
        "4",
    ]);
    let report: Value = serde_json::from_slice(&out.stdout).expect("json report");
    assert_eq!(report["n"], 12);
    assert!(report["probe"]["appearance_drift"].as_f64().unwrap().is_finite());
    assert!(report["extractor_accuracy"].as_f64().is_some());
    if report["extractor_gate"] == true {
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(report["fid_generated"].as_f64().unwrap() >= 0.0);
        assert!(report["inception_score"].as_f64().unwrap() >= 1.0);
    } else {
        assert_eq!(code(&out), 2);
        assert!(report["fid_generated"].is_null());
        assert!(stderr(&out).contains("gate"), "{}", stderr(&out));
    }
}
