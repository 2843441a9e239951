use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tinyvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinyvid")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let out = tinyvid(&["config", "--tiny"]);
    assert!(out.status.success());
    let path = dir.join("tiny.toml");
    fs::write(&path, &out.stdout).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_data_is_reproducible_and_zero_clips_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = tinyvid(&["--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap(), "gen-data"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["manifest.csv", "spec.toml", "clip_00003.f32", "clip_00003.tok"] {
        assert_eq!(fs::read(a.join("data").join(name)).unwrap(), fs::read(b.join("data").join(name)).unwrap(), "{name}");
    }
    assert!(a.join("run.toml").exists());

    let zero = dir.path().join("zero.toml");
    fs::write(&zero, "[data]\nnum_clips = 0\n").unwrap();
    let z = dir.path().join("z");
    let o = tinyvid(&["--config", zero.to_str().unwrap(), "--out", z.to_str().unwrap(), "gen-data"]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(z.join("data/manifest.csv")).unwrap().lines().count(), 1);
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[dit]\nlayerz = 2\n").unwrap();
    let o = tinyvid(&["--config", bad.to_str().unwrap(), "schedule"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("layerz"));
}

#[test]
fn verify_exit_status_follows_the_report() {
    let ok = tinyvid(&["verify", "numerics.conv.causality", "diffusion.schedule"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let faulty = tinyvid(&["verify", "--inject-fault", "numerics.conv.causality"]);
    assert!(!faulty.status.success());
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL numerics.conv.causality"));
}

#[test]
fn train_and_sample_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = tinyvid(&["--config", &cfg, "--out", run_s, "train-vae"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let vae = run.join("vae.ckpt");
    let o = tinyvid(&["--out", run_s, "train-dit", "--vae", vae.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let header = fs::read_to_string(run.join("dit_loss.csv")).unwrap();
    assert!(header.starts_with("step,"));
    let dit = run.join("dit.ckpt");
    let mut videos = Vec::new();
    for name in ["s1", "s2"] {
        let out = dir.path().join(name);
        let o = tinyvid(&[
            "--out",
            out.to_str().unwrap(),
            "sample",
            "--vae",
            vae.to_str().unwrap(),
            "--dit",
            dit.to_str().unwrap(),
            "--prompt",
            "red square right",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("smoothness"));
        assert!(out.join("frames/frame_000.ppm").exists());
        videos.push(fs::read(out.join("video.f32")).unwrap());
    }
    assert_eq!(videos[0], videos[1]);
}

#[test]
fn ctxpar_check_reports_exact_equivalence() {
    let o = tinyvid(&["ctxpar-check", "--ranks", "2", "--frames", "9", "--size", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("encoder max |diff| 0e0; decoder max |diff| 0e0"));
}
