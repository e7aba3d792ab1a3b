//! End-to-end tests of the command-line interface, driving the compiled
//! binary the way a user would.

use std::path::Path;
use std::process::{Command, Output};

use slim_attention::io::{load_slim_model, read_manifest, save_slim_model};
use slim_attention::model::ValueMap;

fn slimattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slimattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path, extra: &[&str]) {
    let dir = dir.to_str().unwrap();
    let mut args = vec![
        "synth", "--d", "32", "--heads", "4", "--dk", "8", "--layers", "2", "--seed", "11",
        "--out", dir,
    ];
    args.extend_from_slice(extra);
    let out = slimattn(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_writes_a_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("m");
    synth(&dir, &[]);
    assert!(dir.join("manifest.json").is_file());
    assert!(dir.join("weights.bin").is_file());
    let manifest = read_manifest(&dir).unwrap();
    assert_eq!(manifest.config.d, 32);
    assert_eq!(manifest.seed, Some(11));
    assert!(!manifest.slim);
}

#[test]
fn synth_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &[]);
    synth(&b, &[]);
    let ma = read_manifest(&a).unwrap();
    let mb = read_manifest(&b).unwrap();
    assert_eq!(ma.blob_crc32, mb.blob_crc32);
}

#[test]
fn synth_rejects_bad_dims() {
    let out = slimattn(&[
        "synth", "--d", "0", "--heads", "1", "--dk", "1", "--layers", "1", "--out", "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transform_then_verify_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let slim = tmp.path().join("m-kv");
    synth(&model, &[]);
    let out = slimattn(&[
        "transform",
        "--model",
        model.to_str().unwrap(),
        "--mode",
        "kv",
        "--out",
        slim.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = read_manifest(&slim).unwrap();
    assert!(manifest.slim);

    let out = slimattn(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--transformed",
        slim.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 : True"));
    assert!(stdout.contains("1 : True"));
}

#[test]
fn verify_fails_on_a_corrupted_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let slim_dir = tmp.path().join("m-kv");
    synth(&model, &[]);
    let out = slimattn(&[
        "transform",
        "--model",
        model.to_str().unwrap(),
        "--mode",
        "kv",
        "--out",
        slim_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // poke one value map entry and rewrite the directory consistently
    let mut slim = load_slim_model(&slim_dir).unwrap();
    if let ValueMap::Kv(m) = &mut slim.layers[1].transformed.map {
        let v = m.get(0, 0) + 0.01;
        m.set(0, 0, v);
    }
    save_slim_model(&slim, &slim_dir).unwrap();

    let out = slimattn(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--transformed",
        slim_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1 : False"));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("layer(s) 1"));
}

#[test]
fn both_transform_directions_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    synth(&model, &[]);
    for mode in ["kv", "vk"] {
        let slim = tmp.path().join(format!("m-{mode}"));
        let out = slimattn(&[
            "transform",
            "--model",
            model.to_str().unwrap(),
            "--mode",
            mode,
            "--out",
            slim.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "mode {mode}");
        let out = slimattn(&[
            "verify",
            "--model",
            model.to_str().unwrap(),
            "--transformed",
            slim.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "mode {mode}");
    }
}

#[test]
fn rect_transform_notes_the_size_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let slim = tmp.path().join("m-rect");
    // d = 16, e = 64: aspect ratio 4
    let out = slimattn(&[
        "synth",
        "--d",
        "16",
        "--heads",
        "4",
        "--dk",
        "16",
        "--layers",
        "1",
        "--seed",
        "3",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = slimattn(&[
        "transform",
        "--model",
        model.to_str().unwrap(),
        "--mode",
        "rect-kv",
        "--out",
        slim.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let manifest = read_manifest(&slim).unwrap();
    assert_eq!(manifest.wkv_size_ratio, Some(4.0));
    let loaded = load_slim_model(&slim).unwrap();
    assert_eq!(loaded.layers[0].transformed.map.matrix().shape(), (64, 64));
}

#[test]
fn equivalence_passes_on_square_and_rect_models() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    synth(&model, &["--bias"]);
    let out = slimattn(&[
        "equivalence",
        "--model",
        model.to_str().unwrap(),
        "--tokens",
        "6",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    let rect = tmp.path().join("rect");
    let out = slimattn(&[
        "synth",
        "--d",
        "16",
        "--heads",
        "4",
        "--dk",
        "8",
        "--layers",
        "1",
        "--seed",
        "5",
        "--out",
        rect.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = slimattn(&[
        "equivalence",
        "--model",
        rect.to_str().unwrap(),
        "--tokens",
        "5",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn equivalence_rejects_rope_with_positionless_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    synth(&model, &[]);
    for variant in ["xcache", "vcache"] {
        let out = slimattn(&[
            "equivalence",
            "--model",
            model.to_str().unwrap(),
            "--rope",
            "--variants",
            variant,
        ]);
        assert_eq!(out.status.code(), Some(2), "variant {variant}");
    }
}

#[test]
fn equivalence_rejects_rope_on_odd_head_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m");
    let out = slimattn(&[
        "synth",
        "--d",
        "15",
        "--heads",
        "1",
        "--dk",
        "15",
        "--layers",
        "1",
        "--seed",
        "9",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = slimattn(&[
        "equivalence",
        "--model",
        model.to_str().unwrap(),
        "--rope",
        "--variants",
        "vanilla,slim-opt",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cost_report_is_byte_stable() {
    for preset in ["chips", "whisper", "tables"] {
        let a = slimattn(&["cost-report", "--preset", preset, "--batch", "64"]);
        let b = slimattn(&["cost-report", "--preset", preset, "--batch", "64"]);
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout, "preset {preset}");
    }
}

#[test]
fn cost_report_custom_cache_config() {
    let out = slimattn(&[
        "cost-report",
        "--preset",
        "tables",
        "--config",
        "d=3072,layers=32,ctx=131072",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("25769803776"));
    assert!(stdout.contains("25.8B"));
}

#[test]
fn cost_report_markdown_format() {
    let out = slimattn(&["cost-report", "--preset", "chips", "--format", "md"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("| model"));
    assert!(stdout.contains("| 583"));
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    let out = slimattn(&["cost-report", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let out = slimattn(&["equivalence", "--model", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1)); // runtime failure, not usage
}
