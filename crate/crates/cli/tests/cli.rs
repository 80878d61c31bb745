use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pvic_cli::config::RunConfig;
use pvic_cli::heatmap::HeatmapImage;

const TINY: &str = "\
[synth]
n_train = 12
n_test = 4
[model]
d_model = 16
sinusoid_d = 8
n_heads = 2
unary_heads = 2
ffn_hidden = 32
unary_ffn = 32
window = 4
[train]
epochs = 2
batch_size = 4
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(ws.path("tiny.cfg"), TINY).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn pvic(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pvic"))
            .current_dir(self.dir.path())
            .env_remove("PVIC_SEED")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.pvic(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn machine_line(out: &Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let line = err.lines().last().unwrap_or("").to_string();
    assert!(line.starts_with("error kind="), "{err}");
    line
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn help_succeeds_and_bad_arguments_exit_2() {
    let ws = Workspace::new();
    assert!(ws.ok(&["--help"]).contains("mask-probe"));
    for args in [&["train", "--bogus", "1"][..], &["train", "--lr", "fast"], &["train", "--batch-size", "0"], &[]] {
        let out = ws.pvic(args);
        assert_eq!(code(&out), 2, "{args:?}");
        assert!(machine_line(&out).contains("code=2"));
    }
    fs::write(ws.path("bad.cfg"), "[train]\nmystery = 1\n").unwrap();
    assert_eq!(code(&ws.pvic(&["synth", "--config", "bad.cfg"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let ws = Workspace::new();
    let out = ws.pvic(&["infer", "--config", "tiny.cfg"]);
    assert_eq!(code(&out), 3);
    assert!(machine_line(&out).starts_with("error kind=io code=3"));
    assert_eq!(code(&ws.pvic(&["synth", "--config", "absent.cfg"])), 3);
}

#[test]
fn end_to_end_pipeline() {
    let ws = Workspace::new();
    let c = ["--config", "tiny.cfg"];
    let with = |extra: &[&'static str]| -> Vec<&str> { extra.iter().copied().chain(c).collect() };
    ws.ok(&with(&["synth"]));
    let log = ws.ok(&with(&["train"]));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let metrics = fs::read_to_string(ws.path("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let saved = RunConfig::parse(&fs::read_to_string(ws.path("run/run.cfg")).unwrap()).unwrap();
    assert_eq!(saved.model.d_model(), 16);

    ws.ok(&with(&["infer"]));
    let results = fs::read_to_string(ws.path("run/results.jsonl")).unwrap();
    assert!(results.lines().count() > 0);
    let hico: serde_json::Value = serde_json::from_str(ws.ok(&with(&["eval"])).trim()).unwrap();
    assert!(hico["full"].as_f64().unwrap() >= 0.0);
    let known: serde_json::Value = serde_json::from_str(ws.ok(&with(&["eval", "--setting", "known-objects"])).trim()).unwrap();
    assert_eq!(known["setting"], "known-objects");
    for s in ["1", "2"] {
        let v: serde_json::Value = serde_json::from_str(ws.ok(&with(&["eval", "--protocol", "vcoco", "--scenario", s])).trim()).unwrap();
        assert!(v["role_ap"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(code(&ws.pvic(&with(&["eval", "--protocol", "vcoco", "--scenario", "3"]))), 2);

    // attention heatmaps: 11 files per (pair, layer, head), identical on rerun
    ws.ok(&with(&["attn-viz", "--image-id", "test_000000", "--pair", "0", "--layer", "0", "--head", "1", "--out-dir", "viz_a"]));
    ws.ok(&with(&["attn-viz", "--image-id", "test_000000", "--pair", "0", "--layer", "0", "--head", "1", "--out-dir", "viz_b"]));
    let (a, b) = (read_dir_sorted(&ws.path("viz_a")), read_dir_sorted(&ws.path("viz_b")));
    assert_eq!(a.len(), 11);
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with("_raw.pgm")).count(), 5);
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with("_softmax.pgm")).count(), 5);
    for (name, bytes) in &a {
        assert!(name.starts_with("pair0_layer0_head1_"));
        let img = HeatmapImage::from_bytes(bytes).unwrap();
        assert!(img.notes.iter().any(|(k, _)| k == "term"));
    }
    let out = ws.pvic(&with(&["attn-viz", "--image-id", "test_000000", "--pair", "999", "--out-dir", "viz_c"]));
    assert_eq!(code(&out), 2);
    assert!(!ws.path("viz_c").exists() || fs::read_dir(ws.path("viz_c")).unwrap().count() == 0);

    let probe: serde_json::Value =
        serde_json::from_str(ws.ok(&with(&["mask-probe", "--image-id", "test_000000", "--pair", "0", "--fraction", "0.1"])).trim()).unwrap();
    assert_eq!(probe["mask_cells"].as_array().unwrap().len(), 26);
    for bad in ["0", "1", "-0.2", "1.5"] {
        let out = ws.pvic(&with(&["mask-probe", "--image-id", "test_000000", "--pair", "0", "--fraction", bad]));
        assert_eq!(code(&out), 2, "fraction {bad}");
    }

    // a missing feature file fails with exit 3 and leaves no results behind
    fs::remove_file(ws.path("run/results.jsonl")).unwrap();
    fs::remove_file(ws.path("data/test/features/test_000002.pvfm")).unwrap();
    assert_eq!(code(&ws.pvic(&with(&["infer"]))), 3);
    assert!(!ws.path("run/results.jsonl").exists());
    assert!(fs::read_dir(ws.path("run")).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().contains(".tmp")));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--config", "tiny.cfg"]);
    ws.ok(&["train", "--config", "tiny.cfg", "--out", "full", "--checkpoint", "full/ck.pvck"]);
    ws.ok(&["train", "--config", "tiny.cfg", "--out", "part", "--checkpoint", "part/ck.pvck", "--epochs", "1"]);
    ws.ok(&["train", "--config", "tiny.cfg", "--out", "part", "--checkpoint", "part/ck.pvck", "--resume"]);
    assert_eq!(fs::read(ws.path("full/ck.pvck")).unwrap(), fs::read(ws.path("part/ck.pvck")).unwrap());
    assert_eq!(fs::read(ws.path("full/metrics.jsonl")).unwrap(), fs::read(ws.path("part/metrics.jsonl")).unwrap());
}

#[test]
fn divergence_exits_4_with_a_dump() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--config", "tiny.cfg"]);
    let out = ws.pvic(&["train", "--config", "tiny.cfg", "--lr", "1e200", "--weight-decay", "0"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(machine_line(&out).starts_with("error kind=numeric code=4"));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("run/nan_dump.json")).unwrap()).unwrap();
    assert!(!dump["image_ids"].as_array().unwrap().is_empty());
}

#[test]
fn env_seed_and_flags_override_the_file() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--config", "tiny.cfg", "--data", "d1"]);
    let a = Command::new(env!("CARGO_BIN_EXE_pvic"))
        .current_dir(ws.dir.path())
        .env("PVIC_SEED", "7")
        .args(["synth", "--config", "tiny.cfg", "--data", "d2"])
        .output()
        .unwrap();
    assert!(a.status.success());
    ws.ok(&["synth", "--config", "tiny.cfg", "--data", "d3", "--data-seed", "7"]);
    let det = |d: &str| fs::read(ws.path(&format!("{d}/train/detections.jsonl"))).unwrap();
    assert_ne!(det("d1"), det("d2"));
    assert_eq!(det("d2"), det("d3"));
}

#[test]
fn gradcheck_passes() {
    let ws = Workspace::new();
    let out = ws.ok(&["gradcheck"]);
    assert!(out.lines().last().unwrap().starts_with("ok"));
    assert_eq!(out.lines().filter(|l| l.starts_with("op ")).count(), pvic::diagnostics::OPS.len());
}
