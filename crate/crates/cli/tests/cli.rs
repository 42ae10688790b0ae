use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn talkgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talkgate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn fixtures(seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = talkgate(&["make-fixtures", "--seed", &seed.to_string(), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn make_fixtures_is_deterministic() {
    let (a, b) = (fixtures(5), fixtures(5));
    let ta = tree(a.path());
    assert!(ta.len() > 20);
    assert_eq!(ta, tree(b.path()));
}

#[test]
fn curate_end_to_end() {
    let fx = fixtures(2);
    let out = tempfile::tempdir().unwrap();
    let rpt = out.path().join("rpt");
    let cur = fx.path().join("curation");
    let o = talkgate(&[
        "curate",
        "--in",
        p(&cur.join("clips.jsonl")),
        "--thresholds",
        p(&cur.join("thresholds.json")),
        "--out",
        p(&rpt),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.txt", "records.jsonl", "rejections.json", "config.json"] {
        assert!(rpt.join(f).is_file(), "{f}");
    }
    let table = fs::read_to_string(rpt.join("report.txt")).unwrap();
    assert!(table.starts_with("Curation Stage"));
    assert!(table.contains("Data Size (hours)"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cur.join("manifest.json")).unwrap()).unwrap();
    let want: Vec<&str> = manifest["expected_survivors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let got: Vec<String> = fs::read_to_string(rpt.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|r| r.get("rejected_at").is_none())
        .map(|r| r["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(got, want);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rpt.join("report.json")).unwrap()).unwrap();
    let ms: Vec<u64> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["duration_ms"].as_u64().unwrap())
        .collect();
    assert_eq!(ms.len(), 5);
    assert!(ms.windows(2).all(|w| w[1] <= w[0]));
}

fn sample_args<'a>(fx: &'a Path, audio_clip: &str, scales: &'a str, out: &'a Path) -> Vec<String> {
    let clip = fx.join("clips/clip_000");
    [
        "sample",
        "--ckpt",
        p(&fx.join("checkpoint")),
        "--ref",
        p(&clip.join("ref.lltf")),
        "--masks",
        p(&clip.join("masks")),
        "--audio",
        p(&fx.join("clips").join(audio_clip).join("audio.lltf")),
        "--frames",
        "7",
        "--seed",
        "11",
        "--scales",
        scales,
        "--out",
        p(out),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_sample(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    talkgate(&refs)
}

#[test]
fn sample_with_zero_scales_ignores_audio() {
    let fx = fixtures(3);
    let out = tempfile::tempdir().unwrap();
    let before = tree(fx.path());
    let runs = [
        ("clip_000", "0,0,0", "a"),
        ("clip_001", "0,0,0", "b"),
        ("clip_000", "0,0,0", "c"),
        ("clip_001", "1,1,1", "d"),
    ];
    for (audio, scales, name) in runs {
        let o = run_sample(sample_args(fx.path(), audio, scales, &out.path().join(name)));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let video = |n: &str| fs::read(out.path().join(n).join("video.lltf")).unwrap();
    assert_eq!(video("a"), video("b"));
    assert_eq!(video("a"), video("c"));
    assert_ne!(video("a"), video("d"));
    assert_eq!(
        fs::read(out.path().join("a/trace.json")).unwrap(),
        fs::read(out.path().join("c/trace.json")).unwrap()
    );
    // nothing written next to the inputs
    assert_eq!(tree(fx.path()), before);
}

#[test]
fn validation_failures_exit_2_without_outputs() {
    let fx = fixtures(4);
    let out = tempfile::tempdir().unwrap();

    let missing_flag = out.path().join("missing");
    let o = talkgate(&["sample", "--ckpt", p(&fx.path().join("checkpoint")), "--out", p(&missing_flag)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!missing_flag.exists());

    let bad_scales = out.path().join("scales");
    let mut args = sample_args(fx.path(), "clip_000", "0,1", &bad_scales);
    let o = run_sample(args.clone());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--scales"));
    assert!(!bad_scales.exists());

    let no_ref = out.path().join("noref");
    args = sample_args(fx.path(), "clip_000", "1,1,1", &no_ref);
    args[4] = p(&fx.path().join("nope.lltf")).to_string();
    let o = run_sample(args);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--ref"));
    assert!(!no_ref.exists());

    let cfg = out.path().join("bad.json");
    fs::write(&cfg, r#"{"stage": 2, "seed": 1, "lr": 1e-3, "bogus": 1}"#).unwrap();
    let train_out = out.path().join("train");
    let o = talkgate(&["train", "--config", p(&cfg), "--out", p(&train_out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert!(!train_out.exists());

    let o = talkgate(&["make-fixtures", "--out", p(&out.path().join("fx"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.path().join("fx").exists());
}

#[test]
fn train_is_reproducible_and_echoes_config() {
    let fx = fixtures(6);
    let out = tempfile::tempdir().unwrap();
    let cfg = fx.path().join("train.json");
    for name in ["a", "b"] {
        let o = talkgate(&["train", "--config", p(&cfg), "--steps", "5", "--out", p(&out.path().join(name))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    // config.json differs only in the echoed out_dir
    let artifacts = |n: &str| {
        let mut t = tree(&out.path().join(n));
        t.remove(Path::new("config.json"));
        t
    };
    assert!(artifacts("a") == artifacts("b"));
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["steps"], 5);
    assert_eq!(echoed["stage"], 2);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["losses"].as_array().unwrap().len(), 5);
    assert!(out.path().join("a/checkpoint/manifest.json").is_file());

    // the trained checkpoint samples
    let o = run_sample(sample_args(fx.path(), "clip_000", "1,1,1", &out.path().join("s")).into_iter()
        .map(|a| if a.ends_with("checkpoint") { p(&out.path().join("a/checkpoint")).to_string() } else { a })
        .collect());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_and_gradcheck() {
    let fx = fixtures(7);
    let ev = fx.path().join("eval");
    let o = talkgate(&["eval", "sync", "--video", p(&ev.join("video.lltf")), "--audio", p(&ev.join("audio.lltf"))]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["best_offset"], 3);

    let out = tempfile::tempdir().unwrap();
    let o = talkgate(&[
        "eval",
        "frechet",
        "--a",
        p(&ev.join("real.lltf")),
        "--b",
        p(&ev.join("real.lltf")),
        "--out",
        p(out.path()),
    ]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("result.json")).unwrap()).unwrap();
    assert!(r["frechet_distance"].as_f64().unwrap() < 1e-8);

    let lat = fx.path().join("clips/clip_000/latents.lltf");
    let o = talkgate(&["eval", "ssim", "--a", p(&lat), "--b", p(&lat), "--window", "3"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((r["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    let o = talkgate(&["eval", "ssim", "--a", p(&lat), "--b", p(&lat), "--window", "4"]);
    assert_eq!(o.status.code(), Some(2));

    let o = talkgate(&["gradcheck", "--config", p(&fx.path().join("train.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
}
