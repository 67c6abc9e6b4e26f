use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rgan::cli::{canonical_hash, RunManifest};
use rgan::training::read_metrics_log;

const TINY_A2: &str = r#"
approach = "a2"
image_size = [32, 32]
batch_size = 2
styles_per_batch = 4
checkpoint_every = 5

[a2.content_encoder]
depth = 3
base_channels = 8
max_channels = 16

[a2.style_encoder]
stem_channels = 8
growth_rate = 4
blocks = 2
layers_per_block = 2
"#;

fn rgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("RGAN_NUM_THREADS", "2")
        .output()
        .expect("spawn rgan")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    contents: PathBuf,
    styles: PathBuf,
    config: PathBuf,
}

fn fixture(n_contents: &str) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let fx = root.join("fx");
    ok(&rgan(&[
        "fixtures", "--out", s(&fx), "--size", "32", "--n-contents", n_contents, "--n-per-class", "4",
    ]));
    let config = root.join("tiny.toml");
    fs::write(&config, TINY_A2).unwrap();
    Fixture {
        contents: fx.join("contents"),
        styles: fx.join("styles"),
        _tmp: tmp,
        root,
        config,
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn train(f: &Fixture, out: &Path, steps: &str, seed: &str) -> Output {
    rgan(&[
        "train", "--config", s(&f.config), "--steps", steps, "--seed", seed,
        "--contents", s(&f.contents), "--styles", s(&f.styles), "--out", s(out),
    ])
}

#[test]
fn synthesize_store_is_reproducible() {
    let f = fixture("2");
    // Three style images in a flat directory.
    let flat = f.root.join("flat_styles");
    fs::create_dir_all(&flat).unwrap();
    for (i, class) in ["stripes", "checker", "dots"].iter().enumerate() {
        let src = fs::read_dir(f.styles.join(class)).unwrap().next().unwrap().unwrap().path();
        fs::copy(src, flat.join(format!("style_{i}.png"))).unwrap();
    }
    let (a, b) = (f.root.join("m1"), f.root.join("m2"));
    for out in [&a, &b] {
        ok(&rgan(&[
            "synthesize", "--contents", s(&f.contents), "--styles", s(&flat), "--size", "32", "--seed", "7",
            "--out", s(out),
        ]));
    }
    let cells = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("cell_"))
        .count();
    assert_eq!(cells, 6);
    assert!(a.join("matrix.json").is_file());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let m: RunManifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "synthesize");
    assert_eq!(m.seed, 7);
    assert_eq!(m.config_hash, canonical_hash(&m.config).unwrap());
    assert!(m.outputs.contains(&"matrix.json".to_string()));
}

#[test]
fn missing_style_dir_fails_naming_the_path() {
    let f = fixture("2");
    let out = f.root.join("m");
    let missing = f.root.join("no_such_styles");
    let r = rgan(&["synthesize", "--contents", s(&f.contents), "--styles", s(&missing), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains(s(&missing)), "{}", stderr(&r));
    assert!(!out.exists());
}

#[test]
fn a1_without_matrix_is_rejected_before_compute() {
    let f = fixture("2");
    let out = f.root.join("run");
    let r = rgan(&["train", "--approach", "a1", "--batch-size-typo"]);
    assert!(!r.status.success());
    let r = rgan(&["train", "--approach", "a1", "--steps", "0", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let msg = stderr(&r);
    // Every problem is listed at once.
    assert!(msg.contains("--matrix") && msg.contains("steps"), "{msg}");
    assert!(!out.exists());
}

#[test]
fn train_logs_every_step_and_is_deterministic() {
    let f = fixture("4");
    let (a, b) = (f.root.join("r1"), f.root.join("r2"));
    ok(&train(&f, &a, "10", "3"));
    ok(&train(&f, &b, "5", "3"));
    let la = read_metrics_log(&a.join("metrics.jsonl")).unwrap();
    let lb = read_metrics_log(&b.join("metrics.jsonl")).unwrap();
    assert_eq!(la.len(), 10);
    assert_eq!(la[..5], lb[..]);
    assert!(a.join("checkpoints/step_000005/manifest.json").is_file());
    assert!(a.join("checkpoints/step_000010/manifest.json").is_file());
    let m: RunManifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config["steps"], 10);
    assert_eq!(m.config["a2"]["style_encoder"]["growth_rate"], 4);
}

#[test]
fn unknown_config_keys_are_errors() {
    let f = fixture("2");
    let bad = f.root.join("bad.toml");
    fs::write(&bad, TINY_A2.replace("growth_rate", "growth")).unwrap();
    let r = rgan(&[
        "train", "--config", s(&bad), "--steps", "1", "--contents", s(&f.contents), "--styles", s(&f.styles),
        "--out", s(&f.root.join("run")),
    ]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("growth"), "{}", stderr(&r));
}

#[test]
fn transfer_and_eval_round_trip() {
    let f = fixture("4");
    let run = f.root.join("run");
    ok(&train(&f, &run, "5", "0"));
    let ckpt = run.join("checkpoints/step_000005");
    let content = f.contents.join("content_000.png");
    let style = fs::read_dir(f.styles.join("dots")).unwrap().next().unwrap().unwrap().path();

    let (t1, t2) = (f.root.join("t1"), f.root.join("t2"));
    for out in [&t1, &t2] {
        let r = rgan(&[
            "transfer", "--checkpoint", s(&ckpt), "--content", s(&content), "--style", s(&style), "--out", s(out),
        ]);
        ok(&r);
        assert!(String::from_utf8_lossy(&r.stdout).contains("ms"));
    }
    let png = fs::read(t1.join("transfer.png")).unwrap();
    assert_eq!(png, fs::read(t2.join("transfer.png")).unwrap());
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let wrong = rgan(&[
        "transfer", "--checkpoint", s(&ckpt), "--content", s(&content), "--style", s(&style), "--approach", "a1",
        "--out", s(&f.root.join("t3")),
    ]);
    assert!(!wrong.status.success());
    assert!(stderr(&wrong).contains("a2"), "{}", stderr(&wrong));

    let ev = f.root.join("eval").join("nested");
    ok(&rgan(&[
        "eval", "--checkpoint", s(&ckpt), "--styles", s(&f.styles), "--contents", s(&f.contents), "--grid", "2x3",
        "--out", s(&ev),
    ]));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("cluster_report.json")).unwrap()).unwrap();
    assert_eq!(report["per_class"].as_array().unwrap().len(), 3);
    let grid = image::open(ev.join("grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (4 * 32, 3 * 32));
    let params: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("param_report.json")).unwrap()).unwrap();
    assert_eq!(params["defaults"]["a2_smaller"], true);
    assert!(ev.join("pca.csv").is_file() && ev.join("manifest.json").is_file());

    // Flip one byte of a parameter blob.
    let blob = fs::read_dir(ckpt.join("blobs")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    let out = f.root.join("t4");
    let r = rgan(&[
        "transfer", "--checkpoint", s(&ckpt), "--content", s(&content), "--style", s(&style), "--out", s(&out),
    ]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("checksum"), "{}", stderr(&r));
}

#[test]
fn failed_run_is_quarantined() {
    let f = fixture("2");
    let out = f.root.join("ev");
    // A checkpoint directory that does not exist: eval creates nothing
    // before failing, so nothing is left behind.
    let r = rgan(&[
        "eval", "--checkpoint", s(&f.root.join("nope")), "--styles", s(&f.styles), "--contents", s(&f.contents),
        "--out", s(&out),
    ]);
    assert!(!r.status.success());
    assert!(!out.exists());

    // A single-image class makes the cluster report fail after the
    // output directory was created.
    let run = f.root.join("run");
    ok(&train(&f, &run, "1", "0"));
    let odd = f.root.join("odd_styles");
    for (class, take) in [("stripes", 4), ("dots", 1)] {
        fs::create_dir_all(odd.join(class)).unwrap();
        let mut files: Vec<_> = fs::read_dir(f.styles.join(class)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        for src in files.into_iter().take(take) {
            fs::copy(&src, odd.join(class).join(src.file_name().unwrap())).unwrap();
        }
    }
    let r = rgan(&[
        "eval", "--checkpoint", s(&run.join("checkpoints/step_000001")), "--styles", s(&odd), "--contents",
        s(&f.contents), "--grid", "1x1", "--out", s(&out),
    ]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("dots"), "{}", stderr(&r));
    assert!(!out.exists());
    assert!(f.root.join("ev.failed").is_dir());
}
