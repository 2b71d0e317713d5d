//! End-to-end tests of the command-line binary: every subcommand is spawned
//! as a real process and judged by exit code, stderr, and the files it
//! leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tcgan"));
    c.env_remove("TCGAN_SEED");
    c
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tcgan");
    assert!(
        out.status.success(),
        "command failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Relative path and bytes for every regular file under `root`, sorted.
fn walk(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn visit(dir: &Path, root: &Path, acc: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                visit(&path, root, acc);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                acc.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut acc = Vec::new();
    visit(root, root, &mut acc);
    acc.sort_by(|a, b| a.0.cmp(&b.0));
    acc
}

fn synth_corpus(out: &Path, seed: u64, n_shadow: usize, n_nonshadow: usize, size: usize) {
    run_ok(
        bin()
            .arg("synth")
            .args(["--seed", &seed.to_string()])
            .args(["--n-shadow", &n_shadow.to_string()])
            .args(["--n-nonshadow", &n_nonshadow.to_string()])
            .args(["--size", &size.to_string()])
            .arg("--out")
            .arg(out),
    );
}

#[test]
fn help_lists_every_subcommand() {
    let out = run_ok(bin().arg("--help"));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "train-msm", "infer", "eval", "synth", "dump-features"] {
        assert!(text.contains(sub), "--help does not mention {sub}");
    }
}

#[test]
fn synth_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_corpus(&a, 99, 4, 3, 16);
    synth_corpus(&b, 99, 4, 3, 16);

    let strip_manifest = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        // the run manifest embeds wall-clock timestamps, so it is the one
        // file allowed to differ between identically-seeded runs
        files
            .into_iter()
            .filter(|(name, _)| name != "run-manifest.json")
            .collect()
    };
    let fa = strip_manifest(walk(&a));
    let fb = strip_manifest(walk(&b));
    assert_eq!(fa.len(), fb.len());
    assert!(fa.iter().any(|(n, _)| n == "manifest.jsonl"));
    assert_eq!(fa.iter().filter(|(n, _)| n.starts_with("shadow/")).count(), 4);
    for ((na, ba), (nb, bb)) in fa.iter().zip(fb.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ba, bb, "{na} differs between identically-seeded runs");
    }
    assert!(a.join("run-manifest.json").is_file());
}

#[test]
fn environment_seed_overrides_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    // same --seed, different TCGAN_SEED: the environment must win
    for (dir, env) in [(&a, "5"), (&b, "6")] {
        run_ok(
            bin()
                .env("TCGAN_SEED", env)
                .args(["synth", "--seed", "99", "--n-shadow", "1", "--n-nonshadow", "2"])
                .args(["--size", "16"])
                .arg("--out")
                .arg(dir),
        );
    }
    let pa = fs::read(a.join("shadow/s0000.png")).unwrap();
    let pb = fs::read(b.join("shadow/s0000.png")).unwrap();
    assert_ne!(pa, pb, "TCGAN_SEED had no effect over --seed");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "base_lr = 0.0002\nlamda2 = 40.0\n").unwrap();
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--data", "unused", "--out"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lamda2"), "stderr does not name the bad key: {stderr}");
}

#[test]
fn training_needs_two_nonshadow_images() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth_corpus(&corpus, 3, 1, 2, 16);

    // rebuild a dataset with a single non-shadow image
    let data = tmp.path().join("data");
    fs::create_dir_all(data.join("shadow")).unwrap();
    fs::create_dir_all(data.join("nonshadow")).unwrap();
    fs::copy(corpus.join("shadow/s0000.png"), data.join("shadow/s0000.png")).unwrap();
    fs::copy(corpus.join("nonshadow/n0000.png"), data.join("nonshadow/n0000.png")).unwrap();

    let out = bin()
        .arg("train")
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("two distinct"),
        "stderr does not explain the sampling requirement: {stderr}"
    );
}

#[test]
fn msm_branch_requires_classifier_archive() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("infer")
        .args(["--checkpoint", "nonexistent.ckpt"])
        .arg("--input")
        .arg(tmp.path())
        .arg("--output")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--msm"));
}

/// The full pipeline at toy scale: synthesize, train, train the selector,
/// restore a directory, and evaluate the outputs.
#[test]
fn pipeline_from_corpus_to_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth_corpus(&corpus, 11, 5, 3, 16);

    let cfg = tmp.path().join("tiny.toml");
    fs::write(
        &cfg,
        "epochs_total = 1\nepochs_constant = 1\ncheckpoint_every = 5\nmsm_epochs = 2\n\
         [sizes]\npre_crop = 36\ncrop = 32\n",
    )
    .unwrap();

    let run_dir = tmp.path().join("run");
    run_ok(
        bin()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&corpus)
            .arg("--out")
            .arg(&run_dir),
    );
    for file in ["final.ckpt", "losses.csv", "lr.csv", "run-manifest.json"] {
        assert!(run_dir.join(file).is_file(), "train did not write {file}");
    }
    let losses = fs::read_to_string(run_dir.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 5, "header plus one row per iteration");

    let msm_path = tmp.path().join("msm.ckpt");
    run_ok(
        bin()
            .arg("train-msm")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&corpus)
            .arg("--out")
            .arg(&msm_path),
    );
    assert!(msm_path.is_file());
    assert!(tmp.path().join("msm.manifest.json").is_file());

    let restored = tmp.path().join("restored");
    run_ok(
        bin()
            .arg("infer")
            .arg("--checkpoint")
            .arg(run_dir.join("final.ckpt"))
            .arg("--msm")
            .arg(&msm_path)
            .arg("--input")
            .arg(corpus.join("shadow"))
            .arg("--output")
            .arg(&restored)
            .arg("--dump-candidates"),
    );
    for i in 0..5 {
        assert!(restored.join(format!("s{i:04}.png")).is_file());
        for tag in ["branch1", "branch2"] {
            assert!(restored
                .join("candidates")
                .join(format!("s{i:04}-{tag}.png"))
                .is_file());
        }
    }
    let selection = fs::read_to_string(restored.join("selection.csv")).unwrap();
    assert_eq!(selection.lines().count(), 1 + 5);
    assert!(selection.starts_with("file,prob1,prob2,selected_branch"));

    // a fixed-branch run needs no classifier and yields plain outputs
    let fixed = tmp.path().join("fixed");
    run_ok(
        bin()
            .arg("infer")
            .arg("--checkpoint")
            .arg(run_dir.join("final.ckpt"))
            .arg("--input")
            .arg(corpus.join("shadow").join("s0000.png"))
            .arg("--output")
            .arg(&fixed)
            .args(["--branch", "1"]),
    );
    assert!(fixed.join("s0000.png").is_file());
    assert!(!fixed.join("selection.csv").exists());

    let report = tmp.path().join("report.json");
    run_ok(
        bin()
            .arg("eval")
            .arg("--pred")
            .arg(&restored)
            .arg("--ref")
            .arg(corpus.join("gt"))
            .arg("--mask")
            .arg(corpus.join("mask"))
            .arg("--input")
            .arg(corpus.join("shadow"))
            .args(["--metrics", "fid,kid,rmse", "--space", "rgb"])
            .arg("--report")
            .arg(&report),
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["fid", "kid_mean", "kid_std", "rmse_s", "rmse_n", "rmse_a", "rmse_n_i"] {
        assert!(
            json.get(key).map(|v| v.is_number()).unwrap_or(false),
            "report is missing {key}: {json}"
        );
    }
    assert_eq!(json["color_space"], "rgb");
    assert_eq!(json["extractor_id"], "rpconv64-v1");
    assert!(tmp.path().join("report.manifest.json").is_file());

    let feat_dir = tmp.path().join("features");
    run_ok(
        bin()
            .arg("dump-features")
            .arg("--checkpoint")
            .arg(run_dir.join("final.ckpt"))
            .arg("--input")
            .arg(corpus.join("shadow").join("s0001.png"))
            .args(["--channels", "4"])
            .arg("--out")
            .arg(&feat_dir),
    );
    for file in [
        "ste1_features.png",
        "ste2_features.png",
        "ste1_features.bin",
        "ste2_features.bin",
        "run-manifest.json",
    ] {
        assert!(feat_dir.join(file).is_file(), "dump-features did not write {file}");
    }
}

#[test]
fn infer_handles_sizes_off_the_eight_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth_corpus(&corpus, 21, 1, 2, 16);

    let cfg = tmp.path().join("tiny.toml");
    fs::write(
        &cfg,
        "epochs_total = 1\nepochs_constant = 1\nmsm_epochs = 1\n\
         [sizes]\npre_crop = 18\ncrop = 16\n",
    )
    .unwrap();
    let run_dir = tmp.path().join("run");
    run_ok(
        bin()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&corpus)
            .arg("--out")
            .arg(&run_dir),
    );

    // 20x14 is not on the 8-grid; the output must come back at 20x14
    let odd = tmp.path().join("odd.png");
    let img = image::RgbImage::from_fn(14, 20, |x, y| {
        image::Rgb([(x * 17 % 256) as u8, (y * 11 % 256) as u8, 128])
    });
    img.save(&odd).unwrap();

    let out_dir = tmp.path().join("out");
    run_ok(
        bin()
            .arg("infer")
            .arg("--checkpoint")
            .arg(run_dir.join("final.ckpt"))
            .arg("--input")
            .arg(&odd)
            .arg("--output")
            .arg(&out_dir)
            .args(["--branch", "2"]),
    );
    let restored = image::open(out_dir.join("odd.png")).unwrap();
    assert_eq!(restored.width(), 14);
    assert_eq!(restored.height(), 20);
}
