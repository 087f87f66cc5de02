use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vera_core::evaluator::aggregate_series;
use vera_core::gateway::sim::{SimBackend, SimWorld};
use vera_core::gateway::FrameLoader;
use vera_core::manifest::{expand_labels, load_manifest, load_question_set, load_scores};
use vera_core::prompting::LearnerTemplate;
use vera_core::scorer::{flatten_to_frames, gaussian_smooth, position_weight, score_video, ScoreConfig, ScoreContext, Stages};

fn vera(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vera"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn vera")
}

fn ok(args: &[&str]) -> String {
    let out = vera(args);
    assert!(
        out.status.success(),
        "vera {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small simulated benchmark; returns (dir, config path).
fn bench(train: usize, test: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--train-videos",
        &train.to_string(),
        "--test-videos",
        &test.to_string(),
        "--seed",
        "3",
    ]);
    (dir, out.join("config.toml"))
}

fn line_value(stdout: &str, prefix: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no {prefix:?} line in {stdout}"))
}

#[test]
fn train_writes_questions_that_do_not_regress() {
    let (_dir, cfg) = bench(24, 4);
    let stdout = ok(&["train", "-c", s(&cfg)]);
    let acc0 = line_value(&stdout, "Acc(Q0) = ");
    let best = line_value(&stdout, "Acc(Q*) = ");
    assert!(best >= acc0, "{stdout}");
    let run = cfg.parent().unwrap().join("run");
    let q = load_question_set(&run.join("questions.json")).unwrap();
    assert_eq!(q.len(), 5);
    assert!(run.join("checkpoint.json").exists());
    assert!(run.join("train_log.jsonl").exists());
}

#[test]
fn missing_manifest_is_reported() {
    let (_dir, cfg) = bench(4, 4);
    let out = vera(&["train", "-c", s(&cfg), "--set", "train_manifest=/nonexistent/train.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest not found"));
}

#[test]
fn usage_errors_exit_with_two() {
    let (_dir, cfg) = bench(4, 4);
    assert_eq!(vera(&["score", "-c", s(&cfg), "--set", "gamma=2"]).status.code(), Some(2));
    assert_eq!(vera(&["score", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(vera(&["score", "-c", s(&cfg), "-q", "preset:nope"]).status.code(), Some(2));
}

#[test]
fn score_is_complete_and_reproducible() {
    let (dir, cfg) = bench(4, 6);
    ok(&["score", "-c", s(&cfg), "-q", "preset:qstar"]);
    let run = cfg.parent().unwrap().join("run");
    let manifest = load_manifest(&cfg.parent().unwrap().join("test.jsonl")).unwrap();
    let read_all = |root: &Path| -> Vec<Vec<u8>> {
        manifest
            .videos
            .iter()
            .map(|r| {
                let scores = load_scores(&root.join("scores").join(format!("{}.csv", r.id))).unwrap();
                assert_eq!(scores.len(), r.frame_count);
                fs::read(root.join("scores").join(format!("{}.csv", r.id))).unwrap()
            })
            .collect()
    };
    let first = read_all(&run);
    // A fresh output directory forces new model calls rather than cache hits.
    let other = dir.path().join("again");
    ok(&["score", "-c", s(&cfg), "-q", "preset:qstar", "--out", s(&other)]);
    assert_eq!(read_all(&other), first);
    ok(&["score", "-c", s(&cfg), "-q", "preset:qstar"]);
    assert_eq!(read_all(&run), first);
}

#[test]
fn unknown_video_is_an_error() {
    let (_dir, cfg) = bench(4, 3);
    let out = vera(&["score", "-c", s(&cfg), "-q", "preset:q0", "--videos", "test_000,nope"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn eval_prints_four_decimals_and_rejects_empty_dirs() {
    let (dir, cfg) = bench(4, 6);
    ok(&["score", "-c", s(&cfg), "-q", "preset:qstar"]);
    let stdout = ok(&["eval", "-c", s(&cfg)]);
    let auc_line = stdout.lines().find(|l| l.starts_with("AUC ")).unwrap();
    let digits = auc_line.trim_start_matches("AUC ").split('.').nth(1).unwrap();
    assert_eq!(digits.len(), 4, "{auc_line}");
    let run = cfg.parent().unwrap().join("run");
    assert!(run.join("metrics.json").exists());
    assert!(fs::read_to_string(run.join("roc.csv")).unwrap().starts_with("fpr,tpr\n0,0\n"));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = vera(&["eval", "-c", s(&cfg), "--scores", s(&empty)]);
    assert_eq!(out.status.code(), Some(1));
}

fn sweep_rows(stdout_file: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(stdout_file)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn sweep_limits_match_direct_computation() {
    let (_dir, cfg) = bench(4, 6);
    let root = cfg.parent().unwrap();
    ok(&["sweep", "-c", s(&cfg), "-q", "preset:qstar", "--param", "tau", "--values", "1e-8,0.1"]);
    ok(&["sweep", "-c", s(&cfg), "-q", "preset:qstar", "--param", "kernel_size", "--values", "1,15"]);
    let tau = sweep_rows(&root.join("run/sweep_tau.csv"));
    let omega = sweep_rows(&root.join("run/sweep_kernel_size.csv"));
    assert_eq!(tau.len(), 2);

    let world = SimWorld::load(&root.join("world.json")).unwrap();
    let backend = SimBackend::new(world);
    let manifest = load_manifest(&root.join("test.jsonl")).unwrap();
    let q = vera_core::manifest::parse_question_file(vera_core::prompting::LEARNED_QUESTIONS_PRESET, Path::new("q")).unwrap();
    let config = ScoreConfig::default();
    let learner = LearnerTemplate::preset();
    let frames = FrameLoader::new(None);
    let ctx = ScoreContext {
        config: &config,
        learner: &learner,
        chat: &backend,
        embed: &backend,
        frames: &frames,
        cache_dir: None,
    };
    let mut no_retrieval = Vec::new();
    let mut unsmoothed = Vec::new();
    for r in &manifest.videos {
        let labels = expand_labels(r).unwrap().labels;
        let (_, series) = score_video(&ctx, r, &q, Stages::Full).unwrap();
        let smoothed = gaussian_smooth(&series.initial, config.kernel_size, config.sigma1);
        let a = position_weight(&flatten_to_frames(&smoothed, &series.plan).unwrap(), config.sigma2_ratio);
        let b = position_weight(&flatten_to_frames(&series.ensembled, &series.plan).unwrap(), config.sigma2_ratio);
        no_retrieval.push((r.id.clone(), labels.clone(), a));
        unsmoothed.push((r.id.clone(), labels, b));
    }
    let no_retrieval = aggregate_series(&no_retrieval).unwrap().auc;
    let unsmoothed = aggregate_series(&unsmoothed).unwrap().auc;
    assert!((tau[0].1 - no_retrieval).abs() < 1e-12, "{} vs {no_retrieval}", tau[0].1);
    assert!((omega[0].1 - unsmoothed).abs() < 1e-12, "{} vs {unsmoothed}", omega[0].1);

    let bad = vera(&["sweep", "-c", s(&cfg), "-q", "preset:qstar", "--param", "gamma", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gamma"));
    let even = vera(&["sweep", "-c", s(&cfg), "-q", "preset:qstar", "--param", "kernel_size", "--values", "4"]);
    assert_eq!(even.status.code(), Some(2));
}

#[test]
fn plot_has_one_point_per_frame() {
    let (dir, cfg) = bench(4, 4);
    ok(&["score", "-c", s(&cfg), "-q", "preset:qstar"]);
    let manifest = load_manifest(&cfg.parent().unwrap().join("test.jsonl")).unwrap();
    let record = manifest.videos.iter().find(|r| r.label == 1).unwrap();
    let svg_path = dir.path().join("p.svg");
    ok(&["plot", "-c", s(&cfg), "--video", &record.id, "--svg", s(&svg_path)]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    assert_eq!(pts.split(' ').count(), record.frame_count);
    assert!(svg.contains("ground-truth"));

    let header_only = dir.path().join("empty.csv");
    fs::write(&header_only, "frame_index,score\n").unwrap();
    let out = vera(&["plot", "-c", s(&cfg), "--video", &record.id, "--scores", s(&header_only)]);
    assert!(!out.status.success());
}

#[test]
fn explain_checks_the_segment_range() {
    let (_dir, cfg) = bench(4, 2);
    let manifest = load_manifest(&cfg.parent().unwrap().join("test.jsonl")).unwrap();
    let r = &manifest.videos[0];
    let h = r.frame_count / ScoreConfig::default().interval;
    let stdout = ok(&["explain", "-c", s(&cfg), "-q", "preset:qstar", "--video", &r.id, "--segment", "1"]);
    assert!(stdout.contains("verdict: "), "{stdout}");
    assert!(stdout.contains("explanation: "), "{stdout}");
    let out = vera(&[
        "explain",
        "-c",
        s(&cfg),
        "-q",
        "preset:qstar",
        "--video",
        &r.id,
        "--segment",
        &(h + 1).to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn import_ucf_builds_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("Temporal_Anomaly_Annotation.txt");
    fs::write(
        &ann,
        "Arson011_x264.mp4  Arson  150  420  680  1267\nNormal_Videos_003_x264.mp4  Normal  -1  -1  -1  -1\n",
    )
    .unwrap();
    let counts = dir.path().join("counts.txt");
    fs::write(&counts, "Arson011_x264.mp4 1500\nNormal_Videos_003_x264 900\n").unwrap();
    let out = dir.path().join("ucf.jsonl");
    let stdout = ok(&["import-ucf", s(&ann), "-o", s(&out), "--frame-counts", s(&counts)]);
    assert!(stdout.contains("imported 2 videos (1 anomalous)"), "{stdout}");
    let m = load_manifest(&out).unwrap();
    let arson = m.get("Arson011_x264").unwrap();
    assert_eq!(arson.frame_count, 1500);
    assert_eq!(arson.intervals.as_ref().unwrap().len(), 2);
    assert_eq!(m.get("Normal_Videos_003_x264").unwrap().label, 0);
}
