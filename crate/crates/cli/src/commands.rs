use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use vera_core::evaluator::{aggregate, aggregate_series, MetricReport};
use vera_core::gateway::sim::SimWorld;
use vera_core::manifest::{
    expand_labels, import_ucf_annotations, load_frame_counts, load_manifest, load_scores, write_manifest,
    write_question_set, write_scores, DatasetManifest, Split, UcfImport, VideoRecord,
};
use vera_core::prompting::{parse_binary_verdict, parse_explanation, render_scoring_prompt, QuestionSet};
use vera_core::sampler::plan_segments;
use vera_core::scorer::{score_video, write_segments, ScoreConfig, ScoreContext, Stages};
use vera_core::synthetic::{default_vocabulary, generate, merge_worlds, SynthConfig};
use vera_core::trainer::{run_training, TrainContext, TrainPaths};

use crate::config::{questions_from, BackendKind, RunConfig};
use crate::{plot as svg, Common, UsageError};

fn setup(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(world) = &common.sim_world {
        cfg.backend = BackendKind::Sim;
        cfg.sim_world = Some(world.clone());
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Explicit spec, else the questions learned into the output directory.
fn resolve_questions(cfg: &RunConfig, spec: Option<&str>) -> Result<QuestionSet> {
    match spec {
        Some(s) => questions_from(s),
        None => {
            let learned = cfg.output_dir.join("questions.json");
            if !learned.exists() {
                return Err(UsageError(format!(
                    "no --questions given and {} does not exist (run `vera train` or pass preset:qstar)",
                    learned.display()
                ))
                .into());
            }
            questions_from(&learned.to_string_lossy())
        }
    }
}

fn find_video<'a>(manifest: &'a DatasetManifest, id: &str) -> Result<&'a VideoRecord> {
    manifest
        .get(id)
        .ok_or_else(|| UsageError(format!("unknown video id {id:?} in manifest {:?}", manifest.name)).into())
}

pub fn train(common: &Common, resume: bool) -> Result<()> {
    let cfg = setup(common)?;
    let manifest = cfg.train_manifest()?;
    let backends = cfg.backends()?;
    let learner = cfg.learner_template()?;
    let optimizer = cfg.optimizer_template()?;
    let q0 = cfg.initial_questions()?;
    let train_cfg = cfg.train_config();
    let frames = cfg.frame_loader();
    let ctx = TrainContext {
        config: &train_cfg,
        learner: &learner,
        optimizer: &optimizer,
        backend: backends.chat(),
        frames: &frames,
    };
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let paths = TrainPaths::in_dir(&cfg.output_dir);
    let outcome = run_training(&manifest, &ctx, &q0, Some(&paths), resume)?;
    let q_path = cfg.output_dir.join("questions.json");
    write_question_set(&q_path, &outcome.best)?;

    let acc0 = outcome.state.history.first().map_or(f64::NAN, |h| h.1);
    println!(
        "train {} videos, validation {} videos, {} iterations",
        outcome.train_ids.len(),
        outcome.val_ids.len(),
        outcome.state.t
    );
    println!("Acc(Q0) = {acc0:.4}");
    println!("Acc(Q*) = {:.4} at iteration {}", outcome.state.best_acc, outcome.best.iteration);
    for (i, q) in outcome.best.questions().iter().enumerate() {
        println!("  {}. {q}", i + 1);
    }
    println!("wrote {}", q_path.display());
    Ok(())
}

struct Scoring {
    cfg: RunConfig,
    manifest: DatasetManifest,
    questions: QuestionSet,
}

fn scoring_setup(common: &Common, questions: Option<&str>) -> Result<Scoring> {
    let cfg = setup(common)?;
    let manifest = cfg.test_manifest()?;
    let questions = resolve_questions(&cfg, questions)?;
    Ok(Scoring {
        cfg,
        manifest,
        questions,
    })
}

pub fn score(common: &Common, questions: Option<&str>, videos: &[String], stages: Stages) -> Result<()> {
    let Scoring {
        cfg,
        manifest,
        questions,
    } = scoring_setup(common, questions)?;
    let selected: Vec<&VideoRecord> = if videos.is_empty() {
        manifest.videos.iter().collect()
    } else {
        videos.iter().map(|id| find_video(&manifest, id)).collect::<Result<_>>()?
    };
    let backends = cfg.backends()?;
    let learner = cfg.learner_template()?;
    let score_cfg = cfg.score_config();
    let frames = cfg.frame_loader();
    let ctx = ScoreContext {
        config: &score_cfg,
        learner: &learner,
        chat: backends.chat(),
        embed: backends.embed()?,
        frames: &frames,
        cache_dir: Some(cfg.output_dir.join("cache")),
    };
    let scores_dir = cfg.output_dir.join("scores");
    let segments_dir = cfg.output_dir.join("segments");

    let mut failures = Vec::new();
    for (i, record) in selected.iter().enumerate() {
        info!("[{}/{}] scoring {}", i + 1, selected.len(), record.id);
        match score_video(&ctx, record, &questions, stages) {
            Ok((frame_scores, series)) => {
                write_scores(&scores_dir.join(format!("{}.csv", record.id)), &frame_scores)?;
                write_segments(&segments_dir.join(format!("{}.csv", record.id)), &series)?;
            }
            Err(e) => {
                eprintln!("error: {}: {e}", record.id);
                failures.push(record.id.clone());
            }
        }
    }
    println!(
        "scored {} of {} videos into {}",
        selected.len() - failures.len(),
        selected.len(),
        scores_dir.display()
    );
    if !failures.is_empty() {
        bail!("{} video(s) failed: {}", failures.len(), failures.join(", "));
    }
    Ok(())
}

fn print_report(report: &MetricReport) {
    println!("AUC {:.4}", report.auc);
    println!("AP {:.4}", report.ap);
    println!(
        "frames {} (positive {}), videos {}",
        report.n_frames, report.n_positive, report.n_videos
    );
}

fn roc_csv(report: &MetricReport) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in &report.roc_points {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    out
}

pub fn eval(common: &Common, manifest: Option<PathBuf>, scores: Option<PathBuf>) -> Result<()> {
    let cfg = setup(common)?;
    let manifest = match manifest {
        Some(p) if !p.exists() => bail!("manifest not found: {}", p.display()),
        Some(p) => load_manifest(&p)?,
        None => cfg.test_manifest()?,
    };
    let scores_dir = scores.unwrap_or_else(|| cfg.output_dir.join("scores"));
    let has_scores = fs::read_dir(&scores_dir)
        .map(|entries| {
            entries
                .filter_map(Result::ok)
                .any(|e| e.path().extension().is_some_and(|x| x == "csv"))
        })
        .unwrap_or(false);
    if !has_scores {
        bail!("no score files in {}", scores_dir.display());
    }
    let report = aggregate(&manifest, &scores_dir)?;
    print_report(&report);
    fs::create_dir_all(&cfg.output_dir)?;
    let report_path = cfg.output_dir.join("metrics.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(cfg.output_dir.join("roc.csv"), roc_csv(&report))?;
    println!("wrote {}", report_path.display());
    Ok(())
}

/// Parameters of steps 2 and 3 that a sweep may vary.
const SWEEP_PARAMS: [&str; 5] = ["k_ratio", "kernel_size", "sigma1", "tau", "sigma2_ratio"];

fn with_param(base: &ScoreConfig, param: &str, raw: &str) -> Result<ScoreConfig> {
    let float = || -> Result<f64> {
        raw.trim()
            .parse::<f64>()
            .map_err(|_| UsageError(format!("{param}: {raw:?} is not a number")).into())
    };
    let mut c = base.clone();
    match param {
        "k_ratio" => c.k_ratio = float()?,
        "sigma1" => c.sigma1 = float()?,
        "tau" => c.tau = float()?,
        "sigma2_ratio" => c.sigma2_ratio = float()?,
        "kernel_size" => {
            c.kernel_size = raw
                .trim()
                .parse()
                .map_err(|_| UsageError(format!("kernel_size: {raw:?} is not a positive integer")))?
        }
        other => {
            return Err(UsageError(format!(
                "unknown sweep parameter {other:?} (expected one of {})",
                SWEEP_PARAMS.join(", ")
            ))
            .into())
        }
    }
    c.validate().map_err(|e| UsageError(format!("{param}={raw}: {e}")))?;
    Ok(c)
}

pub fn sweep(common: &Common, questions: Option<&str>, param: &str, values: &[String]) -> Result<()> {
    let Scoring {
        cfg,
        manifest,
        questions,
    } = scoring_setup(common, questions)?;
    let base = cfg.score_config();
    // Reject the whole grid before any model call.
    let grid: Vec<ScoreConfig> = values.iter().map(|v| with_param(&base, param, v)).collect::<Result<_>>()?;
    let backends = cfg.backends()?;
    let learner = cfg.learner_template()?;
    let frames = cfg.frame_loader();
    let labels: HashMap<&str, Vec<u8>> = manifest
        .videos
        .iter()
        .map(|r| Ok((r.id.as_str(), expand_labels(r)?.labels)))
        .collect::<Result<_>>()?;

    let mut table = format!("{param},auc,ap\n");
    println!("{param:>14} {:>8} {:>8}", "AUC", "AP");
    for (raw, score_cfg) in values.iter().zip(&grid) {
        let ctx = ScoreContext {
            config: score_cfg,
            learner: &learner,
            chat: backends.chat(),
            embed: backends.embed()?,
            frames: &frames,
            cache_dir: Some(cfg.output_dir.join("cache")),
        };
        let mut series = Vec::with_capacity(manifest.len());
        for record in &manifest.videos {
            let (frame_scores, _) =
                score_video(&ctx, record, &questions, Stages::Full).with_context(|| format!("scoring {}", record.id))?;
            series.push((record.id.clone(), labels[record.id.as_str()].clone(), frame_scores));
        }
        let report = aggregate_series(&series)?;
        let raw = raw.trim();
        println!("{raw:>14} {:>8.4} {:>8.4}", report.auc, report.ap);
        table.push_str(&format!("{raw},{},{}\n", report.auc, report.ap));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("sweep_{param}.csv"));
    fs::write(&path, table)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn plot(
    common: &Common,
    video: &str,
    scores: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = setup(common)?;
    let manifest = match manifest {
        Some(p) if !p.exists() => bail!("manifest not found: {}", p.display()),
        Some(p) => load_manifest(&p)?,
        None => cfg.test_manifest()?,
    };
    let record = find_video(&manifest, video)?;
    let scores_path = scores.unwrap_or_else(|| cfg.output_dir.join("scores").join(format!("{video}.csv")));
    if !scores_path.exists() {
        bail!("score file not found: {}", scores_path.display());
    }
    let values = load_scores(&scores_path)?;
    if values.is_empty() {
        bail!("score file {} has no rows", scores_path.display());
    }
    if values.len() != record.frame_count {
        bail!(
            "score file {} has {} rows but {video} has {} frames",
            scores_path.display(),
            values.len(),
            record.frame_count
        );
    }
    let intervals = record.intervals.clone().unwrap_or_default();
    let out = out.unwrap_or_else(|| cfg.output_dir.join("plots").join(format!("{video}.svg")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, svg::render(video, &values, &intervals))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn explain(common: &Common, questions: Option<&str>, video: &str, segment: usize) -> Result<()> {
    let Scoring {
        cfg,
        manifest,
        questions,
    } = scoring_setup(common, questions)?;
    let record = find_video(&manifest, video)?;
    let score_cfg = cfg.score_config();
    score_cfg.validate()?;
    let plan = plan_segments(record, score_cfg.interval, score_cfg.window_seconds, score_cfg.per_window)?;
    let h = plan.segment_count();
    if segment == 0 || segment > h {
        return Err(UsageError(format!("segment {segment} out of range 1..={h} for {video}")).into());
    }
    let backends = cfg.backends()?;
    let learner = cfg.learner_template()?;
    let frames = cfg.frame_loader();
    let u = segment - 1;
    let images = frames.load(record, plan.window_samples[u].as_slice())?;
    let prompt = render_scoring_prompt(&learner, &questions, images.len());
    let reply = backends.chat().chat(&score_cfg.decoding.learner(prompt, images))?;
    let (lo, hi) = plan.windows[u];
    println!("{video} segment {segment}/{h} (center {}, frames {lo}-{hi})", plan.centers[u]);
    match parse_binary_verdict(&reply) {
        Ok(v) => println!("verdict: {v}"),
        Err(e) => println!("verdict: unparseable ({e})"),
    }
    println!(
        "explanation: {}",
        parse_explanation(&reply).unwrap_or_else(|| "(none given)".into())
    );
    Ok(())
}

pub fn import_ucf(
    annotations: &Path,
    output: &Path,
    frame_counts: Option<PathBuf>,
    frames_root: Option<String>,
    frame_source: String,
    fps: f64,
) -> Result<()> {
    if !annotations.exists() {
        bail!("annotation file not found: {}", annotations.display());
    }
    let options = UcfImport {
        fps_default: fps,
        frame_source,
        frames_root,
        frame_counts: match frame_counts {
            Some(p) => load_frame_counts(&p)?,
            None => HashMap::new(),
        },
    };
    let manifest = import_ucf_annotations(annotations, &options)?;
    write_manifest(output, &manifest)?;
    let anomalous = manifest.videos.iter().filter(|r| r.label == 1).count();
    println!(
        "imported {} videos ({anomalous} anomalous) into {}",
        manifest.len(),
        output.display()
    );
    Ok(())
}

pub fn synth(out: &Path, train_videos: usize, test_videos: usize, accuracy: f64, keywords: bool, seed: u64) -> Result<()> {
    let part = |name: &str, split: Split, videos: usize, seed: u64| -> Result<(DatasetManifest, SimWorld)> {
        generate(&SynthConfig {
            name: name.into(),
            split,
            videos,
            detector_accuracy: accuracy,
            vocabulary: if keywords { default_vocabulary() } else { Vec::new() },
            seed,
            ..SynthConfig::default()
        })
        .map_err(|e| UsageError(format!("invalid synthetic settings: {e}")).into())
    };
    let (train, train_world) = part("train", Split::Train, train_videos, seed)?;
    let (test, test_world) = part("test", Split::Test, test_videos, seed.wrapping_add(1))?;
    let world = merge_worlds(&[train_world, test_world]).expect("two parts");

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_manifest(&out.join("train.jsonl"), &train)?;
    write_manifest(&out.join("test.jsonl"), &test)?;
    fs::write(out.join("world.json"), world.to_json())?;
    let config = RunConfig {
        train_manifest: Some("train.jsonl".into()),
        test_manifest: Some("test.jsonl".into()),
        output_dir: "run".into(),
        backend: BackendKind::Sim,
        sim_world: Some("world.json".into()),
        max_iterations: 60,
        validation_period: 5,
        val_fraction: 0.25,
        seed,
        ..RunConfig::default()
    };
    let config_path = out.join("config.toml");
    fs::write(&config_path, toml::to_string(&config)?)?;
    println!(
        "wrote {} train and {} test videos, world.json and {}",
        train.len(),
        test.len(),
        config_path.display()
    );
    Ok(())
}
