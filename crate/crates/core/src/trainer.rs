//! The verbalized optimization loop over guiding questions.
//!
//! Each iteration draws a batch of training videos, asks the learner for a
//! verdict on each, then asks the optimizer to rewrite the questions given
//! predictions and targets. Every `validation_period` iterations the current
//! questions are scored on a held-out split and the best set is kept.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::gateway::{ChatBackend, Decoding, FrameLoader, GatewayError, DEFAULT_IMAGE_LIMIT, DEFAULT_PARALLELISM};
use crate::manifest::{write_file, DatasetManifest, ManifestError, VideoRecord};
use crate::parallel::map_bounded;
use crate::prompting::{
    parse_binary_verdict, parse_question_set, render_learner_prompt, render_optimizer_prompt, LearnerTemplate,
    OptimizerTemplate, PromptError, QuestionSet,
};
use crate::sampler::{sample_frames, SamplerError, SamplingStrategy};
use crate::{digest_hex, seed_from};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least {needed} usable videos, found {found}")]
    TooFewVideos { found: usize, needed: usize },
    #[error("video {video_id} has {frames} frames, fewer than the {needed} sampled per video")]
    TooShort {
        video_id: String,
        frames: usize,
        needed: usize,
    },
    #[error("unusable learner reply for {video_id}: {source}")]
    Parse { video_id: String, source: PromptError },
    #[error("validation set has no usable videos")]
    EmptyValidation,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iterations: u64,
    pub batch_size: usize,
    pub frames_per_video: usize,
    pub question_count: usize,
    pub validation_period: u64,
    pub val_fraction: f64,
    pub sampling_strategy: SamplingStrategy,
    pub seed: u64,
    pub max_epochs: u64,
    /// Extra optimizer calls after an unparseable reply.
    pub optimizer_retries: u32,
    pub parallelism: usize,
    pub image_limit: usize,
    pub decoding: Decoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            batch_size: 2,
            frames_per_video: 8,
            question_count: 5,
            validation_period: 100,
            val_fraction: 0.1,
            sampling_strategy: SamplingStrategy::Uniform,
            seed: 0,
            max_epochs: 10,
            optimizer_retries: 2,
            parallelism: DEFAULT_PARALLELISM,
            image_limit: DEFAULT_IMAGE_LIMIT,
            decoding: Decoding::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.frames_per_video == 0 || self.question_count == 0 {
            return fail("batch_size, frames_per_video and question_count must be positive".into());
        }
        if self.validation_period == 0 || self.max_epochs == 0 || self.parallelism == 0 {
            return fail("validation_period, max_epochs and parallelism must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} must lie strictly between 0 and 1", self.val_fraction));
        }
        let images = self.batch_size * self.frames_per_video;
        if images > self.image_limit {
            return fail(format!(
                "batch_size * frames_per_video = {images} exceeds the image limit {}",
                self.image_limit
            ));
        }
        let d = &self.decoding;
        if !(d.learner_temperature >= 0.0 && d.optimizer_temperature >= 0.0) || d.max_tokens == 0 {
            return fail("temperatures must be non-negative and max_tokens positive".into());
        }
        Ok(())
    }

    /// Identity of everything but the iteration budget, so a run may be
    /// resumed with a larger `max_iterations`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.max_iterations = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        digest_hex(&[text.as_bytes()])
    }
}

/// Backend, templates and frame access shared by every training call.
pub struct TrainContext<'a> {
    pub config: &'a TrainConfig,
    pub learner: &'a LearnerTemplate,
    pub optimizer: &'a OptimizerTemplate,
    pub backend: &'a dyn ChatBackend,
    pub frames: &'a FrameLoader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub t: u64,
    pub epoch: u64,
    pub current_q: QuestionSet,
    pub best_q: QuestionSet,
    pub best_acc: f64,
    pub history: Vec<(u64, f64)>,
}

/// Label-stratified split with `max(1, round(fraction * N))` validation
/// videos, capped so training keeps at least one. Original order is kept.
pub fn split_validation(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), TrainError> {
    let n = manifest.len();
    if n < 2 {
        return Err(TrainError::TooFewVideos { found: n, needed: 2 });
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::Config(format!("val_fraction {val_fraction} must lie strictly between 0 and 1")));
    }
    let k = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[b"split", &seed.to_le_bytes()]));
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| manifest.videos[i].label == 1);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut kp = ((k * pos.len()) as f64 / n as f64).round() as usize;
    if k >= 2 && !pos.is_empty() && !neg.is_empty() {
        kp = kp.clamp(1, k - 1);
    }
    kp = kp.min(pos.len());
    let mut kn = k - kp;
    if kn > neg.len() {
        kn = neg.len();
        kp = k - kn;
    }
    let mut chosen = vec![false; n];
    for &i in pos[..kp].iter().chain(&neg[..kn]) {
        chosen[i] = true;
    }
    let mut i = 0;
    let val = manifest.filtered(|_| {
        i += 1;
        chosen[i - 1]
    });
    let mut i = 0;
    let train = manifest.filtered(|_| {
        i += 1;
        !chosen[i - 1]
    });
    Ok((train, val))
}

fn sampled_indices(ctx: &TrainContext, record: &VideoRecord, seed: u64) -> Result<Vec<usize>, TrainError> {
    let s = ctx.config.frames_per_video;
    if record.frame_count < s {
        return Err(TrainError::TooShort {
            video_id: record.id.clone(),
            frames: record.frame_count,
            needed: s,
        });
    }
    Ok(sample_frames(ctx.config.sampling_strategy, record.frame_count, s, seed)?.into_vec())
}

/// One learner verdict for the given frames; retries once on an unparseable reply.
fn learner_verdict(ctx: &TrainContext, record: &VideoRecord, indices: &[usize], q: &QuestionSet) -> Result<u8, TrainError> {
    let images = ctx.frames.load(record, indices)?;
    let prompt = render_learner_prompt(ctx.learner, q, images.len());
    let request = ctx.config.decoding.learner(prompt, images);
    let mut last = PromptError::NoVerdict;
    for _ in 0..2 {
        match parse_binary_verdict(&ctx.backend.chat(&request)?) {
            Ok(v) => return Ok(v),
            Err(e) => last = e,
        }
    }
    Err(TrainError::Parse {
        video_id: record.id.clone(),
        source: last,
    })
}

/// Samples frames with `sample_seed` and returns the learner's verdict.
pub fn learner_step(ctx: &TrainContext, record: &VideoRecord, q: &QuestionSet, sample_seed: u64) -> Result<u8, TrainError> {
    let indices = sampled_indices(ctx, record, sample_seed)?;
    learner_verdict(ctx, record, &indices, q)
}

#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub record: &'a VideoRecord,
    pub indices: Vec<usize>,
    pub pred: u8,
    pub target: u8,
}

/// Rewrites `q` from one batch outcome. Falls back to `q` when no reply
/// yields exactly `question_count` questions. The result carries `t + 1`.
pub fn optimizer_step(ctx: &TrainContext, batch: &[BatchItem], q: &QuestionSet, t: u64) -> Result<QuestionSet, TrainError> {
    let m = ctx.config.question_count;
    let mut images = Vec::new();
    for item in batch {
        images.extend(ctx.frames.load(item.record, &item.indices)?);
    }
    let preds: Vec<u8> = batch.iter().map(|b| b.pred).collect();
    let targets: Vec<u8> = batch.iter().map(|b| b.target).collect();
    let counts: Vec<usize> = batch.iter().map(|b| b.indices.len()).collect();
    let prompt = render_optimizer_prompt(ctx.optimizer, q, &preds, &targets, &counts, m)?;
    let request = ctx.config.decoding.optimizer(prompt, images);
    for attempt in 0..=ctx.config.optimizer_retries {
        match parse_question_set(&ctx.backend.chat(&request)?, m) {
            Ok(mut next) => {
                next.iteration = t + 1;
                return Ok(next);
            }
            Err(e) if e.is_reply_failure() => warn!("optimizer reply rejected (attempt {}): {e}", attempt + 1),
            Err(e) => return Err(e.into()),
        }
    }
    warn!("optimizer gave no usable question set at t={t}; keeping the current questions");
    let mut same = q.clone();
    same.iteration = t + 1;
    Ok(same)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub accuracy: f64,
    pub evaluated: usize,
    pub skipped: Vec<String>,
}

/// Fraction of validation videos whose verdict matches the video label.
pub fn validate(ctx: &TrainContext, q: &QuestionSet, val: &DatasetManifest) -> Result<Validation, TrainError> {
    let s = ctx.config.frames_per_video;
    let (usable, short): (Vec<&VideoRecord>, Vec<&VideoRecord>) = val.videos.iter().partition(|r| r.frame_count >= s);
    let skipped: Vec<String> = short.iter().map(|r| r.id.clone()).collect();
    for id in &skipped {
        warn!("validation skips {id}: fewer than {s} frames");
    }
    if usable.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let seed = ctx.config.seed;
    let results = map_bounded(&usable, ctx.config.parallelism, |_, r| {
        learner_step(ctx, r, q, seed_from(&[b"val", &seed.to_le_bytes(), r.id.as_bytes()]))
    });
    let mut correct = 0usize;
    for (r, verdict) in usable.iter().zip(results) {
        if verdict? == r.label {
            correct += 1;
        }
    }
    Ok(Validation {
        accuracy: correct as f64 / usable.len() as f64,
        evaluated: usable.len(),
        skipped,
    })
}

/// Where a run persists its checkpoint and transcript.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.json"),
            log: dir.join("train_log.jsonl"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config_digest: String,
    data_digest: String,
    state: TrainState,
    log_len: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: QuestionSet,
    pub state: TrainState,
    /// Every transcript line, including lines replayed from a resumed run.
    pub log: Vec<String>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

struct Transcript {
    lines: Vec<String>,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl Transcript {
    fn push(&mut self, value: serde_json::Value) -> Result<(), TrainError> {
        let line = value.to_string();
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| ManifestError::io(self.path.as_deref().unwrap_or(Path::new("")), e))?;
        }
        self.lines.push(line);
        Ok(())
    }
}

fn ckpt_error(path: &Path, message: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut text = serde_json::to_string_pretty(ckpt).expect("checkpoint serializes");
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    write_file(&tmp, text.as_bytes())?;
    fs::rename(&tmp, path).map_err(|e| ManifestError::io(path, e))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ckpt_error(path, e.to_string()))
}

fn read_log_prefix(path: &Path, len: usize) -> Result<Vec<String>, TrainError> {
    let file = File::open(path).map_err(|e| ManifestError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .take(len)
        .collect::<Result<_, _>>()
        .map_err(|e| ManifestError::io(path, e))?;
    if lines.len() < len {
        return Err(ckpt_error(path, format!("log has {} lines, checkpoint expects {len}", lines.len())));
    }
    Ok(lines)
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[b"epoch", &seed.to_le_bytes(), &epoch.to_le_bytes()]));
    order.shuffle(&mut rng);
    order
}

/// Runs the loop from `q0`, or from the checkpoint in `paths` when `resume`
/// is set and one exists. Stops after `min(P, max_epochs * ceil(N / n))`
/// iterations and returns the best questions seen.
pub fn run_training(
    manifest: &DatasetManifest,
    ctx: &TrainContext,
    q0: &QuestionSet,
    paths: Option<&TrainPaths>,
    resume: bool,
) -> Result<TrainOutcome, TrainError> {
    let cfg = ctx.config;
    cfg.validate()?;
    let usable = manifest.filtered(|r| {
        let ok = r.frame_count >= cfg.frames_per_video;
        if !ok {
            warn!("excluding {}: {} frames < {}", r.id, r.frame_count, cfg.frames_per_video);
        }
        ok
    });
    let (train, val) = split_validation(&usable, cfg.val_fraction, cfg.seed)?;
    let n = train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let limit = cfg.max_iterations.min(cfg.max_epochs * batches_per_epoch);
    let train_ids: Vec<String> = train.videos.iter().map(|r| r.id.clone()).collect();
    let val_ids: Vec<String> = val.videos.iter().map(|r| r.id.clone()).collect();
    let data_digest = {
        let joined = format!("{}\n--\n{}", train_ids.join("\n"), val_ids.join("\n"));
        digest_hex(&[joined.as_bytes()])
    };
    let config_digest = cfg.digest();

    let existing = match paths {
        Some(p) if resume && p.checkpoint.exists() => Some(load_checkpoint(&p.checkpoint)?),
        Some(p) if resume => {
            warn!("no checkpoint at {}; starting fresh", p.checkpoint.display());
            None
        }
        _ => None,
    };

    let mut transcript = Transcript {
        lines: Vec::new(),
        file: None,
        path: paths.map(|p| p.log.clone()),
    };
    let mut state = match existing {
        Some(ckpt) => {
            let p = paths.expect("resume implies paths");
            if ckpt.config_digest != config_digest {
                return Err(ckpt_error(&p.checkpoint, "config differs from the checkpointed run"));
            }
            if ckpt.data_digest != data_digest {
                return Err(ckpt_error(&p.checkpoint, "training data differs from the checkpointed run"));
            }
            transcript.lines = read_log_prefix(&p.log, ckpt.log_len)?;
            let mut text = transcript.lines.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            fs::write(&p.log, text).map_err(|e| ManifestError::io(&p.log, e))?;
            transcript.file = Some(
                OpenOptions::new()
                    .append(true)
                    .open(&p.log)
                    .map_err(|e| ManifestError::io(&p.log, e))?,
            );
            info!("resuming at t={}", ckpt.state.t);
            ckpt.state
        }
        None => {
            if let Some(p) = paths {
                write_file(&p.log, b"")?;
                transcript.file = Some(
                    OpenOptions::new()
                        .append(true)
                        .open(&p.log)
                        .map_err(|e| ManifestError::io(&p.log, e))?,
                );
            }
            let v0 = validate(ctx, q0, &val)?;
            let mut best = q0.clone();
            best.val_accuracy = Some(v0.accuracy);
            transcript.push(json!({"kind": "validation", "t": 0, "accuracy": v0.accuracy, "best_accuracy": v0.accuracy, "improved": true}))?;
            info!("t=0 validation accuracy {:.4}", v0.accuracy);
            TrainState {
                t: 0,
                epoch: 0,
                current_q: q0.clone(),
                best_q: best,
                best_acc: v0.accuracy,
                history: vec![(0, v0.accuracy)],
            }
        }
    };
    let checkpoint = |state: &TrainState, log_len: usize| -> Result<(), TrainError> {
        match paths {
            Some(p) => save_checkpoint(
                &p.checkpoint,
                &Checkpoint {
                    config_digest: config_digest.clone(),
                    data_digest: data_digest.clone(),
                    state: state.clone(),
                    log_len,
                },
            ),
            None => Ok(()),
        }
    };
    checkpoint(&state, transcript.lines.len())?;

    while state.t < limit {
        let epoch = state.t / batches_per_epoch;
        let cursor = (state.t % batches_per_epoch) as usize;
        let order = epoch_order(n, cfg.seed, epoch);
        let lo = cursor * cfg.batch_size;
        let members: Vec<&VideoRecord> = order[lo..(lo + cfg.batch_size).min(n)]
            .iter()
            .map(|&i| &train.videos[i])
            .collect();

        let outcomes = map_bounded(&members, cfg.parallelism, |_, r| -> Result<BatchItem, TrainError> {
            let seed = seed_from(&[b"train", &cfg.seed.to_le_bytes(), &epoch.to_le_bytes(), r.id.as_bytes()]);
            let indices = sampled_indices(ctx, r, seed)?;
            let pred = learner_verdict(ctx, r, &indices, &state.current_q)?;
            Ok(BatchItem {
                record: r,
                indices,
                pred,
                target: r.label,
            })
        });
        let batch = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
        let next = optimizer_step(ctx, &batch, &state.current_q, state.t)?;
        let changed = !next.same_questions(&state.current_q);
        state.t += 1;
        state.epoch = state.t / batches_per_epoch;
        state.current_q = next;
        transcript.push(json!({
            "kind": "iteration",
            "t": state.t,
            "epoch": epoch,
            "videos": batch.iter().map(|b| b.record.id.as_str()).collect::<Vec<_>>(),
            "preds": batch.iter().map(|b| b.pred).collect::<Vec<_>>(),
            "targets": batch.iter().map(|b| b.target).collect::<Vec<_>>(),
            "questions_changed": changed,
            "questions_digest": state.current_q.digest(),
        }))?;

        if state.t % cfg.validation_period == 0 {
            let v = validate(ctx, &state.current_q, &val)?;
            let improved = v.accuracy > state.best_acc;
            if improved {
                state.best_acc = v.accuracy;
                state.best_q = state.current_q.clone();
                state.best_q.val_accuracy = Some(v.accuracy);
            }
            state.history.push((state.t, v.accuracy));
            transcript.push(json!({"kind": "validation", "t": state.t, "accuracy": v.accuracy, "best_accuracy": state.best_acc, "improved": improved}))?;
            info!("t={} validation accuracy {:.4} (best {:.4})", state.t, v.accuracy, state.best_acc);
            checkpoint(&state, transcript.lines.len())?;
        }
    }
    checkpoint(&state, transcript.lines.len())?;

    Ok(TrainOutcome {
        best: state.best_q.clone(),
        state,
        log: transcript.lines,
        train_ids,
        val_ids,
    })
}
