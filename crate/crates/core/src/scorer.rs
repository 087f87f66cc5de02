//! Frame-level anomaly scores from segment verdicts.
//!
//! Step 1 asks the learner for a verdict on every segment window. Step 2
//! replaces each verdict by a softmax-weighted mean over the segment's most
//! similar segments in embedding space. Step 3 smooths the segment series
//! with a Gaussian kernel, spreads it onto frames and multiplies by a
//! Gaussian centred on the middle of the video.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    ChatBackend, Decoding, EmbedBackend, EmbeddingVector, FrameLoader, GatewayError, DEFAULT_PARALLELISM,
};
use crate::manifest::{write_file, ManifestError, VideoRecord};
use crate::parallel::map_bounded;
use crate::prompting::{parse_binary_verdict, parse_explanation, render_scoring_prompt, LearnerTemplate, QuestionSet};
use crate::sampler::{plan_segments, SamplerError, SegmentPlan};
use crate::digest_hex;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("invalid score config: {0}")]
    Config(String),
    #[error("cosine similarity of vectors with dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity with a zero vector")]
    ZeroVector,
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("video {video_id}: {failed} of {total} segments failed to parse")]
    TooManyFailures {
        video_id: String,
        failed: usize,
        total: usize,
    },
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    /// Frames between segment centres (`d`).
    pub interval: usize,
    pub k_ratio: f64,
    pub tau: f64,
    pub kernel_size: usize,
    pub sigma1: f64,
    pub sigma2_ratio: f64,
    pub window_seconds: f64,
    pub per_window: usize,
    pub parallelism: usize,
    /// Largest tolerated share of segments without a parseable verdict.
    pub max_failed_fraction: f64,
    pub decoding: Decoding,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            interval: 16,
            k_ratio: 0.1,
            tau: 10.0,
            kernel_size: 15,
            sigma1: 10.0,
            sigma2_ratio: 0.5,
            window_seconds: 10.0,
            per_window: 8,
            parallelism: DEFAULT_PARALLELISM,
            max_failed_fraction: 0.1,
            decoding: Decoding::default(),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let fail = |m: &str| Err(ScoreError::Config(m.to_string()));
        if self.interval == 0 || self.per_window == 0 || self.parallelism == 0 {
            return fail("interval, per_window and parallelism must be positive");
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return fail("k_ratio must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive and finite");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail("kernel_size must be odd and at least 1");
        }
        if !(self.sigma1 > 0.0 && self.sigma1.is_finite()) {
            return fail("sigma1 must be positive and finite");
        }
        if !(self.sigma2_ratio > 0.0 && self.sigma2_ratio.is_finite()) {
            return fail("sigma2_ratio must be positive and finite");
        }
        if !(self.window_seconds > 0.0 && self.window_seconds.is_finite()) {
            return fail("window_seconds must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.max_failed_fraction) {
            return fail("max_failed_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// How much of the pipeline contributes to the frame scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stages {
    /// Flattened verdicts.
    Initial,
    /// Flattened scene-context ensemble.
    Retrieval,
    /// Ensemble smoothed over time, then flattened.
    Smoothing,
    /// Smoothed, flattened and position-weighted.
    #[default]
    Full,
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ScoreError> {
    cosine(a.values(), b.values())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ScoreError> {
    if a.len() != b.len() {
        return Err(ScoreError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ScoreError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `max(1, round(k_ratio * h))`, capped at `h`.
pub fn neighbour_count(k_ratio: f64, h: usize) -> usize {
    ((k_ratio * h as f64).round() as usize).clamp(1, h.max(1))
}

/// Top-`k` neighbours of segment `u` with their softmax weights.
///
/// The segment itself always ranks first; remaining ties go to the lower index.
pub fn ensemble_weights(sims: &[f64], u: usize, k: usize, tau: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..sims.len()).filter(|&i| i != u).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.insert(0, u);
    order.truncate(k.max(1));
    let logits: Vec<f64> = order.iter().map(|&i| sims[i] / tau).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    order.into_iter().zip(exps).map(|(i, e)| (i, e / total)).collect()
}

/// Pairwise cosine similarities; the diagonal is exactly 1.
pub fn similarity_matrix(embeddings: &[EmbeddingVector]) -> Result<Vec<Vec<f64>>, ScoreError> {
    let h = embeddings.len();
    let mut sims = vec![vec![0.0; h]; h];
    for a in 0..h {
        sims[a][a] = 1.0;
        for b in a + 1..h {
            let s = cosine_similarity(&embeddings[a], &embeddings[b])?;
            sims[a][b] = s;
            sims[b][a] = s;
        }
    }
    Ok(sims)
}

pub fn ensemble_scores(initial: &[f64], embeddings: &[EmbeddingVector], k_ratio: f64, tau: f64) -> Result<Vec<f64>, ScoreError> {
    if initial.len() != embeddings.len() {
        return Err(ScoreError::LengthMismatch {
            what: "embeddings",
            expected: initial.len(),
            got: embeddings.len(),
        });
    }
    let sims = similarity_matrix(embeddings)?;
    Ok(ensemble_from_similarities(initial, &sims, k_ratio, tau))
}

pub fn ensemble_from_similarities(initial: &[f64], sims: &[Vec<f64>], k_ratio: f64, tau: f64) -> Vec<f64> {
    let k = neighbour_count(k_ratio, initial.len());
    (0..initial.len())
        .map(|u| {
            ensemble_weights(&sims[u], u, k, tau)
                .into_iter()
                .map(|(i, w)| w * initial[i])
                .sum::<f64>()
                .clamp(0.0, 1.0)
        })
        .collect()
}

/// Sampled Gaussian of odd width `size`, normalized to unit sum.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as i64;
    let raw: Vec<f64> = (-half..=half)
        .map(|p| (-((p * p) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Convolution with replicate padding; output has the input's length.
pub fn gaussian_smooth(values: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(size, sigma);
    let half = (size / 2) as i64;
    let last = values.len() as i64 - 1;
    (0..values.len() as i64)
        .map(|u| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * values[(u + j as i64 - half).clamp(0, last) as usize])
                .sum::<f64>()
                .clamp(0.0, 1.0)
        })
        .collect()
}

/// Spreads segment scores onto frames; trailing frames take the last score.
pub fn flatten_to_frames(segment_scores: &[f64], plan: &SegmentPlan) -> Result<Vec<f64>, ScoreError> {
    if segment_scores.len() != plan.segment_count() {
        return Err(ScoreError::LengthMismatch {
            what: "segment scores",
            expected: plan.segment_count(),
            got: segment_scores.len(),
        });
    }
    let mut frames = vec![0.0; plan.frame_count];
    for (u, &s) in segment_scores.iter().enumerate() {
        let (lo, hi) = plan.flatten_range(u);
        for f in &mut frames[lo - 1..hi] {
            *f = s;
        }
    }
    Ok(frames)
}

/// `floor(ratio * F)`, or the unfloored value for videos too short for that to be positive.
pub fn sigma2(frame_count: usize, ratio: f64) -> f64 {
    let exact = ratio * frame_count as f64;
    let floored = exact.floor();
    if floored > 0.0 {
        floored
    } else {
        exact
    }
}

/// `w(i) = exp(-(i - c)^2 / (2 sigma2^2))` for 1-based `i`, `c = floor(F / 2)`.
pub fn position_weights(frame_count: usize, sigma2_ratio: f64) -> Vec<f64> {
    let c = (frame_count / 2) as f64;
    let s = sigma2(frame_count, sigma2_ratio);
    (1..=frame_count)
        .map(|i| {
            let x = i as f64 - c;
            (-(x * x) / (2.0 * s * s)).exp()
        })
        .collect()
}

pub fn position_weight(frame_scores: &[f64], sigma2_ratio: f64) -> Vec<f64> {
    frame_scores
        .iter()
        .zip(position_weights(frame_scores.len(), sigma2_ratio))
        .map(|(r, w)| r * w)
        .collect()
}

/// Everything computed for one video at segment granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScoreSeries {
    pub plan: SegmentPlan,
    /// Step-1 verdicts; failed segments count as 0.
    pub initial: Vec<f64>,
    pub failed: Vec<bool>,
    pub embeddings: Vec<EmbeddingVector>,
    pub ensembled: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub explanations: Vec<Option<String>>,
}

/// Steps 2 and 3 from cached Step-1 outputs.
pub fn post_process(
    plan: &SegmentPlan,
    initial: &[f64],
    embeddings: &[EmbeddingVector],
    config: &ScoreConfig,
    stages: Stages,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ScoreError> {
    let ensembled = ensemble_scores(initial, embeddings, config.k_ratio, config.tau)?;
    let smoothed = gaussian_smooth(&ensembled, config.kernel_size, config.sigma1);
    let segment_level = match stages {
        Stages::Initial => initial,
        Stages::Retrieval => &ensembled,
        Stages::Smoothing | Stages::Full => &smoothed,
    };
    let mut frames = flatten_to_frames(segment_level, plan)?;
    if stages == Stages::Full {
        frames = position_weight(&frames, config.sigma2_ratio);
    }
    Ok((frames, ensembled, smoothed))
}

/// Backends, templates and storage for scoring.
pub struct ScoreContext<'a> {
    pub config: &'a ScoreConfig,
    pub learner: &'a LearnerTemplate,
    pub chat: &'a dyn ChatBackend,
    pub embed: &'a dyn EmbedBackend,
    pub frames: &'a FrameLoader,
    /// Step-1 verdicts and embeddings are reused from here when present.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOneRecord {
    pub video_id: String,
    pub questions_digest: String,
    pub verdicts: Vec<Option<u8>>,
    pub explanations: Vec<Option<String>>,
    pub embeddings: Vec<EmbeddingVector>,
}

/// Cache file name for one (video, questions, segmentation) combination.
pub fn cache_key(video_id: &str, q: &QuestionSet, config: &ScoreConfig) -> String {
    let params = format!("{}|{}|{}", config.interval, config.window_seconds, config.per_window);
    digest_hex(&[video_id.as_bytes(), q.digest().as_bytes(), params.as_bytes()])
}

fn segment_verdict(ctx: &ScoreContext, record: &VideoRecord, indices: &[usize], q: &QuestionSet) -> Result<(Option<u8>, Option<String>), ScoreError> {
    let images = ctx.frames.load(record, indices)?;
    let prompt = render_scoring_prompt(ctx.learner, q, images.len());
    let request = ctx.config.decoding.learner(prompt, images);
    for _ in 0..2 {
        let reply = ctx.chat.chat(&request)?;
        if let Ok(v) = parse_binary_verdict(&reply) {
            return Ok((Some(v), parse_explanation(&reply)));
        }
    }
    Ok((None, None))
}

/// Step 1 plus segment embeddings, read from or written to the cache.
pub fn step_one(ctx: &ScoreContext, record: &VideoRecord, plan: &SegmentPlan, q: &QuestionSet) -> Result<StepOneRecord, ScoreError> {
    let cache_path = ctx
        .cache_dir
        .as_ref()
        .map(|dir| dir.join(format!("{}.json", cache_key(&record.id, q, ctx.config))));
    if let Some(path) = cache_path.as_deref().filter(|p| p.exists()) {
        let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
        let cached: StepOneRecord = serde_json::from_str(&text).map_err(|e| ScoreError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if cached.verdicts.len() == plan.segment_count() && cached.video_id == record.id {
            return Ok(cached);
        }
        warn!("ignoring stale cache entry {}", path.display());
    }

    let windows: Vec<&[usize]> = plan.window_samples.iter().map(|w| w.as_slice()).collect();
    let results = map_bounded(&windows, ctx.config.parallelism, |_, indices| {
        let verdict = segment_verdict(ctx, record, indices, q)?;
        let images = ctx.frames.load(record, indices)?;
        Ok::<_, ScoreError>((verdict, ctx.embed.embed(&images)?))
    });
    let mut out = StepOneRecord {
        video_id: record.id.clone(),
        questions_digest: q.digest(),
        verdicts: Vec::new(),
        explanations: Vec::new(),
        embeddings: Vec::new(),
    };
    for r in results {
        let ((verdict, explanation), embedding) = r?;
        if let Some(first) = out.embeddings.first() {
            if first.dim() != embedding.dim() {
                return Err(GatewayError::BackendInconsistent {
                    expected: first.dim(),
                    got: embedding.dim(),
                }
                .into());
            }
        }
        out.verdicts.push(verdict);
        out.explanations.push(explanation);
        out.embeddings.push(embedding);
    }
    if let Some(path) = cache_path {
        let text = serde_json::to_string(&out).expect("cache record serializes");
        write_file(&path, text.as_bytes())?;
    }
    Ok(out)
}

/// Runs the whole pipeline for one video.
pub fn score_video(
    ctx: &ScoreContext,
    record: &VideoRecord,
    q: &QuestionSet,
    stages: Stages,
) -> Result<(Vec<f64>, SegmentScoreSeries), ScoreError> {
    let cfg = ctx.config;
    cfg.validate()?;
    let plan = plan_segments(record, cfg.interval, cfg.window_seconds, cfg.per_window)?;
    let step = step_one(ctx, record, &plan, q)?;
    let h = plan.segment_count();
    let failed: Vec<bool> = step.verdicts.iter().map(Option::is_none).collect();
    let n_failed = failed.iter().filter(|f| **f).count();
    if n_failed as f64 > cfg.max_failed_fraction * h as f64 {
        return Err(ScoreError::TooManyFailures {
            video_id: record.id.clone(),
            failed: n_failed,
            total: h,
        });
    }
    if n_failed > 0 {
        warn!("{}: {n_failed} of {h} segments failed and score 0", record.id);
    }
    let initial: Vec<f64> = step.verdicts.iter().map(|v| f64::from(v.unwrap_or(0))).collect();
    let (frames, ensembled, smoothed) = post_process(&plan, &initial, &step.embeddings, cfg, stages)?;
    Ok((
        frames,
        SegmentScoreSeries {
            plan,
            initial,
            failed,
            embeddings: step.embeddings,
            ensembled,
            smoothed,
            explanations: step.explanations,
        },
    ))
}

/// Per-segment detail CSV.
pub fn segments_to_csv(series: &SegmentScoreSeries) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["segment", "center", "lo", "hi", "initial", "ensembled", "smoothed", "failed", "explanation"])
        .expect("in-memory csv");
    for u in 0..series.plan.segment_count() {
        let (lo, hi) = series.plan.windows[u];
        w.write_record([
            (u + 1).to_string(),
            series.plan.centers[u].to_string(),
            lo.to_string(),
            hi.to_string(),
            series.initial[u].to_string(),
            series.ensembled[u].to_string(),
            series.smoothed[u].to_string(),
            series.failed[u].to_string(),
            series.explanations[u].clone().unwrap_or_default(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn write_segments(path: &Path, series: &SegmentScoreSeries) -> Result<(), ScoreError> {
    write_file(path, segments_to_csv(series).as_bytes())?;
    Ok(())
}
