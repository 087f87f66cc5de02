//! Flat run configuration: a TOML file plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use vera_core::gateway::http::{
    HttpChatBackend, HttpChatConfig, HttpEmbedBackend, HttpEmbedConfig, ENV_CHAT_KEY, ENV_CHAT_URL, ENV_EMBED_URL,
};
use vera_core::gateway::sim::{SimBackend, SimWorld};
use vera_core::gateway::{ChatBackend, Decoding, EmbedBackend, FrameLoader, RetryPolicy};
use vera_core::manifest::{load_manifest, load_question_set, parse_question_file, DatasetManifest};
use vera_core::prompting::{
    LearnerTemplate, OptimizerTemplate, QuestionSet, INITIAL_QUESTIONS_PRESET, LEARNED_QUESTIONS_PRESET,
};
use vera_core::sampler::SamplingStrategy;
use vera_core::scorer::ScoreConfig;
use vera_core::trainer::TrainConfig;

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub frames_root: Option<String>,

    pub backend: BackendKind,
    pub sim_world: Option<PathBuf>,
    pub chat_url: Option<String>,
    pub chat_model: String,
    pub chat_api_key: Option<String>,
    pub embed_url: Option<String>,
    pub timeout_seconds: f64,
    pub embed_timeout_seconds: f64,
    pub retry_attempts: u32,

    pub learner_template: Option<PathBuf>,
    pub optimizer_template: Option<PathBuf>,
    pub initial_questions: Option<PathBuf>,

    pub max_iterations: u64,
    pub batch_size: usize,
    pub frames_per_video: usize,
    pub question_count: usize,
    pub validation_period: u64,
    pub val_fraction: f64,
    pub sampling_strategy: SamplingStrategy,
    pub seed: u64,
    pub max_epochs: u64,
    pub optimizer_retries: u32,

    pub interval: usize,
    pub k_ratio: f64,
    pub tau: f64,
    pub kernel_size: usize,
    pub sigma1: f64,
    pub sigma2_ratio: f64,
    pub window_seconds: f64,
    pub per_window: usize,
    pub max_failed_fraction: f64,

    pub parallelism: usize,
    pub image_limit: usize,
    pub learner_temperature: f64,
    pub optimizer_temperature: f64,
    pub max_tokens: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = ScoreConfig::default();
        let d = Decoding::default();
        Self {
            train_manifest: None,
            test_manifest: None,
            output_dir: PathBuf::from("vera-run"),
            frames_root: None,
            backend: BackendKind::Http,
            sim_world: None,
            chat_url: None,
            chat_model: "InternVL2-8B".into(),
            chat_api_key: None,
            embed_url: None,
            timeout_seconds: 120.0,
            embed_timeout_seconds: 30.0,
            retry_attempts: RetryPolicy::default().attempts,
            learner_template: None,
            optimizer_template: None,
            initial_questions: None,
            max_iterations: t.max_iterations,
            batch_size: t.batch_size,
            frames_per_video: t.frames_per_video,
            question_count: t.question_count,
            validation_period: t.validation_period,
            val_fraction: t.val_fraction,
            sampling_strategy: t.sampling_strategy,
            seed: t.seed,
            max_epochs: t.max_epochs,
            optimizer_retries: t.optimizer_retries,
            interval: s.interval,
            k_ratio: s.k_ratio,
            tau: s.tau,
            kernel_size: s.kernel_size,
            sigma1: s.sigma1,
            sigma2_ratio: s.sigma2_ratio,
            window_seconds: s.window_seconds,
            per_window: s.per_window,
            max_failed_fraction: s.max_failed_fraction,
            parallelism: t.parallelism,
            image_limit: t.image_limit,
            learner_temperature: d.learner_temperature,
            optimizer_temperature: d.optimizer_temperature,
            max_tokens: d.max_tokens,
        }
    }
}

const PATH_KEYS: [&str; 8] = [
    "train_manifest",
    "test_manifest",
    "output_dir",
    "frames_root",
    "sim_world",
    "learner_template",
    "optimizer_template",
    "initial_questions",
];

/// Relative paths in a config file are taken relative to the file itself.
fn resolve_paths(table: &mut toml::Table, base: &Path) {
    for key in PATH_KEYS {
        if let Some(toml::Value::String(v)) = table.get_mut(key) {
            if !v.contains("://") && Path::new(v.as_str()).is_relative() {
                *v = base.join(&*v).to_string_lossy().into_owned();
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("config not found: {}", p.display()))?;
                let mut t = toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("config {} is not valid TOML", p.display()))?;
                resolve_paths(&mut t, p.parent().unwrap_or(Path::new("")));
                t
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(UsageError(format!("--set expects key=value, got {item:?}")).into());
            };
            table.insert(key.trim().to_string(), override_value(value.trim()));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    /// Module invariants, checked before any backend call.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.score_config().validate()?;
        if !(self.timeout_seconds > 0.0 && self.embed_timeout_seconds > 0.0) {
            bail!("timeouts must be positive");
        }
        if self.retry_attempts == 0 {
            bail!("retry_attempts must be at least 1");
        }
        for p in [&self.learner_template, &self.optimizer_template, &self.initial_questions, &self.sim_world]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("file not found: {}", p.display());
            }
        }
        Ok(())
    }

    fn decoding(&self) -> Decoding {
        Decoding {
            learner_temperature: self.learner_temperature,
            optimizer_temperature: self.optimizer_temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_iterations: self.max_iterations,
            batch_size: self.batch_size,
            frames_per_video: self.frames_per_video,
            question_count: self.question_count,
            validation_period: self.validation_period,
            val_fraction: self.val_fraction,
            sampling_strategy: self.sampling_strategy,
            seed: self.seed,
            max_epochs: self.max_epochs,
            optimizer_retries: self.optimizer_retries,
            parallelism: self.parallelism,
            image_limit: self.image_limit,
            decoding: self.decoding(),
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            interval: self.interval,
            k_ratio: self.k_ratio,
            tau: self.tau,
            kernel_size: self.kernel_size,
            sigma1: self.sigma1,
            sigma2_ratio: self.sigma2_ratio,
            window_seconds: self.window_seconds,
            per_window: self.per_window,
            parallelism: self.parallelism,
            max_failed_fraction: self.max_failed_fraction,
            decoding: self.decoding(),
        }
    }

    pub fn frame_loader(&self) -> FrameLoader {
        FrameLoader::new(self.frames_root.clone())
    }

    pub fn learner_template(&self) -> Result<LearnerTemplate> {
        let t = match &self.learner_template {
            Some(p) => LearnerTemplate::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("learner template {}", p.display()))?,
            None => LearnerTemplate::preset(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn optimizer_template(&self) -> Result<OptimizerTemplate> {
        Ok(match &self.optimizer_template {
            Some(p) => OptimizerTemplate::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("optimizer template {}", p.display()))?,
            None => OptimizerTemplate::preset(),
        })
    }

    pub fn initial_questions(&self) -> Result<QuestionSet> {
        match &self.initial_questions {
            Some(p) => Ok(load_question_set(p)?),
            None => questions_from("preset:q0"),
        }
    }

    fn manifest(&self, which: Option<&PathBuf>, key: &str) -> Result<DatasetManifest> {
        let path = which.ok_or_else(|| UsageError(format!("no {key} configured (set it in the config or with --set {key}=PATH)")))?;
        if !path.exists() {
            bail!("manifest not found: {}", path.display());
        }
        Ok(load_manifest(path)?)
    }

    pub fn train_manifest(&self) -> Result<DatasetManifest> {
        self.manifest(self.train_manifest.as_ref(), "train_manifest")
    }

    pub fn test_manifest(&self) -> Result<DatasetManifest> {
        self.manifest(self.test_manifest.as_ref(), "test_manifest")
    }

    pub fn backends(&self) -> Result<Backends> {
        match self.backend {
            BackendKind::Sim => {
                let path = self
                    .sim_world
                    .as_ref()
                    .ok_or_else(|| UsageError("backend = \"sim\" needs sim_world or --sim-world".into()))?;
                let world = SimWorld::load(path)?;
                Ok(Backends::Sim(SimBackend::new(world).with_image_limit(self.image_limit)))
            }
            BackendKind::Http => {
                let retry = RetryPolicy {
                    attempts: self.retry_attempts,
                    ..RetryPolicy::default()
                };
                let url = self
                    .chat_url
                    .clone()
                    .or_else(|| std::env::var(ENV_CHAT_URL).ok())
                    .ok_or_else(|| UsageError(format!("no chat endpoint: set chat_url or {ENV_CHAT_URL}")))?;
                let mut chat = HttpChatConfig::new(url, self.chat_model.clone());
                chat.api_key = self.chat_api_key.clone().or_else(|| std::env::var(ENV_CHAT_KEY).ok());
                chat.timeout = Duration::from_secs_f64(self.timeout_seconds);
                chat.retry = retry;
                chat.image_limit = self.image_limit;
                chat.parallelism = self.parallelism;
                let embed = self.embed_url.clone().or_else(|| std::env::var(ENV_EMBED_URL).ok()).map(|url| {
                    let mut c = HttpEmbedConfig::new(url);
                    c.timeout = Duration::from_secs_f64(self.embed_timeout_seconds);
                    c.retry = retry;
                    c.parallelism = self.parallelism;
                    HttpEmbedBackend::new(c)
                });
                Ok(Backends::Http(HttpChatBackend::new(chat), embed))
            }
        }
    }
}

pub enum Backends {
    Sim(SimBackend),
    Http(HttpChatBackend, Option<HttpEmbedBackend>),
}

impl Backends {
    pub fn chat(&self) -> &dyn ChatBackend {
        match self {
            Backends::Sim(b) => b,
            Backends::Http(c, _) => c,
        }
    }

    pub fn embed(&self) -> Result<&dyn EmbedBackend> {
        match self {
            Backends::Sim(b) => Ok(b),
            Backends::Http(_, Some(e)) => Ok(e),
            Backends::Http(_, None) => {
                Err(UsageError(format!("scoring needs an embedding endpoint: set embed_url or {ENV_EMBED_URL}")).into())
            }
        }
    }
}

/// A question file path, or `preset:q0` / `preset:qstar` for the shipped sets.
pub fn questions_from(spec: &str) -> Result<QuestionSet> {
    let preset = |text: &str, name: &str| -> Result<QuestionSet> { Ok(parse_question_file(text, Path::new(name))?) };
    match spec {
        "preset:q0" => preset(INITIAL_QUESTIONS_PRESET, "preset:q0"),
        "preset:qstar" => preset(LEARNED_QUESTIONS_PRESET, "preset:qstar"),
        s if s.starts_with("preset:") => Err(UsageError(format!("unknown preset {s:?} (expected preset:q0 or preset:qstar)")).into()),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                bail!("question file not found: {}", p.display());
            }
            Ok(load_question_set(p)?)
        }
    }
}
