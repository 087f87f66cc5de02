//! Deterministic stand-ins for the vision-language model and the embedder.
//!
//! Frames are addressed as `sim://{id}/{index}`; their payload carries the
//! video id and frame index so the backend can look up planted anomaly
//! intervals. Every reply is a pure function of the world and the request.
//!
//! The learner is correct with probability `detector_accuracy` plus the
//! bonus of every vocabulary keyword mentioned by the current guiding
//! questions. Correctness is drawn once per (video, frame set), so adding a
//! keyword can only turn wrong answers into right ones. The optimizer pads
//! short sets with generic questions, keeps them when the batch was answered
//! correctly, and otherwise swaps one keyword-free question for a question
//! about the first unused keyword.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, EmbedBackend, EmbeddingVector, GatewayError, ImagePayload, DEFAULT_IMAGE_LIMIT};
use crate::manifest::{Interval, ManifestError};
use crate::prompting::{numbered_runs, CURRENT_QUESTIONS_HEADING, PREDICTIONS_HEADING};
use crate::seed_from;

pub const SIM_SCHEME: &str = "sim://";
pub const SIM_MEDIA_TYPE: &str = "image/x-vera-sim";

pub fn frame_payload(video_id: &str, index: usize) -> ImagePayload {
    ImagePayload::new(format!("{index}|{video_id}").into_bytes(), SIM_MEDIA_TYPE)
}

pub fn decode_frame(image: &ImagePayload) -> Option<(String, usize)> {
    if image.media_type != SIM_MEDIA_TYPE {
        return None;
    }
    let text = std::str::from_utf8(&image.bytes).ok()?;
    let (index, id) = text.split_once('|')?;
    Some((id.to_string(), index.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimVideo {
    #[serde(default)]
    pub intervals: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub keyword: String,
    pub bonus: f64,
}

fn default_dim() -> usize {
    16
}

fn default_noise() -> f64 {
    0.35
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub videos: BTreeMap<String, SimVideo>,
    pub detector_accuracy: f64,
    #[serde(default)]
    pub vocabulary: Vec<Keyword>,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    /// Per-frame Gaussian noise added to scene directions before pooling.
    #[serde(default = "default_noise")]
    pub embedding_noise: f64,
}

impl SimWorld {
    pub fn validate(&self) -> Result<(), String> {
        let p = self.detector_accuracy;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("detector_accuracy {p} outside [0, 1]"));
        }
        if self.vocabulary.iter().any(|k| !(k.bonus >= 0.0) || k.keyword.trim().is_empty()) {
            return Err("vocabulary entries need a keyword and a non-negative bonus".into());
        }
        let total: f64 = self.vocabulary.iter().map(|k| k.bonus).sum();
        if p + total > 1.0 + 1e-12 {
            return Err(format!("detector_accuracy + bonuses = {} exceeds 1", p + total));
        }
        if self.embedding_dim < 2 {
            return Err("embedding_dim must be at least 2".into());
        }
        if !(self.embedding_noise >= 0.0 && self.embedding_noise.is_finite()) {
            return Err("embedding_noise must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|e| ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let world: SimWorld = serde_json::from_str(&text).map_err(|e| ManifestError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        world.validate().map_err(|message| ManifestError::Format {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(world)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("world serializes");
        s.push('\n');
        s
    }

    pub fn is_anomalous(&self, video: &str, frame: usize) -> bool {
        self.videos
            .get(video)
            .is_some_and(|v| v.intervals.iter().any(|iv| iv.contains(frame)))
    }

    fn event_of(&self, video: &str, frame: usize) -> Option<usize> {
        self.videos
            .get(video)?
            .intervals
            .iter()
            .position(|iv| iv.contains(frame))
    }

    /// Accuracy of the simulated learner under the given questions, capped at 1.
    pub fn effective_accuracy(&self, questions: &[String]) -> f64 {
        let bonus: f64 = self
            .vocabulary
            .iter()
            .filter(|k| questions.iter().any(|q| mentions(q, &k.keyword)))
            .map(|k| k.bonus)
            .sum();
        (self.detector_accuracy + bonus).min(1.0)
    }

    fn frame_vector(&self, video: &str, frame: usize) -> Vec<f64> {
        let scene = match self.event_of(video, frame) {
            Some(k) => format!("event-{k}"),
            None => "normal".to_string(),
        };
        let base = gaussian_unit(
            seed_from(&[b"scene", &self.seed.to_le_bytes(), video.as_bytes(), scene.as_bytes()]),
            self.embedding_dim,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[
            b"frame",
            &self.seed.to_le_bytes(),
            video.as_bytes(),
            &frame.to_le_bytes(),
        ]));
        base.iter()
            .map(|b| b + self.embedding_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn gaussian_unit(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn unit_interval(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random::<f64>()
}

/// Case-insensitive whole-word match.
pub fn mentions(question: &str, keyword: &str) -> bool {
    let hay = question.to_lowercase();
    let needle = keyword.trim().to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    hay.match_indices(&needle).any(|(at, _)| {
        !is_word(hay[..at].chars().next_back()) && !is_word(hay[at + needle.len()..].chars().next())
    })
}

pub fn keyword_question(keyword: &str) -> String {
    format!("Is there any sign of {keyword} in the scene?")
}

const FILLER_QUESTIONS: [&str; 5] = [
    "Is anyone moving in a way that differs from the people around them?",
    "Does any object appear where it would not normally be?",
    "Is there a sudden change between consecutive frames?",
    "Is anyone handling property that does not seem to belong to them?",
    "Are people reacting to something happening nearby?",
];

fn filler(k: usize) -> String {
    match FILLER_QUESTIONS.get(k) {
        Some(q) => q.to_string(),
        None => format!("Is anything else unusual in part {} of the scene?", k + 1),
    }
}

fn numbered(questions: &[String]) -> String {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {q}\n", i + 1))
        .collect()
}

/// Deterministic optimizer reply: a numbered list built from `current`.
///
/// `salt` selects which keyword-free question is replaced.
pub fn sim_optimizer_reply(
    world: &SimWorld,
    current: &[String],
    outcomes: &[(u8, u8)],
    expected_m: usize,
    salt: u64,
) -> String {
    let mut questions: Vec<String> = current.iter().take(expected_m).cloned().collect();
    let mut k = 0;
    while questions.len() < expected_m {
        let q = filler(k);
        k += 1;
        if !questions.contains(&q) {
            questions.push(q);
        }
    }
    if outcomes.iter().all(|(p, t)| p == t) {
        return format!("The learner answered every video correctly.\n{}", numbered(&questions));
    }
    let unused = world
        .vocabulary
        .iter()
        .find(|kw| !questions.iter().any(|q| mentions(q, &kw.keyword)));
    let free: Vec<usize> = (0..questions.len())
        .filter(|&i| !world.vocabulary.iter().any(|kw| mentions(&questions[i], &kw.keyword)))
        .collect();
    if let (Some(kw), false) = (unused, free.is_empty()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[b"optimizer", &world.seed.to_le_bytes(), &salt.to_le_bytes()]));
        let slot = free[rng.random_range(0..free.len())];
        questions[slot] = keyword_question(&kw.keyword);
    }
    format!(
        "Some predictions disagree with the targets, so the questions need a sharper focus.\n{}",
        numbered(&questions)
    )
}

fn section<'a>(prompt: &'a str, heading: &str) -> &'a str {
    let Some(start) = prompt.find(heading) else {
        return "";
    };
    let body = &prompt[start + heading.len()..];
    match body.find("\n## ") {
        Some(end) => &body[..end],
        None => body,
    }
}

static OUTCOME_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"prediction = ([01]), target = ([01])").unwrap());
static COUNT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"exactly (\d+) questions").unwrap());

/// Chat and embedding backend answering from a [`SimWorld`].
#[derive(Debug, Clone)]
pub struct SimBackend {
    world: SimWorld,
    image_limit: usize,
}

impl SimBackend {
    pub fn new(world: SimWorld) -> Self {
        Self {
            world,
            image_limit: DEFAULT_IMAGE_LIMIT,
        }
    }

    pub fn with_image_limit(mut self, limit: usize) -> Self {
        self.image_limit = limit;
        self
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    fn decode_all(&self, images: &[ImagePayload]) -> Result<Vec<(String, usize)>, GatewayError> {
        images
            .iter()
            .map(|img| {
                decode_frame(img).ok_or_else(|| GatewayError::BadRequest("simulated backend received a non-simulated frame".into()))
            })
            .collect()
    }

    fn learner_reply(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let frames = self.decode_all(&request.images)?;
        if frames.is_empty() {
            return Err(GatewayError::BadRequest("learner request without frames".into()));
        }
        let truth = frames.iter().any(|(id, i)| self.world.is_anomalous(id, *i));
        let questions: Vec<String> = numbered_runs(&request.prompt).into_iter().flatten().collect();
        let accuracy = self.world.effective_accuracy(&questions);

        let mut key = Vec::new();
        for (id, i) in &frames {
            key.extend_from_slice(id.as_bytes());
            key.push(0);
            key.extend_from_slice(&i.to_le_bytes());
        }
        let draw = unit_interval(seed_from(&[b"learner", &self.world.seed.to_le_bytes(), &key]));
        let verdict = if draw < accuracy { truth } else { !truth };
        let explanation = if verdict {
            "The frames show an abnormal event unfolding in the scene."
        } else {
            "The frames show routine activity with nothing out of place."
        };
        Ok(format!(
            "I reviewed {} frames against each guiding question.\nAnswer: {}\nExplanation: {explanation}",
            frames.len(),
            u8::from(verdict)
        ))
    }

    fn optimizer_reply(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.decode_all(&request.images)?;
        let prompt = &request.prompt;
        let current: Vec<String> = numbered_runs(section(prompt, CURRENT_QUESTIONS_HEADING))
            .into_iter()
            .flatten()
            .collect();
        let outcomes: Vec<(u8, u8)> = OUTCOME_RE
            .captures_iter(section(prompt, PREDICTIONS_HEADING))
            .map(|c| (c[1].parse().unwrap(), c[2].parse().unwrap()))
            .collect();
        let m = COUNT_RE
            .captures(prompt)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(current.len());
        let salt = seed_from(&[prompt.as_bytes()]);
        Ok(sim_optimizer_reply(&self.world, &current, &outcomes, m, salt))
    }
}

impl ChatBackend for SimBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        if request.images.len() > self.image_limit {
            return Err(GatewayError::PayloadTooLarge {
                images: request.images.len(),
                limit: self.image_limit,
            });
        }
        if request.prompt.contains(PREDICTIONS_HEADING) {
            self.optimizer_reply(request)
        } else {
            self.learner_reply(request)
        }
    }

    fn image_limit(&self) -> usize {
        self.image_limit
    }
}

impl EmbedBackend for SimBackend {
    /// Mean of per-frame vectors, renormalized.
    fn embed(&self, frames: &[ImagePayload]) -> Result<EmbeddingVector, GatewayError> {
        let decoded = self.decode_all(frames)?;
        if decoded.is_empty() {
            return Err(GatewayError::BadRequest("embedding needs at least one frame".into()));
        }
        let per_frame = decoded
            .iter()
            .map(|(id, i)| EmbeddingVector::normalized(self.world.frame_vector(id, *i)))
            .collect::<Result<Vec<_>, _>>()?;
        EmbeddingVector::mean_of(&per_frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{
        parse_binary_verdict, parse_question_set, render_learner_prompt, render_optimizer_prompt, LearnerTemplate,
        OptimizerTemplate, QuestionSet,
    };

    fn world(p: f64, vocab: &[(&str, f64)]) -> SimWorld {
        let mut videos = BTreeMap::new();
        videos.insert(
            "a".to_string(),
            SimVideo {
                intervals: vec![Interval::new(30, 60), Interval::new(200, 260)],
            },
        );
        videos.insert("n".to_string(), SimVideo::default());
        SimWorld {
            videos,
            detector_accuracy: p,
            vocabulary: vocab
                .iter()
                .map(|(k, b)| Keyword {
                    keyword: k.to_string(),
                    bonus: *b,
                })
                .collect(),
            seed: 42,
            embedding_dim: 16,
            embedding_noise: 0.35,
        }
    }

    fn q(items: &[&str]) -> QuestionSet {
        QuestionSet::new(items.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn learner(backend: &SimBackend, video: &str, frames: &[usize], questions: &QuestionSet) -> u8 {
        let prompt = render_learner_prompt(&LearnerTemplate::preset(), questions, frames.len());
        let request = ChatRequest {
            prompt,
            images: frames.iter().map(|&i| frame_payload(video, i)).collect(),
            temperature: 0.0,
            max_tokens: 64,
        };
        parse_binary_verdict(&backend.chat(&request).unwrap()).unwrap()
    }

    #[test]
    fn perfect_detector_is_an_oracle() {
        let b = SimBackend::new(world(1.0, &[]));
        let qs = q(&["Is anything odd?"]);
        assert_eq!(learner(&b, "a", &[10, 35, 70], &qs), 1);
        assert_eq!(learner(&b, "a", &[10, 20, 70], &qs), 0);
        assert_eq!(learner(&b, "n", &[1, 2, 3], &qs), 0);
    }

    #[test]
    fn blind_detector_is_always_wrong() {
        let b = SimBackend::new(world(0.0, &[]));
        let qs = q(&["Is anything odd?"]);
        assert_eq!(learner(&b, "a", &[35], &qs), 0);
        assert_eq!(learner(&b, "n", &[5], &qs), 1);
    }

    #[test]
    fn keywords_raise_accuracy() {
        let w = world(0.5, &[("fire", 0.3), ("weapon", 0.2)]);
        assert_eq!(w.effective_accuracy(&["Is there FIRE here?".into()]), 0.8);
        assert_eq!(w.effective_accuracy(&["Is there fireworks?".into()]), 0.5);
        assert_eq!(w.effective_accuracy(&["fire".into(), "a weapon".into()]), 1.0);
        let b = SimBackend::new(w);
        assert_eq!(learner(&b, "a", &[35], &q(&["fire?", "weapon?"])), 1);
    }

    #[test]
    fn invalid_worlds() {
        assert!(world(0.9, &[("fire", 0.2)]).validate().is_err());
        assert!(world(1.2, &[]).validate().is_err());
        assert!(world(0.6, &[("a", 0.2), ("b", 0.2)]).validate().is_ok());
    }

    #[test]
    fn optimizer_fixpoint_and_swap() {
        let w = world(0.6, &[("fire", 0.2)]);
        let current: Vec<String> = ["q one?", "q two?", "q three?"].iter().map(|s| s.to_string()).collect();
        let unchanged = sim_optimizer_reply(&w, &current, &[(1, 1), (0, 0)], 3, 9);
        assert!(parse_question_set(&unchanged, 3).unwrap().questions() == current.as_slice());

        let swapped = sim_optimizer_reply(&w, &current, &[(1, 0), (0, 0)], 3, 9);
        let qs = parse_question_set(&swapped, 3).unwrap();
        assert_eq!(qs.questions().iter().filter(|q| mentions(q, "fire")).count(), 1);
        assert_eq!(qs.questions().iter().filter(|q| current.contains(q)).count(), 2);
        // Pinned: salt 9 replaces the first question.
        assert_eq!(qs.questions(), SWAP_GOLDEN.map(String::from).as_slice());

        let exhausted = sim_optimizer_reply(&w, qs.questions(), &[(1, 0)], 3, 9);
        assert!(parse_question_set(&exhausted, 3).unwrap().same_questions(&qs));
    }

    const SWAP_GOLDEN: [&str; 3] = ["Is there any sign of fire in the scene?", "q two?", "q three?"];

    #[test]
    fn optimizer_pads_short_sets() {
        let w = world(0.6, &[("fire", 0.1)]);
        let reply = sim_optimizer_reply(&w, &["only?".to_string()], &[(0, 1)], 5, 1);
        let qs = parse_question_set(&reply, 5).unwrap();
        assert!(qs.questions()[0].as_str() == "only?" || mentions(&qs.questions()[0], "fire"));
        assert_eq!(qs.questions().iter().filter(|q| mentions(q, "fire")).count(), 1);
    }

    #[test]
    fn optimizer_via_chat() {
        let b = SimBackend::new(world(0.6, &[("fire", 0.2)]));
        let current = q(&["Is someone running?", "Is a car stopped?"]);
        let prompt = render_optimizer_prompt(&OptimizerTemplate::preset(), &current, &[0, 1], &[1, 1], &[2, 2], 2).unwrap();
        let images = vec![frame_payload("a", 1), frame_payload("a", 40), frame_payload("n", 1), frame_payload("n", 2)];
        let reply = b
            .chat(&ChatRequest {
                prompt: prompt.clone(),
                images: images.clone(),
                temperature: 0.7,
                max_tokens: 64,
            })
            .unwrap();
        let next = parse_question_set(&reply, 2).unwrap();
        assert_eq!(next.questions().iter().filter(|q| mentions(q, "fire")).count(), 1);
        let again = b
            .chat(&ChatRequest {
                prompt,
                images,
                temperature: 0.7,
                max_tokens: 64,
            })
            .unwrap();
        assert_eq!(reply, again);
    }

    fn cos(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn embeddings_follow_scenes() {
        let b = SimBackend::new(world(1.0, &[]));
        let seg = |lo: usize| -> Vec<ImagePayload> { (lo..lo + 8).map(|i| frame_payload("a", i)).collect() };
        let e1 = b.embed(&seg(32)).unwrap();
        let e2 = b.embed(&seg(45)).unwrap();
        let other_event = b.embed(&seg(210)).unwrap();
        assert!(cos(&e1, &e2) > cos(&e1, &other_event));
        let norm: f64 = e1.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(b.embed(&seg(32)).unwrap(), e1);
        assert!((cos(&e1, &e1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_foreign_frames_and_oversized_requests() {
        let b = SimBackend::new(world(1.0, &[])).with_image_limit(2);
        let req = ChatRequest {
            prompt: "x".into(),
            images: vec![ImagePayload::new(vec![1], "image/jpeg")],
            temperature: 0.0,
            max_tokens: 8,
        };
        assert!(matches!(b.chat(&req), Err(GatewayError::BadRequest(_))));
        let req = ChatRequest {
            images: (1..=3).map(|i| frame_payload("n", i)).collect(),
            ..req
        };
        assert!(matches!(b.chat(&req), Err(GatewayError::PayloadTooLarge { .. })));
    }
}
