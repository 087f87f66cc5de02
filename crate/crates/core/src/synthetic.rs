//! Seeded synthetic benchmarks for the simulated backends.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::sim::{Keyword, SimVideo, SimWorld};
use crate::gateway::sim::SIM_SCHEME;
use crate::manifest::{DatasetManifest, Interval, Split, VideoRecord};
use crate::seed_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub split: Split,
    pub videos: usize,
    pub anomalous_fraction: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Low so that a ten-second window spans only a few segments.
    pub fps: f64,
    pub detector_accuracy: f64,
    pub vocabulary: Vec<Keyword>,
    pub seed: u64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            split: Split::Test,
            videos: 30,
            anomalous_fraction: 0.5,
            min_frames: 300,
            max_frames: 960,
            fps: 2.0,
            detector_accuracy: 0.85,
            vocabulary: Vec::new(),
            seed: 0,
            embedding_dim: 16,
            embedding_noise: 0.35,
        }
    }
}

/// Three keywords worth 0.35 in total.
pub fn default_vocabulary() -> Vec<Keyword> {
    [("fire", 0.15), ("weapon", 0.1), ("collision", 0.1)]
        .into_iter()
        .map(|(k, b)| Keyword {
            keyword: k.into(),
            bonus: b,
        })
        .collect()
}

/// A manifest of `sim://` videos and the world that knows their anomalies.
///
/// Anomalous videos carry one interval covering 20 to 40 percent of the
/// video, placed near the middle.
pub fn generate(cfg: &SynthConfig) -> Result<(DatasetManifest, SimWorld), String> {
    if cfg.videos == 0 || cfg.min_frames == 0 || cfg.min_frames > cfg.max_frames {
        return Err("need videos > 0 and 0 < min_frames <= max_frames".into());
    }
    if !(0.0..=1.0).contains(&cfg.anomalous_fraction) || !(cfg.fps > 0.0) {
        return Err("anomalous_fraction must lie in [0, 1] and fps must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[b"synthetic", &cfg.seed.to_le_bytes()]));
    let n_anomalous = (cfg.anomalous_fraction * cfg.videos as f64).round() as usize;
    let mut flags: Vec<bool> = (0..cfg.videos).map(|i| i < n_anomalous).collect();
    flags.shuffle(&mut rng);

    let mut records = Vec::with_capacity(cfg.videos);
    let mut world_videos = BTreeMap::new();
    for (i, anomalous) in flags.into_iter().enumerate() {
        let id = format!("{}_{i:03}", cfg.name);
        let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let intervals = if anomalous {
            let len = ((frames as f64 * rng.random_range(0.2..=0.4)).round() as usize).max(1);
            let jitter = (frames as f64 * rng.random_range(-0.15..=0.15)).round() as i64;
            let start = (frames as i64 / 2 - len as i64 / 2 + jitter).clamp(1, (frames - len + 1) as i64) as usize;
            vec![Interval::new(start, start + len - 1)]
        } else {
            Vec::new()
        };
        world_videos.insert(
            id.clone(),
            SimVideo {
                intervals: intervals.clone(),
            },
        );
        records.push(VideoRecord {
            id,
            frame_count: frames,
            fps: cfg.fps,
            frame_source: format!("{SIM_SCHEME}{{id}}/{{index}}"),
            label: u8::from(anomalous),
            intervals: Some(intervals),
        });
    }
    let world = SimWorld {
        videos: world_videos,
        detector_accuracy: cfg.detector_accuracy,
        vocabulary: cfg.vocabulary.clone(),
        seed: cfg.seed,
        embedding_dim: cfg.embedding_dim,
        embedding_noise: cfg.embedding_noise,
    };
    world.validate()?;
    Ok((DatasetManifest::new(cfg.name.clone(), cfg.split, records), world))
}

/// Joins several generated parts into one world.
pub fn merge_worlds(parts: &[SimWorld]) -> Option<SimWorld> {
    let mut merged = parts.first()?.clone();
    for w in &parts[1..] {
        merged.videos.extend(w.videos.clone());
    }
    Some(merged)
}
