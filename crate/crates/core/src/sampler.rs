//! Frame selection: training-time subsampling and inference segment plans.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::VideoRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("video too short: {frames} frames, need at least {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("sample count must be positive")]
    ZeroSamples,
    #[error("segment interval must be positive")]
    ZeroInterval,
}

/// Strictly increasing 1-based frame indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameIndexList(Vec<usize>);

impl FrameIndexList {
    /// Accepts `indices` only if strictly increasing and within `[1, frames]`.
    pub fn new(indices: Vec<usize>, frames: usize) -> Option<Self> {
        let ordered = indices.windows(2).all(|w| w[0] < w[1]);
        let bounded = indices.iter().all(|&i| (1..=frames).contains(&i));
        (ordered && bounded).then_some(Self(indices))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    #[default]
    Uniform,
    Random,
    Tsn,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "random" => Ok(Self::Random),
            "tsn" => Ok(Self::Tsn),
            other => Err(format!("unknown sampling strategy {other:?} (expected uniform, random or tsn)")),
        }
    }
}

fn check(frames: usize, samples: usize) -> Result<(), SamplerError> {
    if samples == 0 {
        return Err(SamplerError::ZeroSamples);
    }
    if frames < samples {
        return Err(SamplerError::TooShort {
            frames,
            needed: samples,
        });
    }
    Ok(())
}

/// `[1, l+1, ..., (S-1)l+1]` with `l = floor(F / S)`.
pub fn uniform_sample(frames: usize, samples: usize) -> Result<FrameIndexList, SamplerError> {
    check(frames, samples)?;
    let step = frames / samples;
    Ok(FrameIndexList((0..samples).map(|k| k * step + 1).collect()))
}

/// `samples` distinct frames drawn without replacement, sorted.
pub fn random_sample(frames: usize, samples: usize, seed: u64) -> Result<FrameIndexList, SamplerError> {
    check(frames, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, frames, samples)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    picked.sort_unstable();
    Ok(FrameIndexList(picked))
}

/// One seeded-uniform frame from each of `samples` equal chunks; the last
/// chunk absorbs the remainder.
pub fn tsn_sample(frames: usize, samples: usize, seed: u64) -> Result<FrameIndexList, SamplerError> {
    check(frames, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = frames / samples;
    let picked = (0..samples)
        .map(|k| {
            let lo = k * chunk + 1;
            let hi = if k + 1 == samples { frames } else { (k + 1) * chunk };
            rng.random_range(lo..=hi)
        })
        .collect();
    Ok(FrameIndexList(picked))
}

pub fn sample_frames(
    strategy: SamplingStrategy,
    frames: usize,
    samples: usize,
    seed: u64,
) -> Result<FrameIndexList, SamplerError> {
    match strategy {
        SamplingStrategy::Uniform => uniform_sample(frames, samples),
        SamplingStrategy::Random => random_sample(frames, samples, seed),
        SamplingStrategy::Tsn => tsn_sample(frames, samples, seed),
    }
}

/// Inference segments of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub frame_count: usize,
    pub interval: usize,
    pub centers: Vec<usize>,
    /// Inclusive `[lo, hi]` frame range of each segment's window.
    pub windows: Vec<(usize, usize)>,
    pub window_samples: Vec<FrameIndexList>,
}

impl SegmentPlan {
    pub fn segment_count(&self) -> usize {
        self.centers.len()
    }

    /// Frames a segment's score is flattened onto; the last segment also
    /// covers trailing frames past `h * d`.
    pub fn flatten_range(&self, segment: usize) -> (usize, usize) {
        let h = self.segment_count();
        let lo = segment * self.interval + 1;
        let hi = if segment + 1 == h {
            self.frame_count
        } else {
            (segment + 1) * self.interval
        };
        (lo.min(self.frame_count), hi.min(self.frame_count))
    }
}

fn window_sample(lo: usize, hi: usize, per_window: usize) -> FrameIndexList {
    let len = hi + 1 - lo;
    if len <= per_window {
        return FrameIndexList((lo..=hi).collect());
    }
    let step = len / per_window;
    FrameIndexList((0..per_window).map(|k| lo + k * step).collect())
}

/// Equidistant centers every `interval` frames with a clamped window of
/// `window_seconds` around each; videos shorter than `interval` become one
/// whole-video segment.
pub fn plan_segments(
    record: &VideoRecord,
    interval: usize,
    window_seconds: f64,
    per_window: usize,
) -> Result<SegmentPlan, SamplerError> {
    if interval == 0 {
        return Err(SamplerError::ZeroInterval);
    }
    if per_window == 0 {
        return Err(SamplerError::ZeroSamples);
    }
    let frames = record.frame_count;
    if frames < interval {
        return Ok(SegmentPlan {
            frame_count: frames,
            interval,
            centers: vec![1],
            windows: vec![(1, frames)],
            window_samples: vec![window_sample(1, frames, per_window)],
        });
    }
    let h = frames / interval;
    let half = (window_seconds / 2.0 * record.fps).floor().max(0.0) as usize;
    let centers: Vec<usize> = (0..h).map(|u| u * interval + 1).collect();
    let windows: Vec<(usize, usize)> = centers
        .iter()
        .map(|&c| (c.saturating_sub(half).max(1), (c + half).min(frames)))
        .collect();
    let window_samples = windows
        .iter()
        .map(|&(lo, hi)| window_sample(lo, hi, per_window))
        .collect();
    Ok(SegmentPlan {
        frame_count: frames,
        interval,
        centers,
        windows,
        window_samples,
    })
}
