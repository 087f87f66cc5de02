//! Frame-level ROC AUC, average precision and dataset aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{expand_labels, load_scores, DatasetManifest, ManifestError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("label at position {0} is not 0 or 1")]
    BadLabel(usize),
    #[error("video {video_id}: {message}")]
    Video { video_id: String, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(EvalError::BadLabel(i));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices grouped by equal score, groups in descending score order.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney statistic with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    // Walk from the lowest score up, counting negatives already passed.
    let mut neg_below = 0u64;
    let mut twice_wins = 0u128;
    for group in descending_groups(scores).iter().rev() {
        let p = group.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let n = group.len() as u64 - p;
        twice_wins += u128::from(p) * u128::from(2 * neg_below + n);
        neg_below += n;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `sum_k (R_k - R_{k-1}) P_k` over a stable descending sort.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// ROC vertices from (0, 0) to (1, 1), one per distinct threshold.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>, EvalError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for group in descending_groups(scores) {
        for i in group {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn binary_accuracy(preds: &[u8], labels: &[u8]) -> Result<f64, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::DegenerateLabels);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub auc: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub ap: f64,
    pub n_frames: usize,
    pub n_positive: usize,
    pub n_videos: usize,
    pub roc_points: Vec<(f64, f64)>,
    /// Only videos containing both normal and anomalous frames.
    pub per_video: BTreeMap<String, VideoMetrics>,
}

/// Metrics over frames concatenated across videos, plus per-video values
/// where both classes occur.
pub fn aggregate_series(videos: &[(String, Vec<u8>, Vec<f64>)]) -> Result<MetricReport, EvalError> {
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_video = BTreeMap::new();
    for (id, labels, scores) in videos {
        let (pos, neg) = check(scores, labels).map_err(|e| EvalError::Video {
            video_id: id.clone(),
            message: e.to_string(),
        })?;
        if pos > 0 && neg > 0 {
            per_video.insert(
                id.clone(),
                VideoMetrics {
                    auc: roc_auc(scores, labels)?,
                    ap: average_precision(scores, labels)?,
                },
            );
        }
        all_scores.extend_from_slice(scores);
        all_labels.extend_from_slice(labels);
    }
    Ok(MetricReport {
        auc: roc_auc(&all_scores, &all_labels)?,
        ap: average_precision(&all_scores, &all_labels)?,
        n_frames: all_labels.len(),
        n_positive: all_labels.iter().filter(|&&l| l == 1).count(),
        n_videos: videos.len(),
        roc_points: roc_points(&all_scores, &all_labels)?,
        per_video,
    })
}

/// Reads `<scores_dir>/<video id>.csv` for every manifest video.
pub fn aggregate(manifest: &DatasetManifest, scores_dir: &Path) -> Result<MetricReport, EvalError> {
    let mut videos = Vec::with_capacity(manifest.len());
    for record in &manifest.videos {
        let labels = expand_labels(record)?.labels;
        let path = scores_dir.join(format!("{}.csv", record.id));
        if !path.exists() {
            return Err(EvalError::Video {
                video_id: record.id.clone(),
                message: format!("missing score file {}", path.display()),
            });
        }
        let scores = load_scores(&path).map_err(|e| EvalError::Video {
            video_id: record.id.clone(),
            message: e.to_string(),
        })?;
        if scores.len() != record.frame_count {
            return Err(EvalError::Video {
                video_id: record.id.clone(),
                message: format!("{} scores for {} frames", scores.len(), record.frame_count),
            });
        }
        videos.push((record.id.clone(), labels, scores));
    }
    aggregate_series(&videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{write_scores, Interval, Split, VideoRecord};
    use proptest::prelude::*;

    /// Counts winning positive-negative pairs directly.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn trapezoid(points: &[(f64, f64)]) -> f64 {
        points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::DegenerateLabels)));
        assert!(matches!(roc_auc(&[0.1], &[1, 0]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(roc_auc(&[f64::NAN, 0.1], &[1, 0]), Err(EvalError::NonFinite(0))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.2, 0.5, 0.1], &[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.2], &[0]), Err(EvalError::DegenerateLabels)));
        // Ties resolve by index: the positive at index 0 ranks first.
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn roc_points_shape() {
        let pts = roc_points(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(pts, [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(trapezoid(&pts), 0.75);
    }

    fn rec(id: &str, frames: usize, iv: Option<(usize, usize)>) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            frame_count: frames,
            fps: 30.0,
            frame_source: "sim://{id}/{index}".into(),
            label: u8::from(iv.is_some()),
            intervals: Some(iv.map(|(a, b)| vec![Interval::new(a, b)]).unwrap_or_default()),
        }
    }

    #[test]
    fn aggregate_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new("t", Split::Test, vec![rec("a", 4, Some((3, 4))), rec("n", 3, None)]);
        write_scores(&dir.path().join("a.csv"), &[0.1, 0.4, 0.35, 0.8]).unwrap();
        write_scores(&dir.path().join("n.csv"), &[0.2, 0.2, 0.9]).unwrap();
        let report = aggregate(&m, dir.path()).unwrap();
        assert_eq!(report.n_frames, 7);
        assert_eq!(report.n_positive, 2);
        assert_eq!(report.per_video.len(), 1);
        assert_eq!(report.per_video["a"].auc, 0.75);
        let all = [0.1, 0.4, 0.35, 0.8, 0.2, 0.2, 0.9];
        let labels = [0, 0, 1, 1, 0, 0, 0];
        assert_eq!(report.auc, pairwise_auc(&all, &labels));

        write_scores(&dir.path().join("n.csv"), &[0.2, 0.2]).unwrap();
        match aggregate(&m, dir.path()) {
            Err(EvalError::Video { video_id, .. }) => assert_eq!(video_id, "n"),
            other => panic!("{other:?}"),
        }
        std::fs::remove_file(dir.path().join("n.csv")).unwrap();
        assert!(matches!(aggregate(&m, dir.path()), Err(EvalError::Video { .. })));
    }

    #[test]
    fn single_video_matches_global() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new("t", Split::Test, vec![rec("a", 5, Some((2, 3)))]);
        write_scores(&dir.path().join("a.csv"), &[0.1, 0.7, 0.3, 0.2, 0.6]).unwrap();
        let r = aggregate(&m, dir.path()).unwrap();
        assert_eq!(r.per_video["a"].auc, r.auc);
        assert_eq!(r.per_video["a"].ap, r.ap);
    }

    #[test]
    fn accuracy() {
        assert_eq!(binary_accuracy(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap(), 0.75);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..20).prop_map(|v| f64::from(v) / 20.0), n),
                proptest::collection::vec(0u8..=1, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_and_trapezoid((scores, labels) in instance()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let auc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!((auc - trapezoid(&roc_points(&scores, &labels).unwrap())).abs() < 1e-12);
            let pts = roc_points(&scores, &labels).unwrap();
            prop_assert!(pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
        }

        #[test]
        fn auc_monotone_invariance((scores, labels) in instance()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&squashed, &labels).unwrap());
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&flipped, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ap_in_unit_interval((scores, labels) in instance()) {
            prop_assume!(labels.contains(&1));
            let ap = average_precision(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
