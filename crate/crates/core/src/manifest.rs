//! Dataset manifests, ground truth expansion and artifact persistence.
//!
//! A manifest is line-delimited JSON. An optional header line
//! `{"dataset": "<name>", "split": "train|val|test"}` may precede the video
//! records; every other non-blank line is one [`VideoRecord`]:
//!
//! ```text
//! {"id":"v1","frame_count":100,"fps":30.0,"frame_source":"{root}/{id}/{index:06}.jpg","label":1,"intervals":[[10,20]]}
//! ```
//!
//! Frame indices are 1-based throughout the crate.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::QuestionSet;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("video {video_id}: {reason}")]
    Invalid { video_id: String, reason: String },
    #[error("duplicate video id {video_id} (line {line})")]
    DuplicateId { video_id: String, line: usize },
    #[error("video {video_id} has no ground-truth intervals")]
    MissingGroundTruth { video_id: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl ManifestError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Inclusive 1-based frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }
}

impl From<[usize; 2]> for Interval {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Interval> for [usize; 2] {
    fn from(iv: Interval) -> Self {
        [iv.start, iv.end]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub frame_count: usize,
    pub fps: f64,
    pub frame_source: String,
    pub label: u8,
    /// Frame-level ground truth; absent for weakly labelled training videos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<Interval>>,
}

impl VideoRecord {
    /// Sorts and merges overlapping intervals, then checks every invariant.
    pub fn normalize(mut self) -> Result<Self, ManifestError> {
        let invalid = |reason: String| ManifestError::Invalid {
            video_id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.frame_count == 0 {
            return Err(invalid("frame_count must be at least 1".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(invalid(format!("fps must be positive, got {}", self.fps)));
        }
        if self.label > 1 {
            return Err(invalid(format!("label must be 0 or 1, got {}", self.label)));
        }
        if let Some(intervals) = self.intervals.as_mut() {
            for iv in intervals.iter() {
                if iv.start < 1 || iv.start > iv.end || iv.end > self.frame_count {
                    return Err(ManifestError::Invalid {
                        video_id: self.id.clone(),
                        reason: format!(
                            "interval [{}, {}] outside 1 <= start <= end <= {}",
                            iv.start, iv.end, self.frame_count
                        ),
                    });
                }
            }
            intervals.sort();
            let mut merged: Vec<Interval> = Vec::with_capacity(intervals.len());
            for iv in intervals.drain(..) {
                match merged.last_mut() {
                    Some(last) if iv.start <= last.end => last.end = last.end.max(iv.end),
                    _ => merged.push(iv),
                }
            }
            *intervals = merged;
            let has_events = !intervals.is_empty();
            if has_events != (self.label == 1) {
                return Err(ManifestError::Invalid {
                    video_id: self.id.clone(),
                    reason: format!(
                        "label {} disagrees with {} ground-truth interval(s)",
                        self.label,
                        intervals.len()
                    ),
                });
            }
        }
        Ok(self)
    }

    /// Resolves the frame source template for a 1-based frame index.
    ///
    /// Supported placeholders: `{root}`, `{id}`, `{index}` and zero-padded
    /// `{index:0N}`.
    pub fn frame_uri(&self, index: usize, root: Option<&str>) -> String {
        render_frame_template(&self.frame_source, &self.id, index, root)
    }
}

pub(crate) fn render_frame_template(
    template: &str,
    id: &str,
    index: usize,
    root: Option<&str>,
) -> String {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let Some(close) = rest[open..].find('}') else {
            out.push_str(&rest[open..]);
            return out;
        };
        let key = &rest[open + 1..open + close];
        match key {
            "id" => out.push_str(id),
            "root" => out.push_str(root.unwrap_or(".")),
            "index" => out.push_str(&index.to_string()),
            _ if key.starts_with("index:") => {
                let width: usize = key["index:".len()..].trim_start_matches('0').parse().unwrap_or(0);
                out.push_str(&format!("{index:0width$}"));
            }
            _ => out.push_str(&rest[open..=open + close]),
        }
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub videos: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split, videos: Vec<VideoRecord>) -> Self {
        Self {
            name: name.into(),
            split,
            videos,
        }
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Same name and split, keeping only videos accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&VideoRecord) -> bool) -> Self {
        Self {
            name: self.name.clone(),
            split: self.split,
            videos: self.videos.iter().filter(|v| keep(v)).cloned().collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    dataset: String,
    #[serde(default)]
    split: Split,
}

/// Parses manifest text. `default_name` is used when no header line exists.
pub fn parse_manifest(text: &str, default_name: &str) -> Result<DatasetManifest, ManifestError> {
    let mut name = default_name.to_string();
    let mut split = Split::default();
    let mut videos = Vec::new();
    let mut seen = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| ManifestError::Parse {
            line,
            message: e.to_string(),
        })?;
        if value.get("dataset").is_some() && value.get("id").is_none() {
            let header: ManifestHeader = serde_json::from_value(value).map_err(|e| ManifestError::Parse {
                line,
                message: e.to_string(),
            })?;
            name = header.dataset;
            split = header.split;
            continue;
        }
        let record: VideoRecord = serde_json::from_value(value).map_err(|e| ManifestError::Parse {
            line,
            message: e.to_string(),
        })?;
        let record = record.normalize()?;
        if !seen.insert(record.id.clone()) {
            return Err(ManifestError::DuplicateId {
                video_id: record.id,
                line,
            });
        }
        videos.push(record);
    }
    Ok(DatasetManifest { name, split, videos })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_manifest(&text, &stem)
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> String {
    let header = ManifestHeader {
        dataset: manifest.name.clone(),
        split: manifest.split,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for video in &manifest.videos {
        out.push_str(&serde_json::to_string(video).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), ManifestError> {
    write_file(path, manifest_to_string(manifest).as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| ManifestError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| ManifestError::io(path, e))
}

/// Per-frame binary ground truth of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthLabels {
    pub video_id: String,
    pub labels: Vec<u8>,
}

pub fn expand_labels(record: &VideoRecord) -> Result<GroundTruthLabels, ManifestError> {
    let intervals = record
        .intervals
        .as_ref()
        .ok_or_else(|| ManifestError::MissingGroundTruth {
            video_id: record.id.clone(),
        })?;
    let mut labels = vec![0u8; record.frame_count];
    for iv in intervals {
        for frame in iv.start..=iv.end.min(record.frame_count) {
            labels[frame - 1] = 1;
        }
    }
    Ok(GroundTruthLabels {
        video_id: record.id.clone(),
        labels,
    })
}

/// Options for converting a temporal annotation file into a manifest.
#[derive(Debug, Clone)]
pub struct UcfImport {
    pub fps_default: f64,
    /// Frame source template stored in every record.
    pub frame_source: String,
    /// Value substituted for `{root}` when counting frames on disk.
    pub frames_root: Option<String>,
    /// Known frame counts by video id; videos missing here are counted on disk.
    pub frame_counts: HashMap<String, usize>,
}

impl Default for UcfImport {
    fn default() -> Self {
        Self {
            fps_default: 30.0,
            frame_source: "{root}/{id}/{index:06}.jpg".into(),
            frames_root: None,
            frame_counts: HashMap::new(),
        }
    }
}

/// Reads `name count` lines into a frame-count table.
pub fn load_frame_counts(path: &Path) -> Result<HashMap<String, usize>, ManifestError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
    let mut counts = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [name, count] = fields[..] else {
            return Err(ManifestError::Parse {
                line: i + 1,
                message: format!("expected `name count`, got {} fields", fields.len()),
            });
        };
        let count = count.parse().map_err(|_| ManifestError::Parse {
            line: i + 1,
            message: format!("bad frame count {count:?}"),
        })?;
        counts.insert(strip_video_ext(name).to_string(), count);
    }
    Ok(counts)
}

fn strip_video_ext(name: &str) -> &str {
    for ext in [".mp4", ".avi", ".mkv"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem;
        }
    }
    name
}

fn count_frames_on_disk(template: &str, id: &str, root: Option<&str>) -> Option<usize> {
    let first = PathBuf::from(render_frame_template(template, id, 1, root));
    let dir = first.parent()?;
    let entries = fs::read_dir(dir).ok()?;
    let n = entries
        .filter_map(Result::ok)
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .count();
    (n > 0).then_some(n)
}

/// Converts a temporal annotation file (`name category s1 e1 s2 e2`, `-1`
/// marking absent intervals) into a test manifest.
///
/// Best effort: annotation ends past the last frame are clamped.
pub fn import_ucf_annotations(path: &Path, options: &UcfImport) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ucf".into());
    let mut videos = Vec::new();
    let mut seen = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 6 {
            return Err(ManifestError::Parse {
                line,
                message: format!("expected at least 6 fields, got {}", fields.len()),
            });
        }
        let id = strip_video_ext(fields[0]).to_string();
        let category = fields[1];
        let mut bounds = Vec::with_capacity(fields.len() - 2);
        for f in &fields[2..] {
            let v: i64 = f.parse().map_err(|_| ManifestError::Parse {
                line,
                message: format!("bad frame number {f:?}"),
            })?;
            bounds.push(v);
        }
        if bounds.len() % 2 != 0 {
            return Err(ManifestError::Parse {
                line,
                message: "interval bounds must come in pairs".into(),
            });
        }

        let frame_count = options
            .frame_counts
            .get(&id)
            .copied()
            .or_else(|| count_frames_on_disk(&options.frame_source, &id, options.frames_root.as_deref()))
            .ok_or_else(|| ManifestError::Invalid {
                video_id: id.clone(),
                reason: "frame count unknown (not in the frame-count table and no frames on disk)".into(),
            })?;

        let mut intervals = Vec::new();
        if !category.eq_ignore_ascii_case("normal") {
            for pair in bounds.chunks(2) {
                let (s, e) = (pair[0], pair[1]);
                if s < 0 || e < 0 {
                    continue;
                }
                let start = (s as usize).max(1);
                let end = (e as usize).min(frame_count);
                if end < (s as usize) || start > end {
                    log::warn!("{id}: dropping interval [{s}, {e}] outside 1..={frame_count}");
                    continue;
                }
                intervals.push(Interval::new(start, end));
            }
        }
        let label = u8::from(!intervals.is_empty());
        let record = VideoRecord {
            id: id.clone(),
            frame_count,
            fps: options.fps_default,
            frame_source: options.frame_source.clone(),
            label,
            intervals: Some(intervals),
        }
        .normalize()?;
        if !seen.insert(id.clone()) {
            return Err(ManifestError::DuplicateId { video_id: id, line });
        }
        videos.push(record);
    }
    Ok(DatasetManifest::new(name, Split::Test, videos))
}

/// On-disk form of a question set.
pub fn question_set_to_string(q: &QuestionSet) -> String {
    let mut s = serde_json::to_string_pretty(q).expect("question file serializes");
    s.push('\n');
    s
}

pub fn parse_question_file(text: &str, path: &Path) -> Result<QuestionSet, ManifestError> {
    serde_json::from_str(text).map_err(|e| ManifestError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_question_set(path: &Path) -> Result<QuestionSet, ManifestError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
    parse_question_file(&text, path)
}

pub fn write_question_set(path: &Path, q: &QuestionSet) -> Result<(), ManifestError> {
    write_file(path, question_set_to_string(q).as_bytes())
}

/// `frame_index,score` CSV with header; indices are 1-based.
pub fn scores_to_csv(scores: &[f64]) -> String {
    let mut out = String::from("frame_index,score\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, s));
    }
    out
}

pub fn write_scores(path: &Path, scores: &[f64]) -> Result<(), ManifestError> {
    write_file(path, scores_to_csv(scores).as_bytes())
}

pub fn load_scores(path: &Path) -> Result<Vec<f64>, ManifestError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ManifestError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut scores = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let bad = |message: String| ManifestError::Format {
            path: path.to_path_buf(),
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let index: usize = row
            .get(0)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("row {}: bad frame_index", i + 1)))?;
        if index != i + 1 {
            return Err(bad(format!("row {}: expected frame_index {}, got {index}", i + 1, i + 1)));
        }
        let score: f64 = row
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("row {}: bad score", i + 1)))?;
        if !score.is_finite() {
            return Err(bad(format!("row {}: non-finite score", i + 1)));
        }
        scores.push(score);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, f: usize, label: u8, intervals: Option<Vec<[usize; 2]>>) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            frame_count: f,
            fps: 30.0,
            frame_source: "{root}/{id}/{index:06}.jpg".into(),
            label,
            intervals: intervals.map(|v| v.into_iter().map(Interval::from).collect()),
        }
    }

    #[test]
    fn one_line_manifest() {
        let text = r#"{"id":"a","frame_count":100,"fps":30,"frame_source":"x/{index}.jpg","label":1,"intervals":[[10,20]]}"#;
        let m = parse_manifest(text, "demo").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.name, "demo");
        assert_eq!(m.videos[0].intervals.as_deref(), Some(&[Interval::new(10, 20)][..]));
    }

    #[test]
    fn inverted_interval_names_video() {
        let text = r#"{"id":"bad_one","frame_count":100,"fps":30,"frame_source":"x","label":1,"intervals":[[20,10]]}"#;
        let err = parse_manifest(text, "m").unwrap_err();
        assert!(matches!(&err, ManifestError::Invalid { video_id, .. } if video_id == "bad_one"), "{err}");
        assert!(err.to_string().contains("bad_one"));
    }

    #[test]
    fn duplicate_id_rejected() {
        let line = |id: &str| {
            format!(r#"{{"id":"{id}","frame_count":10,"fps":30,"frame_source":"x","label":0,"intervals":[]}}"#)
        };
        let text = [line("a"), line("b"), line("a")].join("\n");
        let err = parse_manifest(&text, "m").unwrap_err();
        assert!(matches!(err, ManifestError::DuplicateId { ref video_id, line: 3 } if video_id == "a"));
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "\n{not json}\n";
        assert!(matches!(parse_manifest(text, "m"), Err(ManifestError::Parse { line: 2, .. })));
    }

    #[test]
    fn label_must_match_intervals() {
        let r = record("v", 10, 1, Some(vec![]));
        assert!(r.normalize().is_err());
        // Training records without frame-level ground truth carry only the label.
        assert!(record("v", 10, 1, None).normalize().is_ok());
    }

    #[test]
    fn overlapping_intervals_merge() {
        let r = record("v", 50, 1, Some(vec![[30, 40], [5, 10], [8, 12]])).normalize().unwrap();
        assert_eq!(
            r.intervals.unwrap(),
            vec![Interval::new(5, 12), Interval::new(30, 40)]
        );
    }

    #[test]
    fn expand_examples() {
        let r = record("v", 5, 1, Some(vec![[2, 3]]));
        assert_eq!(expand_labels(&r).unwrap().labels, vec![0, 1, 1, 0, 0]);
        let r = record("v", 4, 0, Some(vec![]));
        assert_eq!(expand_labels(&r).unwrap().labels, vec![0, 0, 0, 0]);
        let r = record("v", 3, 1, Some(vec![[1, 3]]));
        assert_eq!(expand_labels(&r).unwrap().labels, vec![1, 1, 1]);
        assert!(expand_labels(&record("v", 3, 1, None)).is_err());
    }

    #[test]
    fn frame_template() {
        let r = record("clip", 10, 0, None);
        assert_eq!(r.frame_uri(7, Some("/data")), "/data/clip/000007.jpg");
        assert_eq!(render_frame_template("sim://{id}/{index}", "a", 12, None), "sim://a/12");
    }

    fn write_tmp(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn ucf_opts(counts: &[(&str, usize)]) -> UcfImport {
        UcfImport {
            frame_counts: counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            ..UcfImport::default()
        }
    }

    #[test]
    fn ucf_import_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            dir.path(),
            "Temporal_Anomaly_Annotation.txt",
            "Arrest007_x264 Arrest 1230 2110 -1 -1\nNormal_Videos_018_x264 Normal -1 -1 -1 -1\n",
        );
        let m = import_ucf_annotations(&p, &ucf_opts(&[("Arrest007_x264", 3000), ("Normal_Videos_018_x264", 900)])).unwrap();
        assert_eq!(m.videos[0].label, 1);
        assert_eq!(m.videos[0].intervals.as_deref(), Some(&[Interval::new(1230, 2110)][..]));
        assert_eq!(m.videos[0].fps, 30.0);
        assert_eq!(m.videos[1].label, 0);
        assert_eq!(m.videos[1].intervals.as_deref(), Some(&[][..]));
    }

    #[test]
    fn ucf_import_short_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "a.txt", "Arrest007_x264 Arrest 1 2\n");
        let err = import_ucf_annotations(&p, &ucf_opts(&[("Arrest007_x264", 10)])).unwrap_err();
        assert!(matches!(err, ManifestError::Parse { line: 1, .. }));
    }

    #[test]
    fn ucf_import_counts_frames_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let vid = dir.path().join("Clip_x264");
        fs::create_dir_all(&vid).unwrap();
        for i in 1..=12 {
            fs::write(vid.join(format!("{i:06}.jpg")), b"x").unwrap();
        }
        let p = write_tmp(dir.path(), "a.txt", "Clip_x264.mp4 Fighting 3 5 -1 -1\n");
        let opts = UcfImport {
            frames_root: Some(dir.path().to_string_lossy().into_owned()),
            ..UcfImport::default()
        };
        let m = import_ucf_annotations(&p, &opts).unwrap();
        assert_eq!(m.videos[0].id, "Clip_x264");
        assert_eq!(m.videos[0].frame_count, 12);
    }

    #[test]
    fn ucf_import_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "a.txt", "B_x264 Fighting 5 9 20 30\nA_x264 Normal -1 -1 -1 -1\n");
        let opts = ucf_opts(&[("A_x264", 40), ("B_x264", 40)]);
        let a = import_ucf_annotations(&p, &opts).unwrap();
        let b = import_ucf_annotations(&p, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.videos.iter().map(|v| v.id.as_str()).collect::<Vec<_>>(), ["B_x264", "A_x264"]);
    }

    #[test]
    fn scores_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&p, &[0.0, 0.25, 1.0]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "frame_index,score\n1,0\n2,0.25\n3,1\n");
        assert_eq!(load_scores(&p).unwrap(), vec![0.0, 0.25, 1.0]);
    }

    fn arb_record() -> impl Strategy<Value = VideoRecord> {
        (1usize..500, "[a-z]{1,8}", prop::option::of(prop::collection::vec((1usize..500, 0usize..40), 0..4)))
            .prop_map(|(f, id, ivs)| {
                let intervals = ivs.map(|v| {
                    v.into_iter()
                        .map(|(s, len)| {
                            let s = s.min(f);
                            Interval::new(s, (s + len).min(f))
                        })
                        .collect::<Vec<_>>()
                });
                let label = match &intervals {
                    Some(v) => u8::from(!v.is_empty()),
                    None => (f % 2) as u8,
                };
                VideoRecord {
                    id,
                    frame_count: f,
                    fps: 25.0,
                    frame_source: "{root}/{id}/{index:05}.png".into(),
                    label,
                    intervals,
                }
                .normalize()
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn manifest_roundtrip(records in prop::collection::vec(arb_record(), 0..6)) {
            let mut seen = HashSet::new();
            let videos: Vec<_> = records.into_iter().filter(|r| seen.insert(r.id.clone())).collect();
            let m = DatasetManifest::new("rt", Split::Val, videos);
            let back = parse_manifest(&manifest_to_string(&m), "other").unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn expanded_sum_matches_interval_length(r in arb_record()) {
            if let Some(ivs) = &r.intervals {
                let total: usize = ivs.iter().map(Interval::len).sum();
                let gt = expand_labels(&r).unwrap();
                prop_assert_eq!(gt.labels.len(), r.frame_count);
                prop_assert_eq!(gt.labels.iter().map(|&x| x as usize).sum::<usize>(), total);
            }
        }
    }
}
