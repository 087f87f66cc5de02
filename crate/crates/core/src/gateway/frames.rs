//! Resolves manifest frame templates into image payloads.

use std::fs;
use std::path::Path;

use super::{sim, GatewayError, ImagePayload};
use crate::manifest::VideoRecord;

/// Loads pre-extracted frames. Templates starting with `sim://` produce
/// synthetic payloads understood by the simulated backends.
#[derive(Debug, Clone, Default)]
pub struct FrameLoader {
    pub root: Option<String>,
}

impl FrameLoader {
    pub fn new(root: Option<String>) -> Self {
        Self { root }
    }

    pub fn load(&self, record: &VideoRecord, indices: &[usize]) -> Result<Vec<ImagePayload>, GatewayError> {
        indices.iter().map(|&i| self.load_one(record, i)).collect()
    }

    fn load_one(&self, record: &VideoRecord, index: usize) -> Result<ImagePayload, GatewayError> {
        if index == 0 || index > record.frame_count {
            return Err(GatewayError::Frame {
                uri: format!("{}#{index}", record.id),
                message: format!("index outside 1..={}", record.frame_count),
            });
        }
        let uri = record.frame_uri(index, self.root.as_deref());
        if uri.starts_with(sim::SIM_SCHEME) {
            return Ok(sim::frame_payload(&record.id, index));
        }
        let bytes = fs::read(&uri).map_err(|e| GatewayError::Frame {
            uri: uri.clone(),
            message: e.to_string(),
        })?;
        Ok(ImagePayload::new(bytes, media_type_for(Path::new(&uri))))
    }
}

fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        Some("gif") => "image/gif",
        _ => "application/octet-stream",
    }
}
