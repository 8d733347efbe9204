use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::record::{AttentionKind, AttentionRecord, Grid};
use crate::error::{Error, Result};
use crate::ClassId;

/// Half-open token range `[start, end)` on the cross-attention token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: u32,
    pub end: u32,
}

impl TokenSpan {
    pub const fn new(start: u32, end: u32) -> Self {
        Self { start, end }
    }

    pub fn len(self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: ClassId,
    pub class_name: String,
    pub token_span: TokenSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: u32,
    pub width: u32,
}

impl ImageSize {
    pub const fn new(height: u32, width: u32) -> Self {
        Self { height, width }
    }

    pub fn pixels(self) -> usize {
        self.height as usize * self.width as usize
    }
}

/// Where one record lives inside the container directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDescriptor {
    pub kind: AttentionKind,
    pub layer: u32,
    pub timestep: u32,
    pub grid: Grid,
    /// Token count for cross records, `h·w` for self records.
    pub cols: u32,
    /// Blob path relative to the container directory.
    #[serde(default)]
    pub file: String,
    #[serde(default)]
    pub offset: u64,
    #[serde(default)]
    pub length: u64,
}

impl RecordDescriptor {
    pub fn for_record(record: &AttentionRecord) -> Self {
        Self {
            kind: record.kind,
            layer: record.layer,
            timestep: record.timestep,
            grid: record.grid,
            cols: record.cols() as u32,
            file: String::new(),
            offset: 0,
            length: 0,
        }
    }

    pub fn key(&self) -> (AttentionKind, u32, u32, Grid) {
        (self.kind, self.layer, self.timestep, self.grid)
    }

    pub fn label(&self) -> String {
        format!(
            "{} layer {} t {} at {}",
            self.kind, self.layer, self.timestep, self.grid
        )
    }

    pub fn payload_len(&self) -> u64 {
        self.grid.cells() as u64 * u64::from(self.cols) * 4
    }

    pub(crate) fn default_file_name(&self) -> String {
        format!(
            "records/{}_{}x{}_l{:03}_t{:04}.bin",
            self.kind, self.grid.h, self.grid.w, self.layer, self.timestep
        )
    }
}

/// Metadata binding one generated image to its prompt, class token spans
/// and attention records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub image_id: String,
    /// Full generation prompt (caption with classes appended).
    pub prompt: String,
    /// Class-only prompt used for cross-attention capture.
    pub class_prompt: String,
    pub classes: Vec<ClassEntry>,
    pub num_layers: u32,
    pub num_timesteps: u32,
    pub image_size: ImageSize,
    pub records: Vec<RecordDescriptor>,
    pub seed: u64,
}

impl RunManifest {
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for class in &self.classes {
            if class.class_id == 0 || class.class_id == crate::UNCERTAIN {
                return Err(Error::Manifest(format!(
                    "class '{}' uses reserved id {}",
                    class.class_name, class.class_id
                )));
            }
            if !ids.insert(class.class_id) {
                return Err(Error::Manifest(format!(
                    "class id {} listed twice",
                    class.class_id
                )));
            }
            if class.token_span.is_empty() {
                return Err(Error::Manifest(format!(
                    "class '{}' has an empty token span",
                    class.class_name
                )));
            }
        }
        let mut spans: Vec<_> = self.classes.iter().map(|c| c.token_span).collect();
        spans.sort_by_key(|s| s.start);
        for pair in spans.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::Manifest(format!(
                    "token spans [{}, {}) and [{}, {}) overlap",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                )));
            }
        }

        let mut keys = BTreeSet::new();
        for desc in &self.records {
            if !keys.insert(desc.key()) {
                return Err(Error::Format(format!(
                    "duplicate descriptor {}",
                    desc.label()
                )));
            }
            match desc.kind {
                AttentionKind::SelfAttention if desc.cols as usize != desc.grid.cells() => {
                    return Err(Error::Format(format!(
                        "{}: self record must have {} columns, not {}",
                        desc.label(),
                        desc.grid.cells(),
                        desc.cols
                    )));
                }
                AttentionKind::CrossAttention => {
                    self.check_spans(desc.cols)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks every token span against a token axis of length `tokens`.
    pub fn check_spans(&self, tokens: u32) -> Result<()> {
        for class in &self.classes {
            if class.token_span.end > tokens {
                return Err(Error::Manifest(format!(
                    "class '{}' span [{}, {}) exceeds the {tokens}-token axis",
                    class.class_name, class.token_span.start, class.token_span.end
                )));
            }
        }
        Ok(())
    }
}
