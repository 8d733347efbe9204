use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Row-sum tolerance for softmax outputs.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
}

impl AttentionKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            AttentionKind::SelfAttention => 0,
            AttentionKind::CrossAttention => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AttentionKind::SelfAttention),
            1 => Some(AttentionKind::CrossAttention),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::SelfAttention => "self",
            AttentionKind::CrossAttention => "cross",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial resolution of a latent map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Grid {
    pub h: u16,
    pub w: u16,
}

impl Grid {
    pub const fn new(h: u16, w: u16) -> Self {
        Self { h, w }
    }

    pub const fn square(side: u16) -> Self {
        Self { h: side, w: side }
    }

    pub fn cells(self) -> usize {
        usize::from(self.h) * usize::from(self.w)
    }

    /// Scale label used for layer selection: the longer side.
    pub fn scale(self) -> u16 {
        self.h.max(self.w)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// One dumped attention probability map.
///
/// Self records hold an `(h·w) × (h·w)` matrix, cross records an
/// `(h·w) × token_count` matrix. Every row is a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub kind: AttentionKind,
    pub layer: u32,
    pub timestep: u32,
    pub grid: Grid,
    pub token_count: Option<u32>,
    pub data: Vec<f32>,
}

impl AttentionRecord {
    pub fn new_self(layer: u32, timestep: u32, grid: Grid, data: Vec<f32>) -> Self {
        Self {
            kind: AttentionKind::SelfAttention,
            layer,
            timestep,
            grid,
            token_count: None,
            data,
        }
    }

    pub fn new_cross(layer: u32, timestep: u32, grid: Grid, tokens: u32, data: Vec<f32>) -> Self {
        Self {
            kind: AttentionKind::CrossAttention,
            layer,
            timestep,
            grid,
            token_count: Some(tokens),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.grid.cells()
    }

    pub fn cols(&self) -> usize {
        match self.kind {
            AttentionKind::SelfAttention => self.grid.cells(),
            AttentionKind::CrossAttention => self.token_count.unwrap_or(0) as usize,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{} layer {} t {} at {}",
            self.kind, self.layer, self.timestep, self.grid
        )
    }

    /// Checks shape, value range and row sums.
    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.token_count) {
            (AttentionKind::SelfAttention, Some(_)) => {
                return Err(Error::Format(format!(
                    "{}: self records carry no token count",
                    self.label()
                )))
            }
            (AttentionKind::CrossAttention, None) => {
                return Err(Error::Format(format!(
                    "{}: cross records need a token count",
                    self.label()
                )))
            }
            _ => {}
        }
        let expected = self.rows() * self.cols();
        if self.data.len() != expected {
            return Err(Error::Format(format!(
                "{}: {} values, shape needs {expected}",
                self.label(),
                self.data.len()
            )));
        }
        check_probability_rows(&self.data, self.cols(), &self.label())
    }

    pub fn into_matrix(self) -> Matrix {
        let (rows, cols) = (self.rows(), self.cols());
        Matrix::from_vec(rows, cols, self.data).expect("validated record shape")
    }
}

pub(crate) fn check_probability_rows(data: &[f32], cols: usize, label: &str) -> Result<()> {
    if let Some((index, &value)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::OutOfRange {
            record: label.to_string(),
            index,
            value,
        });
    }
    if cols == 0 {
        return Ok(());
    }
    for (row, chunk) in data.chunks(cols).enumerate() {
        let sum: f64 = chunk.iter().map(|&v| f64::from(v)).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::NotRowStochastic {
                record: label.to_string(),
                row,
                sum,
                tolerance: ROW_SUM_TOLERANCE,
            });
        }
    }
    Ok(())
}
